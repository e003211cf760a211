"""Feature tracks: mel spectrograms, provider ingestion, TV normalization, cache.

All feature tracks are rate-stamped 2-D arrays (frames x channels). The three
pretrained extractors (upstream speech embedder, triphone posteriorgram
extractor, articulatory speech-inversion system) live behind providers; this
module validates their outputs against the fixed geometries:

    upstream embeddings   50 Hz x 1024
    posteriorgrams       100 Hz x 5816
    tract variables      100 Hz x 6
    mel spectrograms     100 Hz x 80
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar

import numpy as np

from .audio import Waveform
from .errors import CacheIntegrityError, ModelStateError, ProviderError, ValidationError

UPSTREAM_DIM = 1024
UPSTREAM_RATE_HZ = 50.0
PPG_DIM = 5816
TARGET_RATE_HZ = 100.0
TV_DIM = 6
MEL_DIM = 80

# Standard constriction tract-variable set; overridable at provider level.
DEFAULT_TV_CHANNELS = ("LA", "LP", "TBCL", "TBCD", "TTCL", "TTCD")

PPG_ROW_SUM_TOL = 1e-4
PPG_RENORM_TOL = 1e-3


def _coerce_values(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


@dataclass(frozen=True)
class FrameSequence:
    """Rate-stamped 2-D real array (num_frames x num_channels)."""

    values: np.ndarray
    frame_rate: float

    CHANNELS: ClassVar[int | None] = None
    RATE_HZ: ClassVar[float | None] = None

    def __post_init__(self):
        arr = _coerce_values(self.values)
        if arr.ndim != 2:
            raise ValidationError(f"values must be 2-D (frames x channels), got shape {arr.shape}")
        object.__setattr__(self, "values", arr)
        if not self.frame_rate > 0:
            raise ValidationError(f"frame_rate must be positive, got {self.frame_rate}")
        object.__setattr__(self, "frame_rate", float(self.frame_rate))
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValidationError("frame values must be finite")
        if self.CHANNELS is not None and arr.shape[1] != self.CHANNELS:
            raise ValidationError(
                f"{type(self).__name__} requires {self.CHANNELS} channels, got {arr.shape[1]}"
            )
        if self.RATE_HZ is not None and self.frame_rate != self.RATE_HZ:
            raise ValidationError(
                f"{type(self).__name__} requires frame_rate {self.RATE_HZ}, got {self.frame_rate}"
            )

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MelSpectrogram(FrameSequence):
    CHANNELS: ClassVar[int] = MEL_DIM
    RATE_HZ: ClassVar[float] = TARGET_RATE_HZ


@dataclass(frozen=True)
class UpstreamEmbedding(FrameSequence):
    CHANNELS: ClassVar[int] = UPSTREAM_DIM
    RATE_HZ: ClassVar[float] = UPSTREAM_RATE_HZ


@dataclass(frozen=True)
class PosteriorgramTrack(FrameSequence):
    """Per-frame probability distributions over triphone senone classes."""

    CHANNELS: ClassVar[int] = PPG_DIM
    RATE_HZ: ClassVar[float] = TARGET_RATE_HZ

    def __post_init__(self):
        super().__post_init__()
        check_distribution_rows(self.values, tolerance=PPG_ROW_SUM_TOL)


@dataclass(frozen=True)
class TractVariableTrack(FrameSequence):
    channel_names: tuple[str, ...] = DEFAULT_TV_CHANNELS

    CHANNELS: ClassVar[int] = TV_DIM
    RATE_HZ: ClassVar[float] = TARGET_RATE_HZ

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        if len(self.channel_names) != TV_DIM:
            raise ValidationError(
                f"expected {TV_DIM} channel names, got {len(self.channel_names)}"
            )


def check_distribution_rows(values: np.ndarray, tolerance: float = PPG_ROW_SUM_TOL) -> None:
    """Assert every row is a probability distribution within tolerance."""
    if values.shape[0] == 0:
        return
    if np.any(values < 0):
        raise ValidationError("posteriorgram rows must be non-negative")
    sums = values.astype(np.float64).sum(axis=1)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > tolerance:
        raise ValidationError(
            f"posteriorgram row sums deviate from 1 by {worst:.3g} (tolerance {tolerance:g})"
        )


# ---------------------------------------------------------------------------
# Mel spectrogram
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    window: int = 400  # 25 ms at 16 kHz
    hop: int = 160  # 10 ms at 16 kHz
    n_fft: int = 512
    n_mels: int = MEL_DIM
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.window > self.n_fft:
            raise ValidationError("n_fft must be >= window")
        if self.sample_rate % self.hop != 0 or self.sample_rate // self.hop != int(TARGET_RATE_HZ):
            raise ValidationError(
                f"hop must place frames at {TARGET_RATE_HZ:.0f} Hz "
                f"(sample_rate/hop), got {self.sample_rate}/{self.hop}"
            )


DEFAULT_MEL_CONFIG = MelConfig()


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: MelConfig = DEFAULT_MEL_CONFIG) -> np.ndarray:
    """Triangular mel filterbank, (n_mels x n_fft//2+1), continuous construction."""
    n_bins = config.n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, config.sample_rate / 2.0, n_bins)
    mel_points = np.linspace(_hz_to_mel(config.fmin), _hz_to_mel(config.fmax), config.n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    fb = np.zeros((config.n_mels, n_bins))
    for m in range(config.n_mels):
        lower = (fft_freqs - hz_points[m]) / (hz_points[m + 1] - hz_points[m])
        upper = (hz_points[m + 2] - fft_freqs) / (hz_points[m + 2] - hz_points[m + 1])
        fb[m] = np.maximum(0.0, np.minimum(lower, upper))
    return fb


def compute_mel(wave: Waveform, config: MelConfig = DEFAULT_MEL_CONFIG) -> MelSpectrogram:
    """Log-mel spectrogram; frame count = floor((n - window)/hop) + 1, no padding."""
    if wave.sample_rate != config.sample_rate:
        raise ValidationError(
            f"waveform rate {wave.sample_rate} != analysis rate {config.sample_rate}"
        )
    n = len(wave)
    if n < config.window:
        raise ValidationError(
            f"input shorter than analysis window ({n} < {config.window} samples)"
        )
    num_frames = (n - config.window) // config.hop + 1
    idx = np.arange(config.window)[None, :] + config.hop * np.arange(num_frames)[:, None]
    frames = wave.samples[idx].astype(np.float64)
    window_fn = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(config.window) / config.window)
    spectrum = np.fft.rfft(frames * window_fn, n=config.n_fft, axis=1)
    power = np.abs(spectrum) ** 2
    mel_power = power @ mel_filterbank(config).T
    log_mel = np.log(np.maximum(mel_power, config.log_floor))
    return MelSpectrogram(log_mel.astype(np.float32), config.sample_rate / config.hop)


# ---------------------------------------------------------------------------
# Provider ingestion
# ---------------------------------------------------------------------------


def _call_provider(provider, wave: Waveform, context: str):
    try:
        return provider.extract(wave)
    except (ValidationError, ModelStateError):
        raise
    except Exception as exc:
        name = getattr(provider, "name", type(provider).__name__)
        raise ProviderError(f"{context} provider {name!r} failed: {exc}") from exc


def _check_nominal_frames(frames: int, wave: Waveform, rate: float, context: str) -> None:
    nominal = int(round(wave.duration * rate))
    if abs(frames - nominal) > 1:
        raise ValidationError(
            f"{context}: provider returned {frames} frames, expected {nominal} +/- 1 "
            f"({wave.duration:.3f} s at {rate:.0f} Hz)"
        )


def get_upstream_embeddings(wave: Waveform, provider) -> UpstreamEmbedding:
    """Run the upstream speech embedder and validate the 50 Hz x 1024 contract."""
    values = _coerce_values(_call_provider(provider, wave, "upstream"))
    if values.ndim != 2 or values.shape[1] != UPSTREAM_DIM:
        raise ValidationError(
            f"upstream provider must return (frames x {UPSTREAM_DIM}), got {values.shape}"
        )
    _check_nominal_frames(values.shape[0], wave, UPSTREAM_RATE_HZ, "upstream")
    return UpstreamEmbedding(values, UPSTREAM_RATE_HZ)


def get_ppg_targets(wave: Waveform, provider) -> PosteriorgramTrack:
    """Run the posteriorgram extractor; renormalize rows within tolerance."""
    values = _coerce_values(_call_provider(provider, wave, "posteriorgram"))
    if values.ndim != 2 or values.shape[1] != PPG_DIM:
        raise ValidationError(
            f"posteriorgram provider must return (frames x {PPG_DIM}), got {values.shape}"
        )
    _check_nominal_frames(values.shape[0], wave, TARGET_RATE_HZ, "posteriorgram")
    if values.shape[0]:
        if np.any(values < 0):
            raise ValidationError("posteriorgram rows must be non-negative")
        sums = values.astype(np.float64).sum(axis=1)
        worst = float(np.max(np.abs(sums - 1.0)))
        if worst > PPG_RENORM_TOL:
            raise ValidationError(
                f"posteriorgram row sums off by {worst:.3g}, beyond renormalization "
                f"tolerance {PPG_RENORM_TOL:g}"
            )
        values = (values.astype(np.float64) / sums[:, None]).astype(np.float32)
    return PosteriorgramTrack(values, TARGET_RATE_HZ)


def get_tv_targets(wave: Waveform, provider) -> TractVariableTrack:
    """Run the speech-inversion provider; returns raw physical-scale variables."""
    values = _coerce_values(_call_provider(provider, wave, "tract-variable"))
    if values.ndim != 2 or values.shape[1] != TV_DIM:
        raise ValidationError(
            f"tract-variable provider must return (frames x {TV_DIM}), got {values.shape}"
        )
    _check_nominal_frames(values.shape[0], wave, TARGET_RATE_HZ, "tract-variable")
    names = tuple(getattr(provider, "channel_names", DEFAULT_TV_CHANNELS))
    return TractVariableTrack(values, TARGET_RATE_HZ, channel_names=names)


# ---------------------------------------------------------------------------
# Tract-variable normalization for the tanh output head
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TvNormalizationStats:
    """Per-channel training min/max and the target range inside (-1, 1)."""

    channel_min: np.ndarray
    channel_max: np.ndarray
    target_range: tuple[float, float] = (-0.95, 0.95)

    def __post_init__(self):
        mn = np.asarray(self.channel_min, dtype=np.float64).reshape(-1)
        mx = np.asarray(self.channel_max, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "channel_min", mn)
        object.__setattr__(self, "channel_max", mx)
        if mn.shape != mx.shape:
            raise ValidationError("channel_min and channel_max must have the same shape")
        lo, hi = self.target_range
        if not (-1.0 < lo < hi < 1.0):
            raise ValidationError(f"target_range must satisfy -1 < lo < hi < 1, got {self.target_range}")
        object.__setattr__(self, "target_range", (float(lo), float(hi)))
        degenerate = np.nonzero(~(mx > mn))[0]
        if degenerate.size:
            raise ValidationError(
                f"degenerate channel(s) with max <= min: {degenerate.tolist()}"
            )


def fit_tv_normalization(
    tracks: list[TractVariableTrack], target_range: tuple[float, float] = (-0.95, 0.95)
) -> TvNormalizationStats:
    """Per-channel min/max over the training tracks."""
    if not tracks:
        raise ValidationError("cannot fit normalization statistics on zero tracks")
    stacked = np.concatenate([t.values.astype(np.float64) for t in tracks], axis=0)
    if stacked.shape[0] == 0:
        raise ValidationError("cannot fit normalization statistics on empty tracks")
    return TvNormalizationStats(stacked.min(axis=0), stacked.max(axis=0), target_range)


def normalize_tv_channels(
    track: TractVariableTrack, stats: TvNormalizationStats
) -> TractVariableTrack:
    """Affine map of [min, max] onto the target range, clipping outside values."""
    if stats.channel_min.size != track.num_channels:
        raise ValidationError(
            f"stats cover {stats.channel_min.size} channels, track has {track.num_channels}"
        )
    lo, hi = stats.target_range
    span = stats.channel_max - stats.channel_min
    scaled = lo + (track.values.astype(np.float64) - stats.channel_min) / span * (hi - lo)
    clipped = np.clip(scaled, lo, hi)
    return TractVariableTrack(clipped, track.frame_rate, channel_names=track.channel_names)


def denormalize_tv_channels(
    track: TractVariableTrack, stats: TvNormalizationStats
) -> TractVariableTrack:
    """Inverse of normalize_tv_channels on the non-clipped region."""
    lo, hi = stats.target_range
    span = stats.channel_max - stats.channel_min
    raw = (track.values.astype(np.float64) - lo) / (hi - lo) * span + stats.channel_min
    return TractVariableTrack(raw, track.frame_rate, channel_names=track.channel_names)


def pair_common_length(*tracks: FrameSequence) -> tuple[np.ndarray, ...]:
    """Truncate rate-matched tracks to their common minimum frame count."""
    m = min(t.num_frames for t in tracks)
    return tuple(t.values[:m] for t in tracks)


# ---------------------------------------------------------------------------
# Binary feature cache
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"FACF"
CACHE_VERSION = 1
CACHE_DTYPE_F32 = 1
_HEADER = struct.Struct("<4sBBdQQ")


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def write_feature_cache(
    seq: FrameSequence,
    path: str | Path,
    channel_names: tuple[str, ...] | None = None,
    provider_id: str | None = None,
) -> Path:
    """Write a float32 FrameSequence and a JSON metadata sidecar.

    The cache stores float32 little-endian only; convert float64 sequences
    explicitly before writing.
    """
    path = Path(path)
    if seq.values.dtype != np.float32:
        raise ValidationError(
            f"feature cache stores float32; got {seq.values.dtype} (convert explicitly)"
        )
    header = _HEADER.pack(
        CACHE_MAGIC,
        CACHE_VERSION,
        CACHE_DTYPE_F32,
        seq.frame_rate,
        seq.num_frames,
        seq.num_channels,
    )
    payload = np.ascontiguousarray(seq.values, dtype="<f4").tobytes()
    path.write_bytes(header + payload)
    meta = {
        "frame_rate": seq.frame_rate,
        "num_frames": seq.num_frames,
        "num_channels": seq.num_channels,
        "channel_names": list(channel_names) if channel_names else None,
        "provider_id": provider_id,
    }
    _sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def read_feature_cache(path: str | Path) -> tuple[FrameSequence, dict]:
    """Read a cache file back; returns the sequence and its sidecar metadata."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise CacheIntegrityError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, dtype_code, frame_rate, frames, channels = _HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC:
        raise CacheIntegrityError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise CacheIntegrityError(f"{path}: unsupported version {version}")
    if dtype_code != CACHE_DTYPE_F32:
        raise CacheIntegrityError(f"{path}: unsupported dtype code {dtype_code}")
    payload = blob[_HEADER.size :]
    expected = frames * channels * 4
    if len(payload) != expected:
        raise CacheIntegrityError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(frames, channels).copy()
    sidecar = _sidecar_path(path)
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    return FrameSequence(values, frame_rate), meta
