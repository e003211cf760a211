"""Provider interfaces for the pretrained components, with deterministic mocks.

Six external systems are pluggable: the upstream speech embedder, the
triphone posteriorgram extractor, the speech-inversion system, the speaker
encoder, the vocoder, and the transcriber. Training any of them is out of
scope here; each mock is a cheap deterministic stand-in so the whole pipeline
runs at desk scale with no downloads.

Mocks derive their outputs from the audio content (or the utterance record),
so identical inputs always map to identical outputs across processes.
"""

from __future__ import annotations

import hashlib
import zlib

import numpy as np

from .audio import Waveform
from .errors import ModelStateError, ValidationError
from .features import (
    DEFAULT_TV_CHANNELS,
    PPG_DIM,
    TARGET_RATE_HZ,
    UPSTREAM_DIM,
    UPSTREAM_RATE_HZ,
    MelSpectrogram,
)


class ProviderBase:
    """Common lifecycle: a provider must be ready before it is called.

    ``edge_behavior`` documents how the provider sizes its output relative to
    the nominal rate x duration frame count (extractors may differ by one
    frame at utterance edges); ``concurrency_safe`` declares whether calls
    may overlap or must be serialized by the pipeline.
    """

    name = "provider"
    concurrency_safe = True
    edge_behavior = "round-nearest"

    def __init__(self):
        self._ready = True

    def close(self) -> None:
        self._ready = False

    def require_ready(self) -> None:
        if not self._ready:
            raise ModelStateError(f"provider {self.name!r} is not initialized")


def _content_digest(samples: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(samples, dtype="<f4").tobytes())


def _frame_stats(wave: Waveform, frame_rate: float, num_frames: int) -> np.ndarray:
    """Per-frame (mean, rms, peak, sign-change rate) summary of the audio."""
    win = max(1, int(round(wave.sample_rate / frame_rate)))
    stats = np.zeros((num_frames, 4), dtype=np.float64)
    samples = wave.samples.astype(np.float64)
    for i in range(num_frames):
        chunk = samples[i * win : (i + 1) * win]
        if chunk.size == 0:
            continue
        stats[i, 0] = chunk.mean()
        stats[i, 1] = np.sqrt(np.mean(chunk**2))
        stats[i, 2] = np.max(np.abs(chunk))
        stats[i, 3] = np.mean(np.abs(np.diff(np.signbit(chunk).astype(np.float64))))
    return stats


class MockUpstreamProvider(ProviderBase):
    """Content-derived stand-in for a pretrained 1024-dim speech embedder."""

    name = "mock"

    def __init__(self, seed: int = 7, dim: int = UPSTREAM_DIM):
        super().__init__()
        self.dim = dim
        self.frame_rate = UPSTREAM_RATE_HZ
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((4, dim))

    def extract(self, wave: Waveform) -> np.ndarray:
        self.require_ready()
        num_frames = int(round(wave.duration * self.frame_rate))
        stats = _frame_stats(wave, self.frame_rate, num_frames)
        return np.tanh(stats @ self.weights).astype(np.float32)


class MockPpgProvider(ProviderBase):
    """Posteriorgram stand-in; ``uniform`` rows or content-peaked softmax rows."""

    name = "mock-uniform"

    def __init__(self, seed: int = 11, num_classes: int = PPG_DIM, mode: str = "uniform"):
        super().__init__()
        if mode not in ("uniform", "content"):
            raise ValidationError(f"unknown mock posteriorgram mode {mode!r}")
        self.num_classes = num_classes
        self.frame_rate = TARGET_RATE_HZ
        self.mode = mode
        self.name = f"mock-{mode}"
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((4, num_classes))

    def extract(self, wave: Waveform) -> np.ndarray:
        self.require_ready()
        num_frames = int(round(wave.duration * self.frame_rate))
        if self.mode == "uniform":
            return np.full((num_frames, self.num_classes), 1.0 / self.num_classes, dtype=np.float32)
        stats = _frame_stats(wave, self.frame_rate, num_frames)
        logits = 8.0 * (stats @ self.weights)
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        return probs.astype(np.float32)


class MockTvProvider(ProviderBase):
    """Sine-wave tract variables on physical-looking per-channel scales."""

    name = "mock-sine"

    def __init__(self, num_channels: int = 6):
        super().__init__()
        self.num_channels = num_channels
        self.frame_rate = TARGET_RATE_HZ
        self.channel_names = DEFAULT_TV_CHANNELS[:num_channels]
        idx = np.arange(num_channels, dtype=np.float64)
        self.freqs = 0.8 + 0.6 * idx  # Hz, one trajectory speed per channel
        self.phases = 0.5 * idx
        self.scales = 2.0 + 3.0 * idx
        self.offsets = -1.0 + 2.0 * idx

    def extract(self, wave: Waveform) -> np.ndarray:
        self.require_ready()
        num_frames = int(round(wave.duration * self.frame_rate))
        t = np.arange(num_frames, dtype=np.float64)[:, None] / self.frame_rate
        values = self.offsets + self.scales * np.sin(2.0 * np.pi * self.freqs * t + self.phases)
        return values.astype(np.float32)


class MockSpeakerEncoder(ProviderBase):
    """Hashes the speaker identity (or audio content) into a fixed unit vector."""

    name = "mock"

    def __init__(self, seed: int = 23, dim: int = 256):
        super().__init__()
        self.dim = dim
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((dim, dim)) / np.sqrt(dim)

    def _base_vector(self, key: bytes) -> np.ndarray:
        digest = hashlib.blake2b(key, digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.dim)

    def embed(self, utterance, record=None) -> np.ndarray:
        self.require_ready()
        if record is not None:
            base = self._base_vector(record.speaker_id.encode("utf-8"))
        elif isinstance(utterance, Waveform):
            base = self._base_vector(_content_digest(utterance.samples).to_bytes(8, "little"))
        elif isinstance(utterance, MelSpectrogram):
            base = self._base_vector(
                _content_digest(utterance.values.reshape(-1)).to_bytes(8, "little")
            )
        else:
            raise ValidationError("speaker encoder needs a Waveform, MelSpectrogram, or record")
        vec = self.weights @ base
        return (vec / np.linalg.norm(vec)).astype(np.float32)


class MockVocoder(ProviderBase):
    """Sinusoid synthesis: per-frame pitch from the peak mel channel, 10 ms hop."""

    name = "mock"

    def __init__(self, sample_rate: int = 16000):
        super().__init__()
        self.sample_rate = sample_rate
        self.hop = int(round(sample_rate / TARGET_RATE_HZ))

    def synthesize(self, mel: MelSpectrogram) -> Waveform:
        self.require_ready()
        num_frames = mel.num_frames
        if num_frames == 0:
            return Waveform(np.zeros(0, dtype=np.float32), self.sample_rate)
        peak = mel.values.argmax(axis=1).astype(np.float64)
        freq = 80.0 + 8.0 * peak  # map channel index to an audible pitch
        energy = np.exp(mel.values.astype(np.float64).mean(axis=1) / 8.0)
        amp = 0.3 * energy / max(energy.max(), 1e-8)
        freq_per_sample = np.repeat(freq, self.hop)
        amp_per_sample = np.repeat(amp, self.hop)
        phase = 2.0 * np.pi * np.cumsum(freq_per_sample) / self.sample_rate
        return Waveform((amp_per_sample * np.sin(phase)).astype(np.float32), self.sample_rate)


class EchoTranscriber(ProviderBase):
    """Returns the transcript attached to the utterance record."""

    name = "mock-echo"
    concurrency_safe = True

    def transcribe(self, wave: Waveform, record=None) -> str:
        self.require_ready()
        if record is None:
            raise ValidationError("echo transcriber needs the utterance record")
        return record.transcript


class GarblingTranscriber(ProviderBase):
    """Drops every other word of the attached transcript (a controllable WER source)."""

    name = "mock-garble"

    def __init__(self, keep_stride: int = 2):
        super().__init__()
        self.keep_stride = keep_stride

    def transcribe(self, wave: Waveform, record=None) -> str:
        self.require_ready()
        if record is None:
            raise ValidationError("garbling transcriber needs the utterance record")
        words = record.transcript.split()
        return " ".join(words[:: self.keep_stride])


# ---------------------------------------------------------------------------
# Registry used by the CLI; only mock providers ship in-repo.
# ---------------------------------------------------------------------------

_REGISTRY = {
    "upstream": {"mock": MockUpstreamProvider},
    "ppg": {
        "mock-uniform": lambda **kw: MockPpgProvider(mode="uniform", **kw),
        "mock-content": lambda **kw: MockPpgProvider(mode="content", **kw),
    },
    "tv": {"mock-sine": MockTvProvider},
    "speaker": {"mock": MockSpeakerEncoder},
    "vocoder": {"mock": MockVocoder},
    "transcriber": {
        "mock-echo": EchoTranscriber,
        "mock-garble": GarblingTranscriber,
    },
}


def available_providers(kind: str) -> list[str]:
    if kind not in _REGISTRY:
        raise ValidationError(f"unknown provider kind {kind!r}")
    return sorted(_REGISTRY[kind])


def build_provider(kind: str, provider_id: str, **kwargs):
    if kind not in _REGISTRY:
        raise ValidationError(f"unknown provider kind {kind!r}")
    try:
        factory = _REGISTRY[kind][provider_id]
    except KeyError:
        raise ValidationError(
            f"unknown {kind} provider {provider_id!r}; available: {available_providers(kind)}"
        ) from None
    return factory(**kwargs)
