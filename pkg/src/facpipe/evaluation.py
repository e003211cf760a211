"""Objective metrics: mel cepstral distortion, word error rate, correlations,
and speaker-embedding centroid analysis.

MCD recipe: type-II DCT mel cepstra of order 13, c0 excluded, DTW alignment
with steps {(1,0),(0,1),(1,1)}, and the conventional scale (10/ln 10)*sqrt(2)
per aligned frame pair. WER is word-level Levenshtein with unit costs over
normalized text; it can exceed 100% when the hypothesis inserts words.

Centroid distances are measured in the native speaker-embedding space; the
2-D reduction used for scatter plots is delegated to external tooling via the
embedding export (feature-cache files, one per speaker and condition).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .audio import Waveform
from .conversion import SpeakerEmbedding
from .corpus import normalize_transcript
from .errors import ModelStateError, ProviderError, ValidationError
from .features import FrameSequence, write_feature_cache

MCD_SCALE = (10.0 / math.log(10.0)) * math.sqrt(2.0)

DTW_STEPS = ((1, 0), (0, 1), (1, 1))

# Full-scale baselines from the original experiments (28-speaker corpus, real
# pretrained providers). Not reproducible at desk scale with mocks; kept for
# regression comparison once real providers are plugged in.
FULL_SCALE_BASELINES = {
    "mcd_average": {"combined": 6.3719, "tv_only": 6.1614, "ppg_only": 6.0918},
    "wer_average": {
        "combined": 17.96,
        "tv_only": 17.83,
        "ppg_only": 21.84,
        "original_audio": 134.72,
    },
    "centroid_distance": {"tv_only_mean": 9.25, "tv_only_std": 5.1},
}


# ---------------------------------------------------------------------------
# Mel cepstra and MCD
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MelCepstra:
    values: np.ndarray  # (frames, order + 1); column 0 is c0
    order: int

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", arr)
        if self.order < 1:
            raise ValidationError(f"cepstral order must be >= 1, got {self.order}")
        if arr.ndim != 2 or arr.shape[1] != self.order + 1:
            raise ValidationError(
                f"values must be (frames x {self.order + 1}), got {arr.shape}"
            )
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValidationError("cepstra must be finite")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def mel_cepstra(mel: FrameSequence, order: int = 13) -> MelCepstra:
    """Per-frame DCT-II of the log-mel vector, coefficients 0..order.

    c_k = sum_n x_n * cos(pi * k * (2n + 1) / (2N)), the plain unnormalized
    transform.
    """
    n = mel.num_channels
    if order >= n:
        raise ValidationError(f"order must be < {n}, got {order}")
    k = np.arange(order + 1)[:, None]
    idx = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * idx + 1) / (2 * n))
    return MelCepstra(mel.values.astype(np.float64) @ basis.T, order)


@dataclass(frozen=True)
class DtwAlignment:
    path: tuple[tuple[int, int], ...]
    cost: float


def _frame_distances(a: MelCepstra, b: MelCepstra) -> np.ndarray:
    """Pairwise Euclidean distances over coefficients 1..order (c0 excluded)."""
    xa = a.values[:, 1:]
    xb = b.values[:, 1:]
    diff = xa[:, None, :] - xb[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


def dtw_align(a: MelCepstra, b: MelCepstra) -> DtwAlignment:
    """Minimum-cost monotone alignment anchored at both endpoints."""
    if a.num_frames == 0 or b.num_frames == 0:
        raise ValidationError("cannot align empty cepstra")
    if a.order != b.order:
        raise ValidationError(f"cepstral orders differ: {a.order} vs {b.order}")
    dist = _frame_distances(a, b)
    ta, tb = dist.shape
    acc = np.full((ta, tb), np.inf)
    acc[0, 0] = dist[0, 0]
    for i in range(ta):
        for j in range(tb):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            if i > 0 and j > 0:
                best = min(best, acc[i - 1, j - 1])
            acc[i, j] = dist[i, j] + best
    path = [(ta - 1, tb - 1)]
    i, j = ta - 1, tb - 1
    while (i, j) != (0, 0):
        candidates = []
        if i > 0 and j > 0:
            candidates.append((acc[i - 1, j - 1], (i - 1, j - 1)))
        if i > 0:
            candidates.append((acc[i - 1, j], (i - 1, j)))
        if j > 0:
            candidates.append((acc[i, j - 1], (i, j - 1)))
        _, (i, j) = min(candidates, key=lambda t: t[0])
        path.append((i, j))
    path.reverse()
    return DtwAlignment(tuple(path), float(acc[ta - 1, tb - 1]))


@dataclass(frozen=True)
class MCDResult:
    mcd_db: float
    aligned_frames: int
    path_length: int

    def __post_init__(self):
        if self.mcd_db < 0:
            raise ValidationError(f"mcd must be non-negative, got {self.mcd_db}")


def mcd(converted: FrameSequence, reference: FrameSequence, order: int = 13) -> MCDResult:
    """Mean over DTW-aligned frame pairs of (10/ln 10)*sqrt(2 * sum_d diff_d^2)."""
    ca = mel_cepstra(converted, order)
    cb = mel_cepstra(reference, order)
    alignment = dtw_align(ca, cb)
    diffs = np.array(
        [
            np.linalg.norm(ca.values[i, 1:] - cb.values[j, 1:])
            for i, j in alignment.path
        ]
    )
    return MCDResult(
        mcd_db=float(MCD_SCALE * diffs.mean()),
        aligned_frames=len(alignment.path),
        path_length=len(alignment.path),
    )


def mcd_from_cepstra(a: MelCepstra, b: MelCepstra) -> MCDResult:
    """MCD over precomputed cepstra (used when bypassing the mel frontend)."""
    alignment = dtw_align(a, b)
    diffs = np.array(
        [np.linalg.norm(a.values[i, 1:] - b.values[j, 1:]) for i, j in alignment.path]
    )
    return MCDResult(float(MCD_SCALE * diffs.mean()), len(alignment.path), len(alignment.path))


# ---------------------------------------------------------------------------
# Word error rate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WERResult:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int
    wer_percent: float

    def __post_init__(self):
        if min(self.substitutions, self.deletions, self.insertions) < 0:
            raise ValidationError("error counts must be non-negative")
        if self.ref_words < 1:
            raise ValidationError("ref_words must be >= 1")
        expected = 100.0 * (self.substitutions + self.deletions + self.insertions) / self.ref_words
        if self.wer_percent != expected:
            raise ValidationError("wer_percent must equal 100*(S+D+I)/ref_words")

    @property
    def edits(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def wer(ref_text: str, hyp_text: str) -> WERResult:
    """Word-level Levenshtein alignment with unit costs over normalized text."""
    ref = normalize_transcript(ref_text).split()
    hyp = normalize_transcript(hyp_text).split()
    if not ref:
        raise ValidationError("reference is empty after normalization")
    m, n = len(ref), len(hyp)
    dist = np.zeros((m + 1, n + 1), dtype=np.int64)
    dist[:, 0] = np.arange(m + 1)
    dist[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = dist[i - 1, j] + 1
            ins = dist[i, j - 1] + 1
            dist[i, j] = min(sub, dele, ins)
    # Backtrace to split the distance into S/D/I counts.
    s = d = ins_count = 0
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] and ref[i - 1] == hyp[j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + 1:
            s += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins_count += 1
            j -= 1
    return WERResult(s, d, ins_count, m, 100.0 * (s + d + ins_count) / m)


def transcribe(wave: Waveform, provider, record=None) -> str:
    """Hypothesis text from the transcriber provider; scoring normalizes later."""
    try:
        return provider.transcribe(wave, record=record)
    except (ValidationError, ProviderError, ModelStateError):
        raise
    except Exception as exc:
        name = getattr(provider, "name", type(provider).__name__)
        raise ProviderError(f"transcriber provider {name!r} failed: {exc}") from exc


# ---------------------------------------------------------------------------
# Pearson correlation
# ---------------------------------------------------------------------------


def ppmc(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson product-moment correlation of two equal-length sequences."""
    xa = np.asarray(x, dtype=np.float64).reshape(-1)
    ya = np.asarray(y, dtype=np.float64).reshape(-1)
    if xa.size != ya.size:
        raise ValidationError(f"length mismatch: {xa.size} vs {ya.size}")
    if xa.size < 2:
        raise ValidationError("correlation needs at least 2 points")
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    denom = math.sqrt(float(xc @ xc)) * math.sqrt(float(yc @ yc))
    if denom == 0.0:
        raise ValidationError("correlation undefined for constant sequences")
    return float(xc @ yc) / denom


# ---------------------------------------------------------------------------
# Speaker-embedding centroid analysis
# ---------------------------------------------------------------------------

CONDITIONS = ("original", "converted")


@dataclass(frozen=True)
class CentroidReport:
    per_speaker: dict[str, float]
    mean: float
    std: float  # population std over speakers


def centroid_report(
    embeddings: Mapping[tuple[str, str], Sequence[SpeakerEmbedding]],
    export_dir: str | Path | None = None,
) -> CentroidReport:
    """Per-speaker distance between original and converted cluster centroids.

    Optionally exports the raw embeddings (one cache file per speaker and
    condition) for external 2-D visualization.
    """
    speakers = sorted({speaker for speaker, _ in embeddings})
    if not speakers:
        raise ValidationError("no embeddings supplied")
    if export_dir is not None:
        export_dir = Path(export_dir)
        export_dir.mkdir(parents=True, exist_ok=True)
    distances: dict[str, float] = {}
    for speaker in speakers:
        centroids = {}
        for condition in CONDITIONS:
            cell = embeddings.get((speaker, condition))
            if not cell:
                raise ValidationError(f"missing {condition!r} embeddings for speaker {speaker!r}")
            matrix = np.stack([np.asarray(e.vector, dtype=np.float64) for e in cell])
            centroids[condition] = matrix.mean(axis=0)
            if export_dir is not None:
                write_feature_cache(
                    FrameSequence(matrix.astype(np.float32), 1.0),
                    export_dir / f"{speaker}_{condition}.facf",
                    provider_id=f"{speaker}/{condition}",
                )
        distances[speaker] = float(
            np.linalg.norm(centroids["original"] - centroids["converted"])
        )
    values = np.array(list(distances.values()), dtype=np.float64)
    return CentroidReport(distances, float(values.mean()), float(values.std()))


# ---------------------------------------------------------------------------
# Report output: line-delimited records plus a per-speaker summary table
# ---------------------------------------------------------------------------


def write_metric_records(
    path: str | Path, records: Sequence[tuple[str, str, float]]
) -> Path:
    """One JSON line per (utterance_id, metric, value)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for utterance_id, metric, value in records:
            f.write(json.dumps({"utterance_id": utterance_id, "metric": metric, "value": value}) + "\n")
    return path


def format_summary_table(
    metric: str, per_speaker: Mapping[str, float], average: float | None = None, std: float | None = None
) -> str:
    """Per-speaker rows plus an Average row, fixed-width text."""
    width = max([len("speaker")] + [len(s) for s in per_speaker])
    lines = [f"{'speaker'.ljust(width)}  {metric}"]
    for speaker in sorted(per_speaker):
        lines.append(f"{speaker.ljust(width)}  {per_speaker[speaker]:.4f}")
    if average is None:
        average = float(np.mean(list(per_speaker.values()))) if per_speaker else 0.0
    avg_text = f"{average:.4f}"
    if std is not None:
        avg_text += f" +/- {std:.4f}"
    lines.append(f"{'Average'.ljust(width)}  {avg_text}")
    return "\n".join(lines) + "\n"
