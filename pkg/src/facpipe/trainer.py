"""Training loop for the multi-task acoustic model.

ADAM with an exponential learning-rate decay applied per epoch, early
stopping on the dev-set combined loss with best-epoch weight restoration,
and the two hyperparameter grid searches (alpha, and lr/batch). Training is
deterministic given a seed: initialization, data order, and dropout are all
seeded.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .acoustic_model import (
    LossWeights,
    MultiTaskAcousticModel,
    multitask_loss_terms,
)
from .corpus import DataSplits, UtteranceRecord
from .errors import DivergenceError, ValidationError


@dataclass(frozen=True)
class OptimizerSpec:
    algorithm: str = "adam"
    learning_rate: float = 1e-4
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.algorithm.lower() != "adam":
            raise ValidationError(f"unsupported optimizer {self.algorithm!r}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "exponential"
    decay_factor: float = 0.5

    def __post_init__(self):
        if self.kind != "exponential":
            raise ValidationError(f"unsupported schedule {self.kind!r}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValidationError(f"decay_factor must be in (0, 1], got {self.decay_factor}")


def lr_at_epoch(spec: OptimizerSpec, schedule: ScheduleSpec, epoch: int) -> float:
    """learning_rate * decay_factor ** epoch."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    return spec.learning_rate * schedule.decay_factor**epoch


@dataclass(frozen=True)
class EarlyStopState:
    best_val_loss: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    patience: int = 6

    @property
    def next_epoch(self) -> int:
        return self.best_epoch + self.epochs_since_improvement + 1


def early_stop_update(state: EarlyStopState, val_loss: float) -> tuple[EarlyStopState, str]:
    """Fold one validation loss into the state; returns (state, 'continue'|'stop').

    Stops exactly when the non-improvement counter exceeds the patience.
    """
    if not math.isfinite(val_loss):
        raise DivergenceError(f"validation loss is not finite: {val_loss}")
    epoch = state.next_epoch
    if val_loss < state.best_val_loss:
        new = replace(state, best_val_loss=val_loss, best_epoch=epoch, epochs_since_improvement=0)
        return new, "continue"
    new = replace(state, epochs_since_improvement=state.epochs_since_improvement + 1)
    return new, ("stop" if new.epochs_since_improvement > new.patience else "continue")


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingExample:
    """One input segment with its two targets (targets at the output rate)."""

    inputs: np.ndarray  # (frames, input_dim)
    ppg_target: np.ndarray  # (~upsample*frames, ppg_dim), rows are distributions
    tv_target: np.ndarray  # (~upsample*frames, tv_dim), in the tanh range


class FeatureSource(Protocol):
    def load(self, record: UtteranceRecord) -> list[TrainingExample]: ...


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    tv_loss: float
    ppg_loss: float
    lr: float


def save_history(path: str | Path, history: Sequence[EpochRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for rec in history:
            f.write(json.dumps(vars(rec)) + "\n")


@dataclass
class FitResult:
    model: MultiTaskAcousticModel
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool


def _example_loss(model, example: TrainingExample, alpha: float, dtype):
    t_out = min(example.ppg_target.shape[0], example.tv_target.shape[0])
    x = torch.from_numpy(np.ascontiguousarray(example.inputs)).to(dtype).unsqueeze(0)
    ppg_logits, tv_est, _ = model(x)
    m = min(t_out, ppg_logits.shape[1])
    return multitask_loss_terms(
        ppg_logits[:, :m],
        tv_est[:, :m],
        torch.from_numpy(np.ascontiguousarray(example.ppg_target[:m])).to(dtype).unsqueeze(0),
        torch.from_numpy(np.ascontiguousarray(example.tv_target[:m])).to(dtype).unsqueeze(0),
        alpha,
    )


def _batch_loss(model, batch: list[TrainingExample], alpha: float, dtype):
    """Mean of per-example losses; stacks the batch when shapes agree."""
    shapes = {(ex.inputs.shape, ex.ppg_target.shape, ex.tv_target.shape) for ex in batch}
    if len(shapes) == 1 and len(batch) > 1:
        t_out = min(batch[0].ppg_target.shape[0], batch[0].tv_target.shape[0])
        x = torch.from_numpy(np.stack([ex.inputs for ex in batch])).to(dtype)
        ppg_logits, tv_est, _ = model(x)
        m = min(t_out, ppg_logits.shape[1])
        return multitask_loss_terms(
            ppg_logits[:, :m],
            tv_est[:, :m],
            torch.from_numpy(np.stack([ex.ppg_target[:m] for ex in batch])).to(dtype),
            torch.from_numpy(np.stack([ex.tv_target[:m] for ex in batch])).to(dtype),
            alpha,
        )
    total = tv_total = ppg_total = 0.0
    for ex in batch:
        combined, tv, ppg = _example_loss(model, ex, alpha, dtype)
        total = total + combined
        tv_total = tv_total + tv
        ppg_total = ppg_total + ppg
    n = len(batch)
    return total / n, tv_total / n, ppg_total / n


def evaluate_examples(
    model: MultiTaskAcousticModel, examples: Sequence[TrainingExample], alpha: float
) -> tuple[float, float, float]:
    """(combined, tv, ppg) mean losses over a split, evaluation mode."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    try:
        with torch.no_grad():
            sums = np.zeros(3)
            for ex in examples:
                combined, tv, ppg = _example_loss(model, ex, alpha, dtype)
                sums += [float(combined), float(tv), float(ppg)]
    finally:
        model.train(was_training)
    sums /= max(len(examples), 1)
    return float(sums[0]), float(sums[1]), float(sums[2])


def _load_examples(records: Sequence[UtteranceRecord], source: FeatureSource):
    out: list[TrainingExample] = []
    for record in records:
        out.extend(source.load(record))
    return out


def fit(
    model: MultiTaskAcousticModel,
    splits: DataSplits,
    feature_source: FeatureSource,
    weights: LossWeights,
    opt: OptimizerSpec = OptimizerSpec(),
    schedule: ScheduleSpec = ScheduleSpec(),
    patience: int = 6,
    max_epochs: int = 50,
    seed: int = 0,
    validation_fn: Callable[[MultiTaskAcousticModel, int], float] | None = None,
) -> FitResult:
    """Train until max_epochs or early stop; restores the best-epoch weights.

    ``validation_fn`` overrides the dev-set loss computation (scripted
    validation for tests, external metrics); by default validation is the
    combined loss over the full dev set once per epoch.
    """
    if not splits.train or not splits.dev:
        raise ValidationError("fit requires non-empty train and dev splits")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    train_examples = _load_examples(splits.train, feature_source)
    dev_examples = _load_examples(splits.dev, feature_source)
    if not train_examples or not dev_examples:
        raise ValidationError("feature source yielded no training or dev examples")

    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=opt.learning_rate,
        betas=(opt.beta1, opt.beta2),
        eps=opt.eps,
    )
    stop_state = EarlyStopState(patience=patience)
    best_state = copy.deepcopy(model.state_dict())
    history: list[EpochRecord] = []

    for epoch in range(max_epochs):
        lr = lr_at_epoch(opt, schedule, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        model.train()
        order = rng.permutation(len(train_examples))
        epoch_loss = 0.0
        seen = 0
        for start in range(0, len(order), opt.batch_size):
            batch = [train_examples[i] for i in order[start : start + opt.batch_size]]
            optimizer.zero_grad()
            combined, _, _ = _batch_loss(model, batch, weights.alpha, dtype)
            combined.backward()
            optimizer.step()
            epoch_loss += float(combined.detach()) * len(batch)
            seen += len(batch)
        train_loss = epoch_loss / seen

        if validation_fn is not None:
            val_loss = float(validation_fn(model, epoch))
            val_tv = val_ppg = math.nan
        else:
            val_loss, val_tv, val_ppg = evaluate_examples(model, dev_examples, weights.alpha)
        if not math.isfinite(train_loss) or not math.isfinite(val_loss):
            raise DivergenceError(
                f"non-finite loss at epoch {epoch} (train {train_loss}, val {val_loss})",
                history=history,
            )

        history.append(EpochRecord(epoch, train_loss, val_loss, val_tv, val_ppg, lr))
        previous_best = stop_state.best_val_loss
        stop_state, decision = early_stop_update(stop_state, val_loss)
        if stop_state.best_val_loss < previous_best:
            best_state = copy.deepcopy(model.state_dict())
        if decision == "stop":
            model.load_state_dict(best_state)
            return FitResult(model, history, stop_state.best_epoch, stop_state.best_val_loss, True)

    model.load_state_dict(best_state)
    return FitResult(model, history, stop_state.best_epoch, stop_state.best_val_loss, False)


# ---------------------------------------------------------------------------
# Hyperparameter grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSearchSpace:
    alpha_grid: tuple[float, ...] = (0.0, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0)
    lr_grid: tuple[float, ...] = (1e-2, 1e-3, 1e-4, 3e-4)
    batch_grid: tuple[int, ...] = (4, 8, 12, 16)

    def __post_init__(self):
        if not self.alpha_grid or not self.lr_grid or not self.batch_grid:
            raise ValidationError("grid search space must have non-empty grids")


@dataclass(frozen=True)
class AlphaCandidate:
    alpha: float
    tv_ppmc: float  # dev Pearson correlation, averaged over the 6 channels
    ppg_rmse: float  # dev RMSE between estimated and target posteriors


@dataclass(frozen=True)
class GridSearchReport:
    candidates: tuple[AlphaCandidate, ...]
    selected_alpha: float


PREFERRED_ALPHA_TIEBREAK = 0.4


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def select_alpha(candidates: Sequence[AlphaCandidate]) -> float:
    """Maximize normalized(tv_ppmc) - normalized(ppg_rmse) over the grid.

    Both metrics are min-max normalized across candidates; score ties break
    toward 0.4, then toward the smaller alpha.
    """
    if not candidates:
        raise ValidationError("cannot select alpha from an empty candidate list")
    ppmc = _minmax(np.array([c.tv_ppmc for c in candidates], dtype=np.float64))
    rmse = _minmax(np.array([c.ppg_rmse for c in candidates], dtype=np.float64))
    scores = ppmc - rmse
    best = scores.max()
    tied = [c.alpha for c, s in zip(candidates, scores) if abs(s - best) <= 1e-12]
    tied.sort(key=lambda a: (abs(a - PREFERRED_ALPHA_TIEBREAK), a))
    return tied[0]


def evaluate_alpha_metrics(
    model: MultiTaskAcousticModel, dev_examples: Sequence[TrainingExample]
) -> tuple[float, float]:
    """Dev-set (tv_ppmc averaged over channels, ppg posterior rmse)."""
    from .evaluation import ppmc

    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    est_tv, tgt_tv, sq_err, n_prob = [], [], 0.0, 0
    try:
        with torch.no_grad():
            for ex in dev_examples:
                x = torch.from_numpy(np.ascontiguousarray(ex.inputs)).to(dtype).unsqueeze(0)
                ppg_logits, tv_est, _ = model(x)
                m = min(ex.ppg_target.shape[0], ex.tv_target.shape[0], ppg_logits.shape[1])
                probs = torch.softmax(ppg_logits[0, :m], dim=-1).numpy().astype(np.float64)
                sq_err += float(((probs - ex.ppg_target[:m]) ** 2).sum())
                n_prob += int(np.prod(probs.shape))
                est_tv.append(tv_est[0, :m].numpy().astype(np.float64))
                tgt_tv.append(ex.tv_target[:m].astype(np.float64))
    finally:
        model.train(was_training)
    est = np.concatenate(est_tv, axis=0)
    tgt = np.concatenate(tgt_tv, axis=0)
    correlations = []
    for channel in range(est.shape[1]):
        try:
            correlations.append(ppmc(est[:, channel], tgt[:, channel]))
        except ValidationError:
            correlations.append(0.0)  # constant channel: no linear relation to reward
    return float(np.mean(correlations)), float(np.sqrt(sq_err / max(n_prob, 1)))


def grid_search_alpha(
    space: GridSearchSpace,
    splits: DataSplits,
    feature_source: FeatureSource,
    build_model_fn: Callable[[], MultiTaskAcousticModel],
    opt: OptimizerSpec = OptimizerSpec(),
    schedule: ScheduleSpec = ScheduleSpec(),
    patience: int = 6,
    max_epochs: int = 10,
    seed: int = 0,
) -> GridSearchReport:
    """Train one model per alpha on fixed optimizer settings and rank them."""
    dev_examples = _load_examples(splits.dev, feature_source)
    candidates = []
    for alpha in space.alpha_grid:
        model = build_model_fn()
        fit(
            model,
            splits,
            feature_source,
            LossWeights(alpha),
            opt=opt,
            schedule=schedule,
            patience=patience,
            max_epochs=max_epochs,
            seed=seed,
        )
        tv_ppmc, ppg_rmse = evaluate_alpha_metrics(model, dev_examples)
        candidates.append(AlphaCandidate(alpha, tv_ppmc, ppg_rmse))
    return GridSearchReport(tuple(candidates), select_alpha(candidates))


@dataclass(frozen=True)
class OptimizerCandidate:
    learning_rate: float
    batch_size: int
    best_val_loss: float


@dataclass(frozen=True)
class OptimizerSearchReport:
    candidates: tuple[OptimizerCandidate, ...]
    selected: OptimizerSpec


def grid_search_optimizer(
    space: GridSearchSpace,
    splits: DataSplits,
    feature_source: FeatureSource,
    build_model_fn: Callable[[], MultiTaskAcousticModel],
    weights: LossWeights,
    schedule: ScheduleSpec = ScheduleSpec(),
    patience: int = 6,
    max_epochs: int = 10,
    seed: int = 0,
) -> OptimizerSearchReport:
    """Every (lr, batch) combination, ranked by best validation loss."""
    candidates = []
    for lr in space.lr_grid:
        for batch in space.batch_grid:
            model = build_model_fn()
            result = fit(
                model,
                splits,
                feature_source,
                weights,
                opt=OptimizerSpec(learning_rate=lr, batch_size=batch),
                schedule=schedule,
                patience=patience,
                max_epochs=max_epochs,
                seed=seed,
            )
            candidates.append(OptimizerCandidate(lr, batch, result.best_val_loss))
    best = min(candidates, key=lambda c: (c.best_val_loss, c.learning_rate, c.batch_size))
    return OptimizerSearchReport(
        tuple(candidates),
        OptimizerSpec(learning_rate=best.learning_rate, batch_size=best.batch_size),
    )


# ---------------------------------------------------------------------------
# Assembling training examples from audio through the feature providers
# ---------------------------------------------------------------------------


class ProviderFeatureSource:
    """Turns manifest records into training examples via the three providers.

    Audio is cut into fixed-length segments; each segment yields upstream
    embeddings (inputs) plus posteriorgram and normalized tract-variable
    targets truncated to a common length. Set ``cache_dir`` (the CLI wires
    the FAC_CACHE_DIR environment variable here) to reuse extracted features
    across runs.
    """

    def __init__(
        self,
        audio_source,
        upstream_provider,
        ppg_provider,
        tv_provider,
        tv_stats=None,
        segment_seconds: float = 2.0,
        cache_dir: str | Path | None = None,
    ):
        self.audio_source = audio_source
        self.upstream_provider = upstream_provider
        self.ppg_provider = ppg_provider
        self.tv_provider = tv_provider
        self.tv_stats = tv_stats
        self.segment_seconds = segment_seconds
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _cached(self, key: str, rate: float, compute):
        from .features import FrameSequence, read_feature_cache, write_feature_cache

        if self.cache_dir is None:
            return compute()
        path = self.cache_dir / f"{key}.facf"
        if path.exists():
            seq, _ = read_feature_cache(path)
            return seq.values
        values = compute()
        write_feature_cache(FrameSequence(values.astype(np.float32), rate), path)
        return values

    def _segments(self, record: UtteranceRecord):
        from .corpus import segment_waveform

        wave = self.audio_source.load(record)
        return segment_waveform(wave, self.segment_seconds)

    def raw_tv_tracks(self, record: UtteranceRecord):
        """Unnormalized tract-variable tracks, used to fit normalization stats."""
        from .features import get_tv_targets

        return [get_tv_targets(seg, self.tv_provider) for seg in self._segments(record)]

    def load(self, record: UtteranceRecord) -> list[TrainingExample]:
        from .features import (
            TractVariableTrack,
            get_ppg_targets,
            get_tv_targets,
            get_upstream_embeddings,
            normalize_tv_channels,
        )

        if self.tv_stats is None:
            raise ValidationError(
                "tract-variable normalization statistics not set; fit them on the "
                "training split first"
            )
        examples = []
        for i, seg in enumerate(self._segments(record)):
            key = f"{record.utterance_id}.seg{i}"
            inputs = self._cached(
                f"{key}.upstream", 50.0,
                lambda: get_upstream_embeddings(seg, self.upstream_provider).values,
            )
            ppg = self._cached(
                f"{key}.ppg", 100.0,
                lambda: get_ppg_targets(seg, self.ppg_provider).values,
            )
            tv_raw = self._cached(
                f"{key}.tv", 100.0,
                lambda: get_tv_targets(seg, self.tv_provider).values,
            )
            tv = normalize_tv_channels(
                TractVariableTrack(tv_raw, 100.0), self.tv_stats
            ).values.astype(np.float32)
            m = min(ppg.shape[0], tv.shape[0])
            examples.append(TrainingExample(inputs, ppg[:m], tv[:m]))
        return examples


def fit_tv_stats_for_split(
    source: ProviderFeatureSource, records: Sequence[UtteranceRecord], target_range=(-0.95, 0.95)
):
    """Fit tract-variable normalization on the training split only."""
    from .features import fit_tv_normalization

    tracks = []
    for record in records:
        tracks.extend(source.raw_tv_tracks(record))
    stats = fit_tv_normalization(tracks, target_range)
    source.tv_stats = stats
    return stats
