"""Multi-task acoustic model: shared BiLSTM trunk, posteriorgram and TV heads.

The trunk runs two BiLSTM layers over 50 Hz upstream embeddings, up-samples
2x to 100 Hz by frame repetition, applies dropout, and ends in a linear layer
whose activations are the bottleneck features (BNFs). Two linear heads sit on
the BNFs: a softmax head over senone classes and a tanh head over the six
tract variables. Training minimizes

    combined = alpha * tv_loss + (1 - alpha) * ppg_loss

where tv_loss is mean absolute error and ppg_loss is cross entropy (natural
log) against soft or one-hot senone targets. alpha = 0 is the PPG-only
variant, alpha = 1 the TV-only variant, and alpha = 0.4 the combined variant.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ModelStateError, ValidationError
from .features import (
    PPG_DIM,
    TV_DIM,
    UPSTREAM_DIM,
    UPSTREAM_RATE_HZ,
    FrameSequence,
    check_distribution_rows,
)

FRAME_MISMATCH_TOLERANCE = 2

VARIANT_ALPHAS = {"ppg_only": 0.0, "combined": 0.4, "tv_only": 1.0}


@dataclass(frozen=True)
class AcousticModelConfig:
    input_dim: int = UPSTREAM_DIM
    bilstm_hidden: int = 256  # per direction
    num_bilstm_layers: int = 2
    upsample_factor: int = 2
    dropout_rate: float = 0.2
    bnf_dim: int = 256
    ppg_dim: int = PPG_DIM
    tv_dim: int = TV_DIM

    def __post_init__(self):
        for name in ("input_dim", "bilstm_hidden", "num_bilstm_layers", "bnf_dim", "ppg_dim", "tv_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.upsample_factor < 1:
            raise ValidationError(f"upsample_factor must be >= 1, got {self.upsample_factor}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class LossWeights:
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in [0, 1], got {self.alpha}")


def make_variant(
    name: str, config: AcousticModelConfig | None = None
) -> tuple[AcousticModelConfig, LossWeights]:
    """Named variants share one architecture and differ only in alpha."""
    if name not in VARIANT_ALPHAS:
        raise ValidationError(f"unknown variant {name!r}; expected one of {sorted(VARIANT_ALPHAS)}")
    return config or AcousticModelConfig(), LossWeights(VARIANT_ALPHAS[name])


@dataclass(frozen=True)
class BottleneckFeatures(FrameSequence):
    pass


@dataclass(frozen=True)
class MultiTaskOutput:
    ppg_logits: FrameSequence
    tv_estimates: FrameSequence
    bnf: BottleneckFeatures

    def __post_init__(self):
        frames = {
            self.ppg_logits.num_frames,
            self.tv_estimates.num_frames,
            self.bnf.num_frames,
        }
        if len(frames) != 1:
            raise ValidationError(f"head frame counts disagree: {sorted(frames)}")
        if self.tv_estimates.num_frames and np.max(np.abs(self.tv_estimates.values)) > 1.0:
            raise ValidationError("tv estimates must lie in the tanh range")

    @property
    def num_frames(self) -> int:
        return self.ppg_logits.num_frames


class MultiTaskAcousticModel(nn.Module):
    def __init__(self, config: AcousticModelConfig):
        super().__init__()
        self.config = config
        self.bilstm = nn.LSTM(
            config.input_dim,
            config.bilstm_hidden,
            num_layers=config.num_bilstm_layers,
            bidirectional=True,
            batch_first=True,
        )
        self.dropout = nn.Dropout(config.dropout_rate)
        self.trunk_fc = nn.Linear(2 * config.bilstm_hidden, config.bnf_dim)
        self.ppg_head = nn.Linear(config.bnf_dim, config.ppg_dim)
        self.tv_head = nn.Linear(config.bnf_dim, config.tv_dim)

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        """Shared layers; the output of the final linear layer is the BNF."""
        if x.shape[1] == 0:
            return x.new_zeros((x.shape[0], 0, self.config.bnf_dim))
        h, _ = self.bilstm(x)
        h = torch.repeat_interleave(h, self.config.upsample_factor, dim=1)
        h = self.dropout(h)
        return self.trunk_fc(h)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """x: (batch, frames, input_dim) -> (ppg_logits, tv_estimates, bnf)."""
        if x.ndim != 3 or x.shape[2] != self.config.input_dim:
            raise ValidationError(
                f"expected input (batch, frames, {self.config.input_dim}), got {tuple(x.shape)}"
            )
        bnf = self.trunk(x)
        return self.ppg_head(bnf), torch.tanh(self.tv_head(bnf)), bnf


def build_model(config: AcousticModelConfig, seed: int = 0) -> MultiTaskAcousticModel:
    """Seeded construction so two builds with the same seed are bit-identical."""
    torch.manual_seed(seed)
    return MultiTaskAcousticModel(config)


def _as_input_array(embeddings, input_dim: int) -> tuple[np.ndarray, float]:
    if isinstance(embeddings, FrameSequence):
        values, rate = embeddings.values, embeddings.frame_rate
    else:
        values, rate = np.asarray(embeddings), UPSTREAM_RATE_HZ
    if values.ndim != 2 or values.shape[1] != input_dim:
        raise ValidationError(
            f"expected (frames x {input_dim}) input, got shape {values.shape}"
        )
    return values, rate


def run_forward(model: MultiTaskAcousticModel | None, embeddings) -> MultiTaskOutput:
    """Evaluation-mode forward over one utterance; deterministic (dropout off)."""
    if model is None:
        raise ModelStateError("acoustic model is not initialized")
    values, in_rate = _as_input_array(embeddings, model.config.input_dim)
    out_rate = in_rate * model.config.upsample_factor
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            dtype = next(model.parameters()).dtype
            x = torch.from_numpy(np.ascontiguousarray(values)).to(dtype).unsqueeze(0)
            ppg_logits, tv_est, bnf = model(x)
    finally:
        model.train(was_training)
    return MultiTaskOutput(
        ppg_logits=FrameSequence(ppg_logits.squeeze(0).numpy(), out_rate),
        tv_estimates=FrameSequence(tv_est.squeeze(0).numpy(), out_rate),
        bnf=BottleneckFeatures(bnf.squeeze(0).numpy(), out_rate),
    )


def extract_bnf(embeddings, model: MultiTaskAcousticModel | None) -> BottleneckFeatures:
    """Tap the trunk's final-layer activations at 100 Hz."""
    return run_forward(model, embeddings).bnf


def upsample_frames(seq: FrameSequence, factor: int) -> FrameSequence:
    """Nearest-neighbor frame repetition; multiplies frame count and rate."""
    if factor < 1:
        raise ValidationError(f"upsample factor must be >= 1, got {factor}")
    values = np.repeat(seq.values, factor, axis=0)
    return FrameSequence(values, seq.frame_rate * factor)


# ---------------------------------------------------------------------------
# Combined loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CombinedLossReport:
    alpha: float
    tv_loss: float
    ppg_loss: float
    combined: float

    def __post_init__(self):
        expected = self.alpha * self.tv_loss + (1.0 - self.alpha) * self.ppg_loss
        if self.combined != expected:
            raise ValidationError("combined must equal alpha*tv_loss + (1-alpha)*ppg_loss")


def multitask_loss_terms(
    ppg_logits: torch.Tensor,
    tv_estimates: torch.Tensor,
    ppg_target: torch.Tensor,
    tv_target: torch.Tensor,
    alpha: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable (combined, tv, ppg) losses over (..., frames, channels) tensors.

    tv loss is the mean absolute error over frames and channels; ppg loss is
    the per-frame cross entropy H(target, softmax(logits)) in nats, averaged
    over frames.
    """
    tv_loss = (tv_estimates - tv_target).abs().mean()
    log_q = torch.log_softmax(ppg_logits, dim=-1)
    ppg_loss = -(ppg_target * log_q).sum(dim=-1).mean()
    combined = alpha * tv_loss + (1.0 - alpha) * ppg_loss
    return combined, tv_loss, ppg_loss


def _truncate_to_common(*lengths: int) -> int:
    m, biggest = min(lengths), max(lengths)
    if biggest - m > FRAME_MISMATCH_TOLERANCE:
        raise ValidationError(
            f"frame counts {lengths} differ by more than {FRAME_MISMATCH_TOLERANCE}"
        )
    return m


def combined_loss(
    output: MultiTaskOutput,
    ppg_target: FrameSequence,
    tv_target: FrameSequence,
    weights: LossWeights,
) -> CombinedLossReport:
    """Float64 loss report for one utterance, per the combined-loss definition."""
    m = _truncate_to_common(output.num_frames, ppg_target.num_frames, tv_target.num_frames)
    if m == 0:
        raise ValidationError("cannot compute a loss over zero frames")
    ppg_rows = ppg_target.values[:m].astype(np.float64)
    check_distribution_rows(ppg_rows)
    tv_rows = tv_target.values[:m].astype(np.float64)
    if np.max(np.abs(tv_rows)) > 1.0:
        raise ValidationError("tv targets must be normalized to the tanh range")
    combined, tv_loss, ppg_loss = multitask_loss_terms(
        torch.from_numpy(output.ppg_logits.values[:m].astype(np.float64)),
        torch.from_numpy(output.tv_estimates.values[:m].astype(np.float64)),
        torch.from_numpy(ppg_rows),
        torch.from_numpy(tv_rows),
        weights.alpha,
    )
    tv_f, ppg_f = float(tv_loss), float(ppg_loss)
    return CombinedLossReport(
        alpha=weights.alpha,
        tv_loss=tv_f,
        ppg_loss=ppg_f,
        combined=weights.alpha * tv_f + (1.0 - weights.alpha) * ppg_f,
    )


# ---------------------------------------------------------------------------
# Checkpoints: a config.json (portable contract) plus a torch weight blob.
# ---------------------------------------------------------------------------


def save_checkpoint(
    directory: str | Path,
    model: MultiTaskAcousticModel,
    weights: LossWeights,
    metadata: dict | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "model": asdict(model.config),
        "alpha": weights.alpha,
        "metadata": metadata or {},
    }
    (directory / "config.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    torch.save(model.state_dict(), directory / "weights.pt")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[MultiTaskAcousticModel, LossWeights, dict]:
    directory = Path(directory)
    config_path = directory / "config.json"
    weights_path = directory / "weights.pt"
    if not config_path.exists() or not weights_path.exists():
        raise ModelStateError(f"no checkpoint at {directory}")
    payload = json.loads(config_path.read_text(encoding="utf-8"))
    config = AcousticModelConfig(**payload["model"])
    model = MultiTaskAcousticModel(config)
    model.load_state_dict(torch.load(weights_path, weights_only=True))
    model.eval()
    return model, LossWeights(payload["alpha"]), payload.get("metadata", {})
