"""Accent conversion wiring: training-stage pairing rules and the conversion stage.

Synthesizer training is auto-encoder style. For a step on utterances (A, C)
from the same speaker: BNFs and the prosody embedding both come from A, the
speaker embedding comes from a *different* utterance C, and the target is
A's own mel spectrogram. This forces the prosody encoder and speaker encoder
onto distinct factors. The acoustic model and speaker encoder stay frozen.

At conversion time the branches swap sources: BNFs come from the native
reference utterance (matched text), while prosody and speaker embeddings
come from the non-native utterance being converted. Every step and every
conversion carries provenance metadata recording which utterance fed which
branch, so the wiring is auditable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .acoustic_model import BottleneckFeatures, MultiTaskAcousticModel, extract_bnf
from .audio import Waveform
from .corpus import UtteranceRecord, normalize_transcript
from .errors import ModelStateError, ProviderError, ValidationError, WiringError
from .features import (
    DEFAULT_MEL_CONFIG,
    MEL_DIM,
    MelConfig,
    MelSpectrogram,
    compute_mel,
    get_upstream_embeddings,
)
from .synthesizer import ProsodyEncoder, Seq2SeqSynthesizer


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray
    source_utterance_id: str = ""

    def __post_init__(self):
        vec = np.asarray(self.vector)
        if vec.dtype not in (np.float32, np.float64):
            vec = vec.astype(np.float32)
        vec = vec.reshape(-1)
        object.__setattr__(self, "vector", vec)
        if vec.size == 0 or not np.all(np.isfinite(vec)):
            raise ValidationError("speaker embedding must be a non-empty finite vector")

    @property
    def dim(self) -> int:
        return self.vector.size


@dataclass(frozen=True)
class ProsodyEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector)
        if vec.dtype not in (np.float32, np.float64):
            vec = vec.astype(np.float32)
        vec = vec.reshape(-1)
        object.__setattr__(self, "vector", vec)
        if vec.size == 0 or not np.all(np.isfinite(vec)):
            raise ValidationError("prosody embedding must be a non-empty finite vector")

    @property
    def dim(self) -> int:
        return self.vector.size


@dataclass(frozen=True)
class ConversionRequest:
    """A matched (non-native, native-reference) utterance pair."""

    l2_utterance: UtteranceRecord
    l1_reference: UtteranceRecord

    def __post_init__(self):
        l2 = normalize_transcript(self.l2_utterance.transcript)
        l1 = normalize_transcript(self.l1_reference.transcript)
        if l2 != l1:
            raise ValidationError(
                f"transcripts do not match: {self.l2_utterance.utterance_id!r} vs "
                f"{self.l1_reference.utterance_id!r}"
            )


@dataclass
class ConversionBundle:
    """Every model handle the pipeline needs, frozen or trainable as labeled."""

    acoustic_model: MultiTaskAcousticModel
    prosody_encoder: ProsodyEncoder
    synthesizer: Seq2SeqSynthesizer
    upstream_provider: object
    speaker_provider: object
    vocoder_provider: object
    mel_config: MelConfig = DEFAULT_MEL_CONFIG
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Embedding branches
# ---------------------------------------------------------------------------


def encode_prosody(mel: MelSpectrogram, encoder: ProsodyEncoder) -> ProsodyEmbedding:
    """Evaluation-mode prosody embedding of one mel spectrogram."""
    if mel.num_frames == 0:
        raise ValidationError("cannot encode prosody of an empty mel spectrogram")
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            dtype = next(encoder.parameters()).dtype
            vec = encoder(torch.from_numpy(mel.values).to(dtype).unsqueeze(0))
    finally:
        encoder.train(was_training)
    return ProsodyEmbedding(vec.squeeze(0).numpy())


def encode_speaker(utterance, provider, record: UtteranceRecord | None = None) -> SpeakerEmbedding:
    """Fixed-length voice-identity vector, tagged with its source utterance."""
    try:
        vector = provider.embed(utterance, record=record)
    except (ValidationError, ProviderError, ModelStateError):
        raise
    except Exception as exc:
        name = getattr(provider, "name", type(provider).__name__)
        raise ProviderError(f"speaker provider {name!r} failed: {exc}") from exc
    expected = getattr(provider, "dim", None)
    vector = np.asarray(vector)
    if expected is not None and vector.size != expected:
        raise ValidationError(
            f"speaker provider returned {vector.size} dims, expected {expected}"
        )
    return SpeakerEmbedding(vector, record.utterance_id if record else "")


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


@dataclass
class SynthesisResult:
    mel: MelSpectrogram
    stop_logits: np.ndarray
    truncated: bool
    stop_frame: int | None


def synthesize(
    synth: Seq2SeqSynthesizer,
    bnf: BottleneckFeatures,
    speaker: SpeakerEmbedding,
    prosody: ProsodyEmbedding,
    mode: str = "autoregressive",
    target_mel: MelSpectrogram | None = None,
) -> SynthesisResult:
    """Run the synthesizer in evaluation mode.

    ``teacher_forced`` requires ``target_mel`` and returns exactly its frame
    count; ``autoregressive`` decodes until the stop gate fires or the cap is
    hit, in which case the result is flagged truncated.
    """
    if mode not in ("teacher_forced", "autoregressive"):
        raise ValidationError(f"unknown synthesis mode {mode!r}")
    if speaker.dim != synth.config.speaker_dim:
        raise ValidationError(
            f"speaker embedding has {speaker.dim} dims, config says {synth.config.speaker_dim}"
        )
    if prosody.dim != synth.config.prosody_dim:
        raise ValidationError(
            f"prosody embedding has {prosody.dim} dims, config says {synth.config.prosody_dim}"
        )
    was_training = synth.training
    synth.eval()
    try:
        with torch.no_grad():
            dtype = next(synth.parameters()).dtype
            memory = synth.encode(
                torch.from_numpy(bnf.values).to(dtype).unsqueeze(0),
                torch.from_numpy(np.ascontiguousarray(speaker.vector)).to(dtype).unsqueeze(0),
                torch.from_numpy(np.ascontiguousarray(prosody.vector)).to(dtype).unsqueeze(0),
            )
            if mode == "teacher_forced":
                if target_mel is None:
                    raise ValidationError("teacher_forced mode requires target_mel")
                out = synth.decode_teacher_forced(
                    memory, torch.from_numpy(target_mel.values).to(dtype).unsqueeze(0)
                )
            else:
                out = synth.decode_autoregressive(memory)
    finally:
        synth.train(was_training)
    return SynthesisResult(
        mel=MelSpectrogram(out.mel.squeeze(0).numpy().astype(np.float32), 100.0),
        stop_logits=out.stop_logits.squeeze(0).numpy(),
        truncated=out.truncated,
        stop_frame=out.stop_frame,
    )


def vocode(mel: MelSpectrogram, provider) -> Waveform:
    """Mel to waveform through the vocoder provider."""
    if mel.num_channels != MEL_DIM:
        raise ValidationError(f"vocoder needs {MEL_DIM}-channel mels, got {mel.num_channels}")
    try:
        return provider.synthesize(mel)
    except (ValidationError, ProviderError, ModelStateError):
        raise
    except Exception as exc:
        name = getattr(provider, "name", type(provider).__name__)
        raise ProviderError(f"vocoder provider {name!r} failed: {exc}") from exc


# ---------------------------------------------------------------------------
# Synthesizer training step (stage B): prosody encoder + synthesizer only
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepProvenance:
    bnf_source: str
    prosody_source: str
    speaker_source: str
    speaker_id: str


@dataclass
class SynthStepReport:
    loss: float
    mel_loss: float
    stop_loss: float
    provenance: StepProvenance


def trainable_synth_parameters(bundle: ConversionBundle):
    """Parameters updated during synthesizer training; everything else is frozen."""
    yield from bundle.prosody_encoder.parameters()
    yield from bundle.synthesizer.parameters()


def train_synth_step(
    bundle: ConversionBundle,
    record_a: UtteranceRecord,
    record_c: UtteranceRecord,
    audio_source,
    optimizer: torch.optim.Optimizer,
    bnf_lookup=None,
) -> SynthStepReport:
    """One reconstruction step on the pair (A, C); see the module docstring.

    ``bnf_lookup(record) -> BottleneckFeatures`` serves precomputed features;
    without it the frozen acoustic model computes them from A's audio.
    """
    if record_a.speaker_id != record_c.speaker_id:
        raise WiringError(
            f"speaker embedding utterance must come from the same speaker: "
            f"{record_a.speaker_id} vs {record_c.speaker_id}"
        )
    if record_a.utterance_id == record_c.utterance_id:
        raise WiringError(
            f"speaker embedding must come from a different utterance than the "
            f"reconstruction target ({record_a.utterance_id})"
        )
    wave_a = audio_source.load(record_a)
    wave_c = audio_source.load(record_c)
    mel_a = compute_mel(wave_a, bundle.mel_config)

    # Frozen branches: acoustic model BNFs from A, speaker embedding from C.
    if bnf_lookup is not None:
        bnf = bnf_lookup(record_a)
    else:
        upstream_a = get_upstream_embeddings(wave_a, bundle.upstream_provider)
        bnf = extract_bnf(upstream_a, bundle.acoustic_model)
    speaker = encode_speaker(wave_c, bundle.speaker_provider, record=record_c)

    synth, prosody_enc = bundle.synthesizer, bundle.prosody_encoder
    synth.train()
    prosody_enc.train()
    dtype = next(synth.parameters()).dtype
    mel_t = torch.from_numpy(mel_a.values).to(dtype).unsqueeze(0)
    prosody_vec = prosody_enc(mel_t)
    memory = synth.encode(
        torch.from_numpy(bnf.values).to(dtype).unsqueeze(0),
        torch.from_numpy(np.ascontiguousarray(speaker.vector)).to(dtype).unsqueeze(0),
        prosody_vec,
    )
    out = synth.decode_teacher_forced(memory, mel_t)

    stop_target = torch.zeros_like(out.stop_logits)
    stop_target[:, -1] = 1.0
    mel_loss = (out.mel - mel_t).abs().mean()
    stop_loss = nn.functional.binary_cross_entropy_with_logits(out.stop_logits, stop_target)
    loss = mel_loss + stop_loss

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()

    return SynthStepReport(
        loss=float(loss.detach()),
        mel_loss=float(mel_loss.detach()),
        stop_loss=float(stop_loss.detach()),
        provenance=StepProvenance(
            bnf_source=record_a.utterance_id,
            prosody_source=record_a.utterance_id,
            speaker_source=record_c.utterance_id,
            speaker_id=record_c.speaker_id,
        ),
    )


# ---------------------------------------------------------------------------
# Conversion stage
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConversionProvenance:
    bnf_source: str
    prosody_source: str
    speaker_source: str
    l1_speaker: str
    l2_speaker: str
    checkpoints: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bnf_source": self.bnf_source,
            "prosody_source": self.prosody_source,
            "speaker_source": self.speaker_source,
            "l1_speaker": self.l1_speaker,
            "l2_speaker": self.l2_speaker,
            "checkpoints": dict(self.checkpoints),
        }


@dataclass
class ConversionResult:
    waveform: Waveform
    mel: MelSpectrogram
    provenance: ConversionProvenance
    truncated: bool


def _branch(fn, branch: str):
    try:
        return fn()
    except ValidationError:
        raise
    except ProviderError as exc:
        raise ProviderError(f"[{branch} branch] {exc}") from exc


def convert(request: ConversionRequest, bundle: ConversionBundle, audio_source) -> ConversionResult:
    """Reference-based conversion per the pipeline's conversion-stage wiring."""
    l2, l1 = request.l2_utterance, request.l1_reference

    wave_l1 = audio_source.load(l1)
    wave_l2 = audio_source.load(l2)

    bnf = _branch(
        lambda: extract_bnf(
            get_upstream_embeddings(wave_l1, bundle.upstream_provider), bundle.acoustic_model
        ),
        "bnf",
    )
    mel_l2 = compute_mel(wave_l2, bundle.mel_config)
    prosody = _branch(lambda: encode_prosody(mel_l2, bundle.prosody_encoder), "prosody")
    speaker = _branch(
        lambda: encode_speaker(wave_l2, bundle.speaker_provider, record=l2), "speaker"
    )
    synthesis = synthesize(bundle.synthesizer, bnf, speaker, prosody, mode="autoregressive")
    waveform = _branch(lambda: vocode(synthesis.mel, bundle.vocoder_provider), "vocoder")

    provenance = ConversionProvenance(
        bnf_source=l1.utterance_id,
        prosody_source=l2.utterance_id,
        speaker_source=l2.utterance_id,
        l1_speaker=l1.speaker_id,
        l2_speaker=l2.speaker_id,
        checkpoints=dict(bundle.metadata),
    )
    return ConversionResult(waveform, synthesis.mel, provenance, synthesis.truncated)


def write_provenance(path: str | Path, provenance: ConversionProvenance) -> Path:
    path = Path(path)
    path.write_text(json.dumps(provenance.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def read_provenance(path: str | Path) -> ConversionProvenance:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return ConversionProvenance(**payload)


def parameter_checksum(component) -> str:
    """Stable digest of a component's parameters (nn.Module or mock provider)."""
    digest = hashlib.blake2b(digest_size=16)
    if isinstance(component, nn.Module):
        for name, tensor in sorted(component.state_dict().items()):
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().numpy().tobytes())
    elif hasattr(component, "weights"):
        digest.update(np.ascontiguousarray(component.weights).tobytes())
    else:
        raise ValidationError(f"cannot checksum component of type {type(component).__name__}")
    return digest.hexdigest()
