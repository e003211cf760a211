"""Prosody reference encoder and the speaker-conditioned seq2seq synthesizer.

The synthesizer reconstructs an 80-band mel spectrogram from three inputs:
bottleneck features from the acoustic model, one speaker embedding, and one
prosody embedding. The encoder runs over the BNF sequence; the speaker and
prosody vectors are broadcast-concatenated onto every encoder output frame.
An attention-based recurrent decoder emits mel frames autoregressively along
with per-frame stop logits.
"""

from __future__ import annotations

import torch
from torch import nn

from dataclasses import dataclass

from .errors import ValidationError
from .features import MEL_DIM


@dataclass(frozen=True)
class SynthesizerConfig:
    bnf_dim: int = 256  # must equal the acoustic model's bnf_dim
    speaker_dim: int = 256
    prosody_dim: int = 128
    mel_dim: int = MEL_DIM
    encoder_layers: int = 4
    decoder_layers: int = 4
    width: int = 256
    attention_dim: int = 128
    max_decode_frames: int = 2000
    stop_threshold: float = 0.5

    def __post_init__(self):
        if self.mel_dim != MEL_DIM:
            raise ValidationError(f"mel_dim must be {MEL_DIM}, got {self.mel_dim}")
        for name in ("bnf_dim", "speaker_dim", "prosody_dim", "encoder_layers",
                     "decoder_layers", "width", "attention_dim", "max_decode_frames"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.width % 2 != 0:
            raise ValidationError(f"width must be even (bidirectional encoder), got {self.width}")
        if not 0.0 < self.stop_threshold < 1.0:
            raise ValidationError(f"stop_threshold must be in (0, 1), got {self.stop_threshold}")


class ProsodyEncoder(nn.Module):
    """Conv + GRU reference encoder, mean-pooled to one vector per utterance."""

    def __init__(self, mel_dim: int = MEL_DIM, width: int = 128, prosody_dim: int = 128):
        super().__init__()
        self.prosody_dim = prosody_dim
        self.conv = nn.Sequential(
            nn.Conv1d(mel_dim, width, kernel_size=5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv1d(width, width, kernel_size=5, stride=2, padding=2),
            nn.ReLU(),
        )
        self.gru = nn.GRU(width, width, batch_first=True)
        self.out = nn.Linear(width, prosody_dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """mel: (batch, frames, mel_dim) -> (batch, prosody_dim)."""
        if mel.shape[1] == 0:
            raise ValidationError("prosody encoder needs at least one mel frame")
        h = self.conv(mel.transpose(1, 2)).transpose(1, 2)
        h, _ = self.gru(h)
        return self.out(h.mean(dim=1))


class _Attention(nn.Module):
    """Additive content attention over the encoder memory."""

    def __init__(self, query_dim: int, memory_dim: int, attention_dim: int):
        super().__init__()
        self.query_layer = nn.Linear(query_dim, attention_dim, bias=False)
        self.memory_layer = nn.Linear(memory_dim, attention_dim, bias=False)
        self.v = nn.Linear(attention_dim, 1, bias=False)

    def forward(self, query, memory, processed_memory):
        scores = self.v(torch.tanh(self.query_layer(query).unsqueeze(1) + processed_memory))
        weights = torch.softmax(scores.squeeze(-1), dim=1)
        context = torch.bmm(weights.unsqueeze(1), memory).squeeze(1)
        return context, weights


@dataclass
class SynthesisOutput:
    mel: torch.Tensor  # (batch, frames, mel_dim)
    stop_logits: torch.Tensor  # (batch, frames)
    truncated: bool
    stop_frame: int | None


class Seq2SeqSynthesizer(nn.Module):
    def __init__(self, config: SynthesizerConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.encoder_in = nn.Linear(config.bnf_dim, w)
        self.encoder_rnn = nn.LSTM(
            w, w // 2, num_layers=config.encoder_layers, bidirectional=True, batch_first=True
        )
        self.memory_proj = nn.Linear(w + config.speaker_dim + config.prosody_dim, w)
        self.prenet = nn.Sequential(nn.Linear(config.mel_dim, w), nn.ReLU())
        self.attention = _Attention(w, w, config.attention_dim)
        self.decoder_cells = nn.ModuleList(
            [nn.LSTMCell(2 * w if i == 0 else w, w) for i in range(config.decoder_layers)]
        )
        self.mel_out = nn.Linear(2 * w, config.mel_dim)
        self.stop_out = nn.Linear(2 * w, 1)

    def encode(self, bnf: torch.Tensor, speaker: torch.Tensor, prosody: torch.Tensor):
        """bnf: (B, T, bnf_dim); speaker: (B, speaker_dim); prosody: (B, prosody_dim)."""
        c = self.config
        if bnf.ndim != 3 or bnf.shape[2] != c.bnf_dim:
            raise ValidationError(f"expected bnf (batch, frames, {c.bnf_dim}), got {tuple(bnf.shape)}")
        if bnf.shape[1] == 0:
            raise ValidationError("synthesizer needs at least one bottleneck frame")
        if speaker.shape[-1] != c.speaker_dim:
            raise ValidationError(f"speaker embedding must have {c.speaker_dim} dims, got {speaker.shape[-1]}")
        if prosody.shape[-1] != c.prosody_dim:
            raise ValidationError(f"prosody embedding must have {c.prosody_dim} dims, got {prosody.shape[-1]}")
        h, _ = self.encoder_rnn(self.encoder_in(bnf))
        t = h.shape[1]
        cond = torch.cat(
            [h, speaker.unsqueeze(1).expand(-1, t, -1), prosody.unsqueeze(1).expand(-1, t, -1)],
            dim=-1,
        )
        return self.memory_proj(cond)

    def _init_decoder_state(self, batch: int, device, dtype):
        w = self.config.width
        states = [
            (torch.zeros(batch, w, device=device, dtype=dtype),
             torch.zeros(batch, w, device=device, dtype=dtype))
            for _ in self.decoder_cells
        ]
        return states

    def _step(self, prev_frame, states, memory, processed_memory):
        query = states[-1][0]
        context, _ = self.attention(query, memory, processed_memory)
        x = torch.cat([self.prenet(prev_frame), context], dim=-1)
        new_states = []
        for i, cell in enumerate(self.decoder_cells):
            h, c = cell(x, states[i])
            new_states.append((h, c))
            x = h
        decoder_out = torch.cat([x, context], dim=-1)
        return self.mel_out(decoder_out), self.stop_out(decoder_out).squeeze(-1), new_states

    def decode_teacher_forced(self, memory: torch.Tensor, target_mel: torch.Tensor) -> SynthesisOutput:
        """Feed ground-truth frames; output length equals the target's."""
        batch, t_out, _ = target_mel.shape
        processed = self.attention.memory_layer(memory)
        states = self._init_decoder_state(batch, memory.device, memory.dtype)
        prev = target_mel.new_zeros(batch, self.config.mel_dim)
        mels, stops = [], []
        for t in range(t_out):
            frame, stop, states = self._step(prev, states, memory, processed)
            mels.append(frame)
            stops.append(stop)
            prev = target_mel[:, t]
        return SynthesisOutput(torch.stack(mels, dim=1), torch.stack(stops, dim=1), False, None)

    def decode_autoregressive(self, memory: torch.Tensor) -> SynthesisOutput:
        """Decode until stop probability exceeds the threshold or the frame cap."""
        c = self.config
        batch = memory.shape[0]
        processed = self.attention.memory_layer(memory)
        states = self._init_decoder_state(batch, memory.device, memory.dtype)
        prev = memory.new_zeros(batch, c.mel_dim)
        mels, stops = [], []
        stop_frame = None
        for t in range(c.max_decode_frames):
            frame, stop, states = self._step(prev, states, memory, processed)
            mels.append(frame)
            stops.append(stop)
            prev = frame
            if torch.all(torch.sigmoid(stop) > c.stop_threshold):
                stop_frame = t
                break
        truncated = stop_frame is None
        return SynthesisOutput(
            torch.stack(mels, dim=1), torch.stack(stops, dim=1), truncated, stop_frame
        )


def build_synthesizer(config: SynthesizerConfig, seed: int = 0) -> Seq2SeqSynthesizer:
    torch.manual_seed(seed)
    return Seq2SeqSynthesizer(config)


def build_prosody_encoder(
    prosody_dim: int = 128, width: int = 128, seed: int = 0
) -> ProsodyEncoder:
    torch.manual_seed(seed)
    return ProsodyEncoder(MEL_DIM, width, prosody_dim)


def save_synth_checkpoint(
    directory,
    synth: Seq2SeqSynthesizer,
    prosody_encoder: ProsodyEncoder,
    prosody_width: int = 128,
    metadata: dict | None = None,
):
    from dataclasses import asdict
    import json
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "synthesizer": asdict(synth.config),
        "prosody_width": prosody_width,
        "metadata": metadata or {},
    }
    (directory / "config.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    torch.save(synth.state_dict(), directory / "synthesizer.pt")
    torch.save(prosody_encoder.state_dict(), directory / "prosody.pt")
    return directory


def load_synth_checkpoint(directory) -> tuple[Seq2SeqSynthesizer, ProsodyEncoder, dict]:
    import json
    from pathlib import Path

    from .errors import ModelStateError

    directory = Path(directory)
    config_path = directory / "config.json"
    if not config_path.exists():
        raise ModelStateError(f"no synthesizer checkpoint at {directory}")
    payload = json.loads(config_path.read_text(encoding="utf-8"))
    config = SynthesizerConfig(**payload["synthesizer"])
    synth = Seq2SeqSynthesizer(config)
    synth.load_state_dict(torch.load(directory / "synthesizer.pt", weights_only=True))
    prosody_encoder = ProsodyEncoder(MEL_DIM, payload["prosody_width"], config.prosody_dim)
    prosody_encoder.load_state_dict(torch.load(directory / "prosody.pt", weights_only=True))
    synth.eval()
    prosody_encoder.eval()
    return synth, prosody_encoder, payload.get("metadata", {})
