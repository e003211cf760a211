"""Shared fixtures: synthetic audio, desk-scale corpora, tiny model configs."""

from __future__ import annotations

import numpy as np
import pytest

from facpipe.acoustic_model import AcousticModelConfig
from facpipe.audio import Waveform, write_wav
from facpipe.corpus import UtteranceRecord, save_manifest
from facpipe.synthesizer import SynthesizerConfig
from facpipe.trainer import TrainingExample

SR = 16000

PROMPTS = [
    "Author of the danger trail, Philip Steels, etc.",
    "Not at this particular case, Tom, apologized Whittemore.",
    "For the twentieth time that evening the two men shook hands.",
    "Will we ever forget it.",
]


def make_tone(duration: float = 0.5, freq: float = 220.0, amp: float = 0.2,
              sample_rate: int = SR, phase: float = 0.0) -> Waveform:
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return Waveform((amp * np.sin(2 * np.pi * freq * t + phase)).astype(np.float32), sample_rate)


def tiny_am_config(**overrides) -> AcousticModelConfig:
    base = dict(
        input_dim=8,
        bilstm_hidden=16,
        num_bilstm_layers=2,
        upsample_factor=2,
        dropout_rate=0.0,
        bnf_dim=12,
        ppg_dim=10,
        tv_dim=6,
    )
    base.update(overrides)
    return AcousticModelConfig(**base)


def tiny_synth_config(**overrides) -> SynthesizerConfig:
    base = dict(
        bnf_dim=12,
        speaker_dim=16,
        prosody_dim=8,
        encoder_layers=1,
        decoder_layers=1,
        width=16,
        attention_dim=8,
        max_decode_frames=60,
    )
    base.update(overrides)
    return SynthesizerConfig(**base)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def make_synthetic_task(
    num_train: int = 24,
    num_dev: int = 8,
    frames: int = 25,
    input_dim: int = 8,
    ppg_dim: int = 10,
    tv_dim: int = 6,
    seed: int = 0,
):
    """Per-frame learnable task: TV targets a fixed tanh-squashed linear map of
    the (upsampled) inputs, posteriorgram targets a fixed softmax map."""
    rng = np.random.default_rng(seed)
    w_tv = rng.normal(size=(input_dim, tv_dim)) * 0.8
    w_ppg = rng.normal(size=(input_dim, ppg_dim)) * 1.5

    def example() -> TrainingExample:
        x = rng.normal(size=(frames, input_dim))
        x_up = np.repeat(x, 2, axis=0)
        tv = 0.9 * np.tanh(x_up @ w_tv)
        ppg = softmax(x_up @ w_ppg)
        return TrainingExample(
            x.astype(np.float32), ppg.astype(np.float32), tv.astype(np.float32)
        )

    train = [example() for _ in range(num_train)]
    dev = [example() for _ in range(num_dev)]
    return train, dev


class DictFeatureSource:
    """FeatureSource backed by a plain {utterance_id: [examples]} mapping."""

    def __init__(self, examples: dict[str, list[TrainingExample]]):
        self.examples = examples

    def load(self, record):
        return self.examples[record.utterance_id]


def synthetic_records(prefix: str, count: int, split: str, speaker: str = "SYN"):
    return [
        UtteranceRecord(
            utterance_id=f"{prefix}{i:03d}",
            speaker_id=speaker,
            native_language="synthetic",
            transcript=f"synthetic utterance {i}",
            audio_path=f"{prefix}{i:03d}.wav",
            sample_rate=SR,
            split=split,
        )
        for i in range(count)
    ]


def build_corpus(root, layout=None, duration: float = 0.5):
    """Write tone WAVs plus a manifest; returns (manifest_path, records).

    layout: list of (speaker, native_language, num_utterances, split).
    Utterance k of every speaker shares the transcript PROMPTS[k], so
    parallel-reference lookup works across speakers; repeat a speaker in the
    layout to give them several splits.
    """
    layout = layout or [
        ("BDL", "english", 3, "train"),
        ("NJS", "spanish", 3, "train"),
    ]
    audio_dir = root / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    records = []
    speaker_index: dict[str, int] = {}
    counters: dict[str, int] = {}
    for speaker, language, count, split in layout:
        s_idx = speaker_index.setdefault(speaker, len(speaker_index))
        for _ in range(count):
            k = counters.get(speaker, 0)
            counters[speaker] = k + 1
            utt_id = f"{speaker.lower()}_arctic_a{k:04d}"
            path = audio_dir / f"{utt_id}.wav"
            write_wav(path, make_tone(duration, freq=180.0 + 60.0 * s_idx + 15.0 * k))
            records.append(
                UtteranceRecord(
                    utterance_id=utt_id,
                    speaker_id=speaker,
                    native_language=language,
                    transcript=PROMPTS[k % len(PROMPTS)],
                    audio_path=path,
                    sample_rate=SR,
                    split=split,
                )
            )
    manifest = root / "manifest.jsonl"
    save_manifest(manifest, records)
    return manifest, records


@pytest.fixture
def tone_wave():
    return make_tone(2.0, freq=220.0)
