"""Corpus handling: manifests, speaker-level splits, segmentation, parallel lookup.

A manifest is line-delimited JSON, one utterance per line, with fields
``utterance_id, speaker_id, native_language, transcript, audio_path,
sample_rate, split``. Audio files are mono 16-bit PCM WAV at 16 kHz.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import Waveform, read_wav
from .errors import (
    AmbiguousReferenceError,
    ManifestError,
    ReferenceNotFoundError,
    ValidationError,
)

SPLITS = ("train", "dev", "test", "heldout")

MANIFEST_FIELDS = (
    "utterance_id",
    "speaker_id",
    "native_language",
    "transcript",
    "audio_path",
    "sample_rate",
    "split",
)

_APOSTROPHES = re.compile("['’`]")
_NON_ALNUM = re.compile(r"[^a-z0-9\s]")
_WS = re.compile(r"\s+")


def normalize_transcript(text: str) -> str:
    """Lowercase, drop apostrophes, map other punctuation to space, collapse whitespace."""
    text = _APOSTROPHES.sub("", text.lower())
    text = _NON_ALNUM.sub(" ", text)
    return _WS.sub(" ", text).strip()


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    native_language: str
    transcript: str
    audio_path: Path
    sample_rate: int
    split: str

    def __post_init__(self):
        object.__setattr__(self, "audio_path", Path(self.audio_path))
        if not self.utterance_id:
            raise ValidationError("utterance_id must be non-empty")
        if self.sample_rate <= 0:
            raise ValidationError(
                f"{self.utterance_id}: sample_rate must be positive, got {self.sample_rate}"
            )
        if not str(self.audio_path):
            raise ValidationError(f"{self.utterance_id}: audio_path must be non-empty")
        if self.split not in SPLITS:
            raise ValidationError(
                f"{self.utterance_id}: split must be one of {SPLITS}, got {self.split!r}"
            )


@dataclass(frozen=True)
class DataSplits:
    train: tuple[UtteranceRecord, ...]
    dev: tuple[UtteranceRecord, ...]
    heldout: tuple[UtteranceRecord, ...]
    heldout_speakers: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "dev", tuple(self.dev))
        object.__setattr__(self, "heldout", tuple(self.heldout))
        object.__setattr__(self, "heldout_speakers", frozenset(self.heldout_speakers))
        seen_speakers = {r.speaker_id for r in self.train} | {r.speaker_id for r in self.dev}
        leaked = seen_speakers & self.heldout_speakers
        if leaked:
            raise ValidationError(f"held-out speakers appear in train/dev: {sorted(leaked)}")
        train_ids = {r.utterance_id for r in self.train}
        dev_ids = {r.utterance_id for r in self.dev}
        overlap = train_ids & dev_ids
        if overlap:
            raise ValidationError(f"utterances appear in both train and dev: {sorted(overlap)}")


def load_manifest(path: str | Path) -> list[UtteranceRecord]:
    """Parse a line-delimited JSON manifest into records, preserving file order."""
    path = Path(path)
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(
                    f"{path}:{line_number}: invalid JSON: {exc.msg}", line_number
                ) from exc
            missing = [k for k in MANIFEST_FIELDS if k not in payload]
            if missing:
                raise ManifestError(
                    f"{path}:{line_number}: missing fields {missing}", line_number
                )
            try:
                record = UtteranceRecord(**{k: payload[k] for k in MANIFEST_FIELDS})
            except (TypeError, ValidationError) as exc:
                raise ManifestError(f"{path}:{line_number}: {exc}", line_number) from exc
            if record.utterance_id in seen:
                raise ValidationError(
                    f"{path}:{line_number}: duplicate utterance_id {record.utterance_id!r}"
                )
            seen.add(record.utterance_id)
            records.append(record)
    return records


def save_manifest(path: str | Path, records: Iterable[UtteranceRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for r in records:
            row = {
                "utterance_id": r.utterance_id,
                "speaker_id": r.speaker_id,
                "native_language": r.native_language,
                "transcript": r.transcript,
                "audio_path": str(r.audio_path),
                "sample_rate": r.sample_rate,
                "split": r.split,
            }
            f.write(json.dumps(row) + "\n")


def build_splits(
    records: Sequence[UtteranceRecord], heldout_speakers: Iterable[str]
) -> DataSplits:
    """Partition records: held-out speakers go whole to heldout, the rest by split tag.

    Records of non-held-out speakers tagged ``test``/``heldout`` belong to
    neither partition and are dropped.
    """
    heldout_speakers = frozenset(heldout_speakers)
    present = {r.speaker_id for r in records}
    absent = heldout_speakers - present
    if absent:
        raise ValidationError(f"held-out speakers not present in manifest: {sorted(absent)}")
    train, dev, heldout = [], [], []
    for r in records:
        if r.speaker_id in heldout_speakers:
            heldout.append(r)
        elif r.split == "train":
            train.append(r)
        elif r.split == "dev":
            dev.append(r)
    return DataSplits(tuple(train), tuple(dev), tuple(heldout), heldout_speakers)


def segment_waveform(wave: Waveform, segment_seconds: float = 2.0) -> list[Waveform]:
    """Cut into consecutive fixed-length segments, zero-padding the final short one."""
    if segment_seconds <= 0:
        raise ValidationError(f"segment_seconds must be positive, got {segment_seconds}")
    seg_len = int(round(segment_seconds * wave.sample_rate))
    n = len(wave)
    if n == 0:
        return []
    segments = []
    for start in range(0, n, seg_len):
        chunk = wave.samples[start : start + seg_len]
        if chunk.size < seg_len:
            chunk = np.concatenate([chunk, np.zeros(seg_len - chunk.size, dtype=np.float32)])
        segments.append(Waveform(chunk, wave.sample_rate))
    return segments


def find_parallel_reference(
    l2_utt: UtteranceRecord, l1_records: Sequence[UtteranceRecord]
) -> UtteranceRecord:
    """Find the L1 record whose normalized transcript equals the L2 record's."""
    speakers = {r.speaker_id for r in l1_records}
    if len(speakers) > 1:
        raise ValidationError(
            f"reference records must share one speaker, got {sorted(speakers)}"
        )
    wanted = normalize_transcript(l2_utt.transcript)
    matches = [r for r in l1_records if normalize_transcript(r.transcript) == wanted]
    if not matches:
        raise ReferenceNotFoundError(
            f"no reference utterance matches transcript of {l2_utt.utterance_id!r}",
            utterance_id=l2_utt.utterance_id,
        )
    if len(matches) > 1:
        ids = [r.utterance_id for r in matches]
        raise AmbiguousReferenceError(
            f"{len(matches)} reference utterances match {l2_utt.utterance_id!r}: {ids}"
        )
    return matches[0]


class FileAudioSource:
    """Loads waveforms from the paths recorded in the manifest."""

    def load(self, record: UtteranceRecord) -> Waveform:
        wave = read_wav(record.audio_path)
        if wave.sample_rate != record.sample_rate:
            raise ValidationError(
                f"{record.utterance_id}: file rate {wave.sample_rate} != "
                f"manifest rate {record.sample_rate}"
            )
        return wave
