#!/usr/bin/env python3
"""End-to-end desk-scale demo on a generated mock corpus.

Builds a tiny two-speaker corpus of synthetic tones, trains the three
acoustic-model variants, extracts bottleneck features, trains the
synthesizer stage, converts one utterance against its native reference, and
runs the objective evaluations. Everything uses the in-repo mock providers;
no downloads, CPU only, finishes in about a minute.

Usage: python scripts/run_desk_demo.py [--workdir DIR] [--seed N]
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from facpipe.audio import Waveform, write_wav
from facpipe.cli import run
from facpipe.corpus import UtteranceRecord, save_manifest

SR = 16000

PROMPTS = [
    "Author of the danger trail, Philip Steels, etc.",
    "Not at this particular case, Tom, apologized Whittemore.",
    "For the twentieth time that evening the two men shook hands.",
    "Will we ever forget it.",
]

MODEL = {"bilstm_hidden": 16, "bnf_dim": 16, "dropout_rate": 0.1}

SYNTH = {
    "bnf_dim": 16,
    "speaker_dim": 32,
    "prosody_dim": 16,
    "encoder_layers": 1,
    "decoder_layers": 1,
    "width": 32,
    "attention_dim": 16,
    "max_decode_frames": 200,
}


def tone(duration: float, freq: float) -> Waveform:
    t = np.arange(int(duration * SR)) / SR
    return Waveform((0.2 * np.sin(2 * np.pi * freq * t)).astype(np.float32), SR)


def build_corpus(root: Path):
    audio = root / "audio"
    audio.mkdir(parents=True)
    records = []
    layout = [("BDL", "english", 90.0), ("NJS", "spanish", 150.0)]
    for speaker, language, base_freq in layout:
        for k, split in enumerate(["train", "train", "train", "dev"]):
            utt_id = f"{speaker.lower()}_arctic_a{k:04d}"
            path = audio / f"{utt_id}.wav"
            write_wav(path, tone(0.6, base_freq + 25.0 * k))
            records.append(
                UtteranceRecord(utt_id, speaker, language, PROMPTS[k], path, SR, split)
            )
    manifest = root / "manifest.jsonl"
    save_manifest(manifest, records)
    return manifest, records


def must(result, stage):
    stream = sys.stdout if result.exit_code == 0 else sys.stderr
    print(f"--- {stage} ---", file=stream)
    if result.summary:
        print(result.summary, file=stream)
    if result.exit_code != 0:
        sys.exit(result.exit_code)
    return result


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", type=Path, default=None)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    workdir = args.workdir or Path(tempfile.mkdtemp(prefix="fac_demo_"))
    workdir.mkdir(parents=True, exist_ok=True)
    print(f"working directory: {workdir}")
    manifest, records = build_corpus(workdir)

    am_config = workdir / "train_am.json"
    am_config.write_text(
        json.dumps(
            {
                "manifest": str(manifest),
                "out_dir": str(workdir / "am_combined"),
                "model": MODEL,
                "optimizer": {"learning_rate": 1e-3, "batch_size": 2},
                "schedule": {"decay_factor": 0.9},
                "patience": 6,
                "max_epochs": 3,
                "seed": args.seed,
            }
        )
    )
    for variant in ("ppg_only", "tv_only", "combined"):
        payload = json.loads(am_config.read_text())
        payload["out_dir"] = str(workdir / f"am_{variant}")
        variant_config = workdir / f"train_am_{variant}.json"
        variant_config.write_text(json.dumps(payload))
        must(run(["train-am", "--config", str(variant_config), "--variant", variant]),
             f"train-am {variant}")

    bnf_dir = workdir / "bnf"
    must(
        run(["extract-bnf", "--checkpoint", str(workdir / "am_combined"),
             "--manifest", str(manifest), "--out", str(bnf_dir)]),
        "extract-bnf",
    )

    synth_config = workdir / "train_synth.json"
    synth_config.write_text(
        json.dumps(
            {
                "manifest": str(manifest),
                "out_dir": str(workdir / "synth"),
                "synthesizer": SYNTH,
                "prosody_width": 16,
                "learning_rate": 1e-3,
                "epochs": 2,
                "seed": args.seed,
            }
        )
    )
    must(run(["train-synth", "--config", str(synth_config), "--bnf-dir", str(bnf_dir)]),
         "train-synth")

    l2 = next(r for r in records if r.speaker_id == "NJS" and r.split == "dev")
    l1 = next(
        r for r in records if r.speaker_id == "BDL" and r.transcript == l2.transcript
    )
    convert_config = workdir / "convert.json"
    convert_config.write_text(
        json.dumps(
            {
                "model": MODEL,
                "synthesizer": SYNTH,
                "prosody_width": 16,
                "am_checkpoint": str(workdir / "am_combined"),
                "synth_checkpoint": str(workdir / "synth"),
                "seed": args.seed,
            }
        )
    )
    converted = workdir / "converted" / f"{l2.utterance_id}_to_{l1.speaker_id}.wav"
    must(
        run(["convert", "--l2", str(l2.audio_path), "--l1-ref", str(l1.audio_path),
             "--out", str(converted), "--config", str(convert_config),
             "--transcript", l2.transcript,
             "--l2-speaker", l2.speaker_id, "--l1-speaker", l1.speaker_id]),
        "convert",
    )
    print((Path(str(converted) + ".provenance.json")).read_text().rstrip())

    pairs = workdir / "mcd_pairs.jsonl"
    pairs.write_text(
        json.dumps(
            {
                "utterance_id": l2.utterance_id,
                "speaker_id": l2.speaker_id,
                "converted": str(converted),
                "reference": str(l1.audio_path),
            }
        )
        + "\n"
    )
    must(run(["eval", "mcd", "--pairs", str(pairs), "--out", str(workdir / "eval_mcd")]),
         "eval mcd")
    must(run(["eval", "wer", "--manifest", str(manifest), "--out", str(workdir / "eval_wer"),
              "--transcriber", "mock-garble"]),
         "eval wer (garbling transcriber)")

    if args.workdir is None:
        shutil.rmtree(workdir)
        print(f"\ncleaned up {workdir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
