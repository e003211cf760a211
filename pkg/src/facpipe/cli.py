"""Command-line entry point: ``fac`` with train/extract/convert/eval subcommands.

All subcommands validate their configuration before touching data, support
``--dry-run`` (print the execution plan, write nothing), and exit with 0 on
success, 1 on a runtime failure, and 2 on usage or configuration errors.
Mock providers ship in-repo, so every subcommand runs without downloads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import acoustic_model as am
from . import conversion as conv
from . import evaluation as ev
from . import synthesizer as synth_mod
from . import trainer
from .audio import read_wav, write_wav
from .corpus import FileAudioSource, UtteranceRecord, load_manifest, build_splits
from .errors import PipelineError, ValidationError
from .features import compute_mel, get_upstream_embeddings, read_feature_cache, write_feature_cache
from .providers import available_providers, build_provider


class ConfigError(PipelineError):
    """Configuration file is missing, malformed, or names bad values."""


@dataclass
class CommandResult:
    exit_code: int
    artifacts_written: list[Path] = field(default_factory=list)
    summary: str = ""


# ---------------------------------------------------------------------------
# Config files (JSON). Each parse places blame on the offending field.
# ---------------------------------------------------------------------------


def _load_json(path: str | Path, context: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{context}: config file {path} does not exist")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{context}: {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{context}: top level of {path} must be an object")
    return payload


def _build_section(cls, payload: dict, section: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{section}: must be an object")
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {unknown}")
    try:
        return cls(**payload)
    except ValidationError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass
class TrainAmConfig:
    manifest: str
    out_dir: str
    heldout_speakers: list[str] = field(default_factory=list)
    model: am.AcousticModelConfig = field(default_factory=am.AcousticModelConfig)
    optimizer: trainer.OptimizerSpec = field(default_factory=trainer.OptimizerSpec)
    schedule: trainer.ScheduleSpec = field(default_factory=trainer.ScheduleSpec)
    patience: int = 6
    max_epochs: int = 20
    seed: int = 0
    segment_seconds: float = 2.0
    tv_target_range: tuple[float, float] = (-0.95, 0.95)
    providers: dict = field(
        default_factory=lambda: {"upstream": "mock", "ppg": "mock-uniform", "tv": "mock-sine"}
    )

    def to_payload(self) -> dict:
        from dataclasses import asdict

        payload = asdict(self)
        payload["tv_target_range"] = list(self.tv_target_range)
        return payload


def parse_train_am_config(path: str | Path) -> TrainAmConfig:
    payload = _load_json(path, "train-am")
    known = set(TrainAmConfig.__dataclass_fields__)
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"train-am: unknown field(s) {unknown}")
    for required in ("manifest", "out_dir"):
        if required not in payload:
            raise ConfigError(f"train-am: missing required field {required!r}")
    cfg = TrainAmConfig(manifest=payload["manifest"], out_dir=payload["out_dir"])
    cfg.heldout_speakers = list(payload.get("heldout_speakers", []))
    cfg.model = _build_section(am.AcousticModelConfig, payload.get("model", {}), "train-am.model")
    cfg.optimizer = _build_section(
        trainer.OptimizerSpec, payload.get("optimizer", {}), "train-am.optimizer"
    )
    cfg.schedule = _build_section(
        trainer.ScheduleSpec, payload.get("schedule", {}), "train-am.schedule"
    )
    for name in ("patience", "max_epochs", "seed"):
        if name in payload:
            if not isinstance(payload[name], int) or payload[name] < 0:
                raise ConfigError(f"train-am.{name}: must be a non-negative integer")
            setattr(cfg, name, payload[name])
    if "segment_seconds" in payload:
        if not payload["segment_seconds"] > 0:
            raise ConfigError("train-am.segment_seconds: must be positive")
        cfg.segment_seconds = float(payload["segment_seconds"])
    if "tv_target_range" in payload:
        rng = payload["tv_target_range"]
        if not (isinstance(rng, (list, tuple)) and len(rng) == 2):
            raise ConfigError("train-am.tv_target_range: must be [lo, hi]")
        cfg.tv_target_range = (float(rng[0]), float(rng[1]))
    cfg.providers = {**cfg.providers, **payload.get("providers", {})}
    for kind in ("upstream", "ppg", "tv"):
        if cfg.providers[kind] not in available_providers(kind):
            raise ConfigError(
                f"train-am.providers.{kind}: unknown id {cfg.providers[kind]!r} "
                f"(available: {available_providers(kind)})"
            )
    return cfg


@dataclass
class TrainSynthConfig:
    manifest: str
    out_dir: str
    synthesizer: synth_mod.SynthesizerConfig = field(default_factory=synth_mod.SynthesizerConfig)
    prosody_width: int = 128
    learning_rate: float = 1e-4
    epochs: int = 1
    seed: int = 0
    providers: dict = field(default_factory=lambda: {"speaker": "mock"})

    def to_payload(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


def parse_train_synth_config(path: str | Path) -> TrainSynthConfig:
    payload = _load_json(path, "train-synth")
    known = set(TrainSynthConfig.__dataclass_fields__)
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"train-synth: unknown field(s) {unknown}")
    for required in ("manifest", "out_dir"):
        if required not in payload:
            raise ConfigError(f"train-synth: missing required field {required!r}")
    cfg = TrainSynthConfig(manifest=payload["manifest"], out_dir=payload["out_dir"])
    cfg.synthesizer = _build_section(
        synth_mod.SynthesizerConfig, payload.get("synthesizer", {}), "train-synth.synthesizer"
    )
    for name in ("prosody_width", "epochs", "seed"):
        if name in payload:
            if not isinstance(payload[name], int) or payload[name] < 0:
                raise ConfigError(f"train-synth.{name}: must be a non-negative integer")
            setattr(cfg, name, payload[name])
    if "learning_rate" in payload:
        if not payload["learning_rate"] > 0:
            raise ConfigError("train-synth.learning_rate: must be positive")
        cfg.learning_rate = float(payload["learning_rate"])
    cfg.providers = {**cfg.providers, **payload.get("providers", {})}
    if cfg.providers["speaker"] not in available_providers("speaker"):
        raise ConfigError(
            f"train-synth.providers.speaker: unknown id {cfg.providers['speaker']!r}"
        )
    return cfg


@dataclass
class ConvertConfig:
    model: am.AcousticModelConfig = field(default_factory=am.AcousticModelConfig)
    synthesizer: synth_mod.SynthesizerConfig = field(default_factory=synth_mod.SynthesizerConfig)
    prosody_width: int = 128
    seed: int = 0
    am_checkpoint: str | None = None
    synth_checkpoint: str | None = None
    providers: dict = field(
        default_factory=lambda: {"upstream": "mock", "speaker": "mock", "vocoder": "mock"}
    )

    def to_payload(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


def parse_convert_config(path: str | Path | None) -> ConvertConfig:
    if path is None:
        return ConvertConfig()
    payload = _load_json(path, "convert")
    known = set(ConvertConfig.__dataclass_fields__)
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"convert: unknown field(s) {unknown}")
    cfg = ConvertConfig()
    cfg.model = _build_section(am.AcousticModelConfig, payload.get("model", {}), "convert.model")
    cfg.synthesizer = _build_section(
        synth_mod.SynthesizerConfig, payload.get("synthesizer", {}), "convert.synthesizer"
    )
    if "prosody_width" in payload:
        if not isinstance(payload["prosody_width"], int) or payload["prosody_width"] < 1:
            raise ConfigError("convert.prosody_width: must be a positive integer")
        cfg.prosody_width = payload["prosody_width"]
    if "seed" in payload:
        if not isinstance(payload["seed"], int):
            raise ConfigError("convert.seed: must be an integer")
        cfg.seed = payload["seed"]
    cfg.am_checkpoint = payload.get("am_checkpoint")
    cfg.synth_checkpoint = payload.get("synth_checkpoint")
    cfg.providers = {**cfg.providers, **payload.get("providers", {})}
    for kind in ("upstream", "speaker", "vocoder"):
        if cfg.providers[kind] not in available_providers(kind):
            raise ConfigError(f"convert.providers.{kind}: unknown id {cfg.providers[kind]!r}")
    return cfg


def _cache_dir_from_env() -> str | None:
    return os.environ.get("FAC_CACHE_DIR") or None


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _print_config_and_exit(cfg) -> CommandResult:
    print(json.dumps(cfg.to_payload(), indent=2, sort_keys=True))
    return CommandResult(0, [], "")


def _handle_train_am(args) -> CommandResult:
    cfg = parse_train_am_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.print_config:
        return _print_config_and_exit(cfg)
    model_config, weights = am.make_variant(args.variant, cfg.model)
    if not Path(cfg.manifest).exists():
        raise ConfigError(f"train-am.manifest: {cfg.manifest} does not exist")
    records = load_manifest(cfg.manifest)
    splits = build_splits(records, cfg.heldout_speakers)
    if args.dry_run:
        plan = [
            f"plan: train-am variant={args.variant} alpha={weights.alpha}",
            f"  manifest: {cfg.manifest} ({len(records)} records; "
            f"train={len(splits.train)} dev={len(splits.dev)} heldout={len(splits.heldout)})",
            f"  providers: {cfg.providers}",
            f"  optimizer: lr={cfg.optimizer.learning_rate} batch={cfg.optimizer.batch_size} "
            f"decay={cfg.schedule.decay_factor} patience={cfg.patience} "
            f"max_epochs={cfg.max_epochs} seed={cfg.seed}",
            f"  would write: {cfg.out_dir}/config.json, weights.pt, history.jsonl",
        ]
        return CommandResult(0, [], "\n".join(plan))
    source = trainer.ProviderFeatureSource(
        FileAudioSource(),
        build_provider("upstream", cfg.providers["upstream"]),
        build_provider("ppg", cfg.providers["ppg"]),
        build_provider("tv", cfg.providers["tv"]),
        segment_seconds=cfg.segment_seconds,
        cache_dir=_cache_dir_from_env(),
    )
    trainer.fit_tv_stats_for_split(source, splits.train, cfg.tv_target_range)
    model = am.build_model(model_config, seed=cfg.seed)
    result = trainer.fit(
        model,
        splits,
        source,
        weights,
        opt=cfg.optimizer,
        schedule=cfg.schedule,
        patience=cfg.patience,
        max_epochs=cfg.max_epochs,
        seed=cfg.seed,
    )
    out_dir = Path(cfg.out_dir)
    am.save_checkpoint(
        out_dir,
        model,
        weights,
        metadata={
            "variant": args.variant,
            "seed": cfg.seed,
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
            "stopped_early": result.stopped_early,
        },
    )
    history_path = out_dir / "history.jsonl"
    trainer.save_history(history_path, result.history)
    artifacts = [out_dir / "config.json", out_dir / "weights.pt", history_path]
    summary = (
        f"train-am {args.variant}: {len(result.history)} epochs, "
        f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.6f})"
    )
    return CommandResult(0, artifacts, summary)


def _handle_extract_bnf(args) -> CommandResult:
    checkpoint = Path(args.checkpoint)
    manifest = Path(args.manifest)
    if not (checkpoint / "config.json").exists():
        raise ConfigError(f"extract-bnf.checkpoint: no checkpoint at {checkpoint}")
    if not manifest.exists():
        raise ConfigError(f"extract-bnf.manifest: {manifest} does not exist")
    records = load_manifest(manifest)
    if args.dry_run:
        plan = [
            "plan: extract-bnf",
            f"  checkpoint: {checkpoint}",
            f"  manifest: {manifest} ({len(records)} records)",
            f"  would write: {args.out}/<utterance_id>.facf x {len(records)}",
        ]
        return CommandResult(0, [], "\n".join(plan))
    model, weights, _ = am.load_checkpoint(checkpoint)
    upstream = build_provider("upstream", args.upstream_provider)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = FileAudioSource()
    artifacts = []
    for record in records:
        wave = source.load(record)
        bnf = am.extract_bnf(get_upstream_embeddings(wave, upstream), model)
        path = out_dir / f"{record.utterance_id}.facf"
        write_feature_cache(bnf, path, provider_id=f"am:{checkpoint.name}:alpha={weights.alpha}")
        artifacts.append(path)
    return CommandResult(0, artifacts, f"extract-bnf: wrote {len(artifacts)} feature files")


def _handle_train_synth(args) -> CommandResult:
    cfg = parse_train_synth_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.print_config:
        return _print_config_and_exit(cfg)
    bnf_dir = Path(args.bnf_dir)
    if not Path(cfg.manifest).exists():
        raise ConfigError(f"train-synth.manifest: {cfg.manifest} does not exist")
    if not bnf_dir.is_dir():
        raise ConfigError(f"train-synth.bnf_dir: {bnf_dir} is not a directory")
    records = load_manifest(cfg.manifest)
    by_speaker: dict[str, list[UtteranceRecord]] = {}
    for r in records:
        by_speaker.setdefault(r.speaker_id, []).append(r)
    pairable = [r for r in records if len(by_speaker[r.speaker_id]) >= 2]
    if not pairable:
        raise ConfigError("train-synth.manifest: no speaker has >= 2 utterances to pair")
    if args.dry_run:
        plan = [
            "plan: train-synth",
            f"  manifest: {cfg.manifest} ({len(records)} records, {len(pairable)} pairable)",
            f"  bnf_dir: {bnf_dir}",
            f"  epochs: {cfg.epochs}, lr: {cfg.learning_rate}, seed: {cfg.seed}",
            f"  would write: {cfg.out_dir}/config.json, synthesizer.pt, prosody.pt",
        ]
        return CommandResult(0, [], "\n".join(plan))

    synth = synth_mod.build_synthesizer(cfg.synthesizer, seed=cfg.seed)
    prosody_enc = synth_mod.build_prosody_encoder(
        cfg.synthesizer.prosody_dim, cfg.prosody_width, seed=cfg.seed + 1
    )
    bundle = conv.ConversionBundle(
        acoustic_model=None,
        prosody_encoder=prosody_enc,
        synthesizer=synth,
        upstream_provider=None,
        speaker_provider=build_provider(
            "speaker", cfg.providers["speaker"], dim=cfg.synthesizer.speaker_dim
        ),
        vocoder_provider=None,
    )

    def bnf_lookup(record):
        path = bnf_dir / f"{record.utterance_id}.facf"
        seq, _ = read_feature_cache(path)
        return am.BottleneckFeatures(seq.values, seq.frame_rate)

    optimizer = torch.optim.Adam(conv.trainable_synth_parameters(bundle), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    source = FileAudioSource()
    losses = []
    for _ in range(cfg.epochs):
        for idx in rng.permutation(len(pairable)):
            record_a = pairable[idx]
            others = [r for r in by_speaker[record_a.speaker_id] if r.utterance_id != record_a.utterance_id]
            record_c = others[rng.integers(len(others))]
            report = conv.train_synth_step(
                bundle, record_a, record_c, source, optimizer, bnf_lookup=bnf_lookup
            )
            losses.append(report.loss)
    out_dir = Path(cfg.out_dir)
    synth_mod.save_synth_checkpoint(
        out_dir,
        synth,
        prosody_enc,
        prosody_width=cfg.prosody_width,
        metadata={"seed": cfg.seed, "steps": len(losses), "final_loss": losses[-1]},
    )
    artifacts = [out_dir / "config.json", out_dir / "synthesizer.pt", out_dir / "prosody.pt"]
    summary = f"train-synth: {len(losses)} steps, final loss {losses[-1]:.4f}"
    return CommandResult(0, artifacts, summary)


def _record_for_audio(path: Path, speaker_id: str, transcript: str) -> UtteranceRecord:
    wave = read_wav(path)
    return UtteranceRecord(
        utterance_id=path.stem,
        speaker_id=speaker_id,
        native_language="unknown",
        transcript=transcript,
        audio_path=path,
        sample_rate=wave.sample_rate,
        split="test",
    )


def _handle_convert(args) -> CommandResult:
    cfg = parse_convert_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.print_config:
        return _print_config_and_exit(cfg)
    l2_path, l1_path = Path(args.l2), Path(args.l1_ref)
    for label, path in (("--l2", l2_path), ("--l1-ref", l1_path)):
        if not path.exists():
            raise ConfigError(f"convert{label}: {path} does not exist")
    if args.dry_run:
        plan = [
            "plan: convert",
            f"  bnf branch      <- {l1_path} (native reference)",
            f"  prosody branch  <- {l2_path}",
            f"  speaker branch  <- {l2_path}",
            f"  providers: {cfg.providers}",
            f"  would write: {args.out}, {args.out}.provenance.json",
        ]
        return CommandResult(0, [], "\n".join(plan))

    l2 = _record_for_audio(l2_path, args.l2_speaker, args.transcript)
    l1 = _record_for_audio(l1_path, args.l1_speaker, args.transcript)
    request = conv.ConversionRequest(l2, l1)

    metadata = {}
    if cfg.am_checkpoint:
        acoustic, _, _ = am.load_checkpoint(cfg.am_checkpoint)
        metadata["am_checkpoint"] = str(cfg.am_checkpoint)
    else:
        acoustic = am.build_model(cfg.model, seed=cfg.seed)
        metadata["am_checkpoint"] = f"fresh(seed={cfg.seed})"
    if cfg.synth_checkpoint:
        synth, prosody_enc, _ = synth_mod.load_synth_checkpoint(cfg.synth_checkpoint)
        metadata["synth_checkpoint"] = str(cfg.synth_checkpoint)
    else:
        synth = synth_mod.build_synthesizer(cfg.synthesizer, seed=cfg.seed)
        prosody_enc = synth_mod.build_prosody_encoder(
            cfg.synthesizer.prosody_dim, cfg.prosody_width, seed=cfg.seed + 1
        )
        metadata["synth_checkpoint"] = f"fresh(seed={cfg.seed})"
    if acoustic.config.bnf_dim != synth.config.bnf_dim:
        raise ConfigError(
            f"convert: acoustic bnf_dim {acoustic.config.bnf_dim} != "
            f"synthesizer bnf_dim {synth.config.bnf_dim}"
        )
    bundle = conv.ConversionBundle(
        acoustic_model=acoustic,
        prosody_encoder=prosody_enc,
        synthesizer=synth,
        upstream_provider=build_provider("upstream", cfg.providers["upstream"]),
        speaker_provider=build_provider(
            "speaker", cfg.providers["speaker"], dim=synth.config.speaker_dim
        ),
        vocoder_provider=build_provider("vocoder", cfg.providers["vocoder"]),
        metadata=metadata,
    )
    result = conv.convert(request, bundle, FileAudioSource())
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_wav(out_path, result.waveform)
    sidecar = conv.write_provenance(Path(str(out_path) + ".provenance.json"), result.provenance)
    flag = " (truncated at decode cap)" if result.truncated else ""
    summary = (
        f"convert: wrote {out_path} ({result.waveform.duration:.2f} s, "
        f"{result.mel.num_frames} mel frames){flag}"
    )
    return CommandResult(0, [out_path, sidecar], summary)


def _handle_eval_mcd(args) -> CommandResult:
    pairs_path = Path(args.pairs)
    if not pairs_path.exists():
        raise ConfigError(f"eval mcd: pairs manifest {pairs_path} does not exist")
    pairs = []
    with pairs_path.open("r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"eval mcd: {pairs_path}:{line_number}: {exc.msg}") from exc
            for key in ("utterance_id", "speaker_id", "converted", "reference"):
                if key not in row:
                    raise ConfigError(f"eval mcd: {pairs_path}:{line_number}: missing {key!r}")
            pairs.append(row)
    missing = [
        p for row in pairs for p in (row["converted"], row["reference"]) if not Path(p).exists()
    ]
    if missing:
        raise ConfigError(f"eval mcd: missing audio file(s): {missing[:3]}")
    if args.dry_run:
        return CommandResult(
            0, [], f"plan: eval mcd over {len(pairs)} pairs -> {args.out}/mcd_records.jsonl"
        )
    records, per_speaker = [], {}
    for row in pairs:
        converted = compute_mel(read_wav(row["converted"]))
        reference = compute_mel(read_wav(row["reference"]))
        result = ev.mcd(converted, reference, order=args.order)
        records.append((row["utterance_id"], "mcd", result.mcd_db))
        per_speaker.setdefault(row["speaker_id"], []).append(result.mcd_db)
    speaker_means = {s: float(np.mean(v)) for s, v in per_speaker.items()}
    return _write_eval_outputs(args.out, "mcd", records, speaker_means)


def _handle_eval_wer(args) -> CommandResult:
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise ConfigError(f"eval wer: manifest {manifest} does not exist")
    records_in = load_manifest(manifest)
    if args.transcriber not in available_providers("transcriber"):
        raise ConfigError(
            f"eval wer: unknown transcriber {args.transcriber!r} "
            f"(available: {available_providers('transcriber')})"
        )
    if args.dry_run:
        return CommandResult(
            0,
            [],
            f"plan: eval wer over {len(records_in)} utterances with {args.transcriber} "
            f"-> {args.out}/wer_records.jsonl",
        )
    provider = build_provider("transcriber", args.transcriber)
    source = FileAudioSource()
    records, per_speaker = [], {}
    for record in records_in:
        wave = source.load(record)
        hyp = ev.transcribe(wave, provider, record=record)
        result = ev.wer(record.transcript, hyp)
        records.append((record.utterance_id, "wer", result.wer_percent))
        per_speaker.setdefault(record.speaker_id, []).append(result)
    speaker_wer = {
        s: 100.0 * sum(r.edits for r in v) / sum(r.ref_words for r in v)
        for s, v in per_speaker.items()
    }
    return _write_eval_outputs(args.out, "wer", records, speaker_wer)


def _handle_eval_centroid(args) -> CommandResult:
    emb_dir = Path(args.embeddings)
    if not emb_dir.is_dir():
        raise ConfigError(f"eval centroid: {emb_dir} is not a directory")
    cache_files = sorted(emb_dir.glob("*.facf"))
    if not cache_files:
        raise ConfigError(f"eval centroid: no .facf embedding exports in {emb_dir}")
    if args.dry_run:
        return CommandResult(
            0, [], f"plan: eval centroid over {len(cache_files)} embedding files -> {args.out}"
        )
    embeddings: dict[tuple[str, str], list] = {}
    for path in cache_files:
        stem = path.stem
        if "_" not in stem:
            raise ConfigError(f"eval centroid: {path.name} is not named <speaker>_<condition>.facf")
        speaker, condition = stem.rsplit("_", 1)
        if condition not in ev.CONDITIONS:
            raise ConfigError(
                f"eval centroid: {path.name}: condition must be one of {ev.CONDITIONS}"
            )
        seq, _ = read_feature_cache(path)
        embeddings[(speaker, condition)] = [
            conv.SpeakerEmbedding(row, source_utterance_id=f"{stem}:{i}")
            for i, row in enumerate(seq.values)
        ]
    report = ev.centroid_report(embeddings)
    records = [(s, "centroid_distance", d) for s, d in sorted(report.per_speaker.items())]
    return _write_eval_outputs(
        args.out, "centroid_distance", records, report.per_speaker, report.mean, report.std
    )


def _write_eval_outputs(
    out_dir, metric, records, per_speaker, average=None, std=None
) -> CommandResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = ev.write_metric_records(out_dir / f"{metric}_records.jsonl", records)
    table = ev.format_summary_table(metric, per_speaker, average, std)
    summary_path = out_dir / f"{metric}_summary.txt"
    summary_path.write_text(table, encoding="utf-8")
    return CommandResult(0, [records_path, summary_path], table.rstrip("\n"))


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fac",
        description="Reference-based foreign accent conversion pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-am", help="train a multi-task acoustic model variant")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", choices=sorted(am.VARIANT_ALPHAS), default="combined")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--print-config", action="store_true")

    p = sub.add_parser("extract-bnf", help="extract bottleneck features for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--upstream-provider", default="mock")
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("train-synth", help="train the prosody encoder and synthesizer")
    p.add_argument("--config", required=True)
    p.add_argument("--bnf-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--print-config", action="store_true")

    p = sub.add_parser("convert", help="accent-convert one utterance against a reference")
    p.add_argument("--l2", required=True, help="non-native utterance to convert (WAV)")
    p.add_argument("--l1-ref", required=True, help="native reference with matching text (WAV)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--transcript", default="", help="shared transcript of both utterances")
    p.add_argument("--l2-speaker", default="L2")
    p.add_argument("--l1-speaker", default="L1")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--print-config", action="store_true")

    p = sub.add_parser("eval", help="objective evaluations")
    eval_sub = p.add_subparsers(dest="eval_kind", required=True)

    q = eval_sub.add_parser("mcd", help="mel cepstral distortion over converted/reference pairs")
    q.add_argument("--pairs", required=True, help="JSONL: utterance_id, speaker_id, converted, reference")
    q.add_argument("--out", required=True)
    q.add_argument("--order", type=int, default=13)
    q.add_argument("--dry-run", action="store_true")

    q = eval_sub.add_parser("wer", help="word error rate via a transcriber provider")
    q.add_argument("--manifest", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--transcriber", default="mock-echo")
    q.add_argument("--dry-run", action="store_true")

    q = eval_sub.add_parser("centroid", help="speaker-embedding centroid distances")
    q.add_argument("--embeddings", required=True, help="directory of <speaker>_<condition>.facf files")
    q.add_argument("--out", required=True)
    q.add_argument("--dry-run", action="store_true")

    return parser


_HANDLERS = {
    "train-am": _handle_train_am,
    "extract-bnf": _handle_extract_bnf,
    "train-synth": _handle_train_synth,
    "convert": _handle_convert,
}

_EVAL_HANDLERS = {
    "mcd": _handle_eval_mcd,
    "wer": _handle_eval_wer,
    "centroid": _handle_eval_centroid,
}


def run(argv: list[str]) -> CommandResult:
    """Parse and dispatch; exit code 0 = success, 1 = runtime failure, 2 = usage/config."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 2
        return CommandResult(code, [], "")
    handler = _EVAL_HANDLERS[args.eval_kind] if args.command == "eval" else _HANDLERS[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        return CommandResult(2, [], f"config error: {exc}")
    except PipelineError as exc:
        return CommandResult(1, [], f"error [{type(exc).__name__}]: {exc}")
    except OSError as exc:
        return CommandResult(1, [], f"error [io]: {exc}")


def main(argv: list[str] | None = None) -> int:
    result = run(sys.argv[1:] if argv is None else argv)
    if result.summary:
        stream = sys.stdout if result.exit_code == 0 else sys.stderr
        print(result.summary, file=stream)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
