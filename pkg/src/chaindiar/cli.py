"""Command-line entry point: ``chaindiar {simulate,train,adapt,infer,score}``.

Settings come from three layers, later ones winning: dataclass defaults, a
TOML file given with ``--config``, and command-line flags.  ``CHAINDIAR_SEED``
replaces the seed from the file (flags still win).  The TOML file has the
sections ``[features]``, ``[model]``, ``[train]``, ``[simulation]`` and
``[adaptation]`` whose keys are the fields of the matching config classes.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from chaindiar.features import FeatureConfig, extract, read_wav
from chaindiar.labels import ActivityMatrix
from chaindiar.losses import AdaptationPolicy
from chaindiar.model import CONDITIONAL_CHAIN, PARALLEL_MULTITASK, ModelConfig, load_checkpoint, load_model
from chaindiar.scoring import (
    REPORT_HEADER,
    RttmSegment,
    activity_to_segments,
    counting_report,
    der_by_ref_count,
    der_per_file,
    format_report,
    merge_reports,
    read_rttm,
    write_records,
    write_rttm,
)
from chaindiar.simulation import SimConfig, read_manifest, write_corpus
from chaindiar.training import NonFiniteGradient, TrainConfig, TrainingDiverged, adapt, diarize, fit

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("chaindiar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "CHAINDIAR_SEED"

SECTIONS = {
    "features": FeatureConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "simulation": SimConfig,
    "adaptation": AdaptationPolicy,
}
# fields that are derived or nested rather than set directly
EXCLUDED = {"model": {"input_dim"}, "train": {"adaptation"}}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- configuration ------------------------------------------------------------------


def section_defaults(section: str) -> dict:
    out = {}
    for f in dataclasses.fields(SECTIONS[section]):
        if f.name in EXCLUDED.get(section, ()):
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from e
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"{path}: {e}") from e
    for section, values in raw.items():
        if section not in SECTIONS or not isinstance(values, dict):
            raise UsageError(f"{path}: unknown section [{section}]")
        unknown = set(values) - set(section_defaults(section))
        if unknown:
            raise UsageError(f"{path}: unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    return raw


def resolve(args, sections, base=None) -> dict:
    """Merge defaults, ``base`` (e.g. a checkpoint header), file, env seed and flags."""
    file_cfg = load_config_file(args.config) if args.config else {}
    env_seed = os.environ.get(SEED_ENV)
    resolved = {}
    for section in sections:
        values = section_defaults(section)
        values.update((base or {}).get(section, {}))
        values.update(file_cfg.get(section, {}))
        if env_seed is not None and "seed" in values:
            try:
                values["seed"] = int(env_seed)
            except ValueError as e:
                raise UsageError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from e
        for key in list(values):
            flag = getattr(args, f"{section}.{key}", None)
            if flag is not None:
                values[key] = flag
        resolved[section] = values
    return resolved


def build(section: str, values: dict, **extra):
    try:
        return SECTIONS[section](**values, **extra)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid [{section}] settings: {e}") from e


def jsonable(values: dict) -> dict:
    out = {}
    for k, v in values.items():
        if isinstance(v, (set, frozenset)):
            v = sorted(getattr(x, "value", x) for x in v)
        elif isinstance(v, (tuple, list)):
            v = [getattr(x, "value", x) for x in v]
        elif isinstance(v, dict):
            v = jsonable(v)
        out[k] = v
    return out


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def config_record(obj) -> dict:
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    return jsonable({f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)})


def log_config(configs: dict, out_dir) -> None:
    """Log the fully resolved configuration objects and save them as ``config.json``."""
    record = {name: config_record(obj) for name, obj in configs.items()}
    text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    logger.info("resolved config:\n%s", text.rstrip())
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_atomic(Path(out_dir) / "config.json", text)


# --- argument types -----------------------------------------------------------------


def speaker_range(text: str) -> tuple[int, int]:
    """``"2"`` or ``"1,4"`` (inclusive range)."""
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        return (parts[0], parts[0])
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected N or MIN,MAX")
    return (parts[0], parts[1])


def subtask_list(text: str) -> tuple[str, ...]:
    names = tuple(p for p in text.split(",") if p)
    for n in names:
        if n not in ("sad", "od"):
            raise argparse.ArgumentTypeError(f"unknown subtask {n!r} (choose from sad, od)")
    return names


def show(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(getattr(v, "value", v)) for v in value) or "none"
    return str(value)


def option(parser, flag, section, key, help, **kw):
    """A flag that overrides ``[section] key``; help shows the built-in default."""
    default = section_defaults(section)[key]
    parser.add_argument(flag, dest=f"{section}.{key}", default=None, help=f"{help} (default: {show(default)})", **kw)


def add_feature_options(p):
    g = p.add_argument_group("features")
    option(g, "--n-mels", "features", "n_mels", "mel bands", type=int, metavar="N")
    option(g, "--context", "features", "context", "splice context frames on each side", type=int, metavar="N")
    option(g, "--subsample", "features", "subsample", "frame subsampling factor", type=int, metavar="N")


def add_model_options(p):
    g = p.add_argument_group("model")
    option(g, "--d-model", "model", "d_model", "embedding width", type=int, metavar="D")
    option(g, "--n-heads", "model", "n_heads", "attention heads", type=int, metavar="H")
    option(g, "--n-blocks", "model", "n_blocks", "encoder blocks", type=int, metavar="N")
    option(g, "--subtasks", "model", "subtasks", "comma-separated subtask order, e.g. sad,od", type=subtask_list, metavar="LIST")
    option(g, "--max-speakers", "model", "max_speakers", "speaker steps at inference", type=int, metavar="S")
    option(g, "--variant", "model", "variant", "chain variant", choices=(CONDITIONAL_CHAIN, PARALLEL_MULTITASK))
    option(g, "--positional-encoding", "model", "positional_encoding", "add sinusoidal positions", action="store_const", const=True)


def add_train_options(p):
    g = p.add_argument_group("training")
    option(g, "--epochs", "train", "max_epochs", "training epochs", type=int, metavar="N")
    option(g, "--batch-size", "train", "batch_size", "chunks per update", type=int, metavar="N")
    option(g, "--chunk-frames", "train", "chunk_frames", "chunk length in model frames", type=int, metavar="N")
    option(g, "--lr-scale", "train", "lr_scale", "learning-rate schedule scale", type=float, metavar="X")
    option(g, "--warmup-steps", "train", "warmup_steps", "learning-rate warmup steps", type=int, metavar="N")
    option(g, "--grad-clip", "train", "grad_clip", "global gradient-norm clip", type=float, metavar="X")
    option(g, "--seed", "train", "seed", "random seed", type=int, metavar="N")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="chaindiar", description="Subtask-first conditional speaker diarization.")
    parser.add_argument("--log-level", default="info", choices=("debug", "info", "warning", "error"), help="logging verbosity (default: info)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("simulate", help="write a simulated corpus (WAV, RTTM, manifest)")
    p.add_argument("--config", type=Path, metavar="TOML", help="config file")
    p.add_argument("--out-dir", type=Path, required=True, help="output directory")
    p.add_argument("--n-mixtures", type=int, required=True, metavar="N", help="number of mixtures")
    g = p.add_argument_group("simulation")
    option(g, "--seed", "simulation", "seed", "random seed", type=int, metavar="N")
    option(g, "--n-speakers", "simulation", "n_speakers", "speakers per mixture, N or MIN,MAX", type=speaker_range, metavar="N")
    option(g, "--duration", "simulation", "target_duration_s", "mixture length in seconds", type=float, metavar="SEC")
    option(g, "--pause-scale", "simulation", "pause_scale", "mean pause between utterances in seconds", type=float, metavar="SEC")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--config", type=Path, metavar="TOML", help="config file")
    p.add_argument("--manifest", type=Path, required=True, help="training manifest")
    p.add_argument("--out-dir", type=Path, required=True, help="checkpoint and log directory")
    p.add_argument("--resume", type=Path, metavar="CHECKPOINT", help="continue a run from one of its checkpoints")
    add_feature_options(p)
    add_model_options(p)
    add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="fine-tune a checkpoint with subtask-loss frame dropping")
    p.add_argument("--config", type=Path, metavar="TOML", help="config file")
    p.add_argument("--checkpoint", type=Path, required=True, help="model to adapt")
    p.add_argument("--manifest", type=Path, required=True, help="adaptation manifest")
    p.add_argument("--out-dir", type=Path, required=True, help="checkpoint and log directory")
    defaults = section_defaults("adaptation")
    p.add_argument(
        "--policy",
        nargs=2,
        type=float,
        metavar=("DROP", "WEIGHT"),
        help=f"frame drop ratio and subtask loss weight (default: {defaults['frame_drop_ratio']} {defaults['subtask_weight']})",
    )
    add_train_options(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("infer", help="diarize audio and write a hypothesis RTTM")
    p.add_argument("--checkpoint", type=Path, required=True, help="trained model")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav", type=Path, nargs="+", help="input WAV files")
    src.add_argument("--manifest", type=Path, help="manifest listing inputs")
    p.add_argument("--out", type=Path, required=True, help="hypothesis RTTM path")
    p.add_argument("--sad-override", action="store_true", help="zero speaker activity where the SAD step says non-speech")
    p.add_argument("--max-speakers", type=int, metavar="S", help="cap on decoded speakers (default: model setting)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="score a hypothesis RTTM against a reference")
    p.add_argument("--ref", type=Path, nargs="+", required=True, help="reference RTTM files")
    p.add_argument("--hyp", type=Path, nargs="+", required=True, help="hypothesis RTTM files")
    p.add_argument("--collar", type=float, default=0.25, metavar="SEC", help="no-score zone around reference boundaries (default: 0.25)")
    p.add_argument("--by-count", action="store_true", help="also report DER and counting accuracy per reference speaker count")
    p.add_argument("--records", type=Path, metavar="PATH", help="write per-file and overall reports as JSON lines")
    p.set_defaults(func=cmd_score)
    return parser


# --- commands -----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    resolved = resolve(args, ["simulation"])
    cfg = build("simulation", resolved["simulation"])
    if args.n_mixtures < 1:
        raise UsageError("--n-mixtures must be at least 1")
    log_config({"simulation": cfg}, args.out_dir)
    manifest = write_corpus(cfg, args.n_mixtures, args.out_dir)
    print(manifest)
    return EXIT_OK


def _header_sections(checkpoint) -> tuple[dict, dict]:
    _, header = load_checkpoint(checkpoint)
    base = {
        "features": header.get("feature_config", {}),
        "model": {k: v for k, v in header["model_config"].items() if k != "input_dim"},
    }
    if "train_config" in header:
        base["train"] = {k: v for k, v in header["train_config"].items() if k != "adaptation"}
    return base, header


def cmd_train(args) -> int:
    base = _header_sections(args.resume)[0] if args.resume else None
    resolved = resolve(args, ["features", "model", "train"], base)
    feature_cfg = build("features", resolved["features"])
    model_cfg = build("model", resolved["model"], input_dim=feature_cfg.spliced_dim)
    train_cfg = build("train", resolved["train"])
    log_config({"features": feature_cfg, "model": model_cfg, "train": train_cfg}, args.out_dir)
    last = fit(args.manifest, train_cfg, model_cfg, feature_cfg, args.out_dir, resume=args.resume)
    print(last)
    return EXIT_OK


def cmd_adapt(args) -> int:
    base, _ = _header_sections(args.checkpoint)
    resolved = resolve(args, ["train", "adaptation"], {"train": base.get("train", {})})
    if args.policy is not None:
        resolved["adaptation"]["frame_drop_ratio"], resolved["adaptation"]["subtask_weight"] = args.policy
    policy = build("adaptation", resolved["adaptation"])
    train_cfg = build("train", resolved["train"], adaptation=policy)
    log_config({"train": train_cfg}, args.out_dir)
    last = adapt(args.checkpoint, args.manifest, train_cfg, None, args.out_dir)
    print(last)
    return EXIT_OK


def _inputs(args) -> list[tuple[str, Path]]:
    if args.manifest is not None:
        return [(e.mixture_id, e.wav_path) for e in read_manifest(args.manifest)]
    return [(p.stem, p) for p in args.wav]


def cmd_infer(args) -> int:
    if args.max_speakers is not None and args.max_speakers < 1:
        raise UsageError("--max-speakers must be at least 1")
    model, header, _ = load_model(args.checkpoint)
    model.eval()
    feature_cfg = FeatureConfig(**header["feature_config"])
    segments = []
    for file_id, path in _inputs(args):
        feats = extract(read_wav(path), feature_cfg)
        rows = diarize(model, feats.data.T, args.sad_override, args.max_speakers)
        names = [f"spk{s}" for s in range(rows.shape[0])]
        segments += activity_to_segments(ActivityMatrix(rows.reshape(-1, feats.n_frames), feats.frame_shift_s), names, file_id)
        logger.info("%s: %d speakers", file_id, rows.shape[0])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    tmp = args.out.with_name(args.out.name + ".tmp")
    write_rttm(tmp, segments)
    os.replace(tmp, args.out)
    return EXIT_OK


def _read_all(paths) -> list[RttmSegment]:
    segments = []
    for p in paths:
        segments += read_rttm(p)
    return segments


def cmd_score(args) -> int:
    if args.collar < 0:
        raise UsageError("--collar must be non-negative")
    ref = _read_all(args.ref)
    hyp = _read_all(args.hyp)
    per_file = der_per_file(ref, hyp, collar_s=args.collar)
    total = merge_reports(per_file.values())
    if total.scored_speaker_time_s <= 0:
        raise ValueError("nothing to score")
    lines = [REPORT_HEADER, format_report(total, "overall")]
    if args.by_count:
        ref_counts = {fid: len({s.speaker for s in ref if s.file_id == fid}) for fid in per_file}
        hyp_counts = {fid: len({s.speaker for s in hyp if s.file_id == fid}) for fid in per_file}
        by_count = der_by_ref_count(per_file, ref_counts)
        lines += ["", f"{'speakers':>8} {'files':>5} {'DER':>6}"]
        for n, value in by_count.items():
            n_files = sum(1 for c in ref_counts.values() if c == n)
            lines.append(f"{n:>8} {n_files:>5} {value:6.2f}")
        lines += ["", counting_report((ref_counts[f], hyp_counts[f]) for f in per_file).format()]
    print("\n".join(lines))
    if args.records is not None:
        records = [rep.to_record(file_id=fid) for fid, rep in per_file.items()]
        records.append(total.to_record(file_id="overall"))
        tmp = args.records.with_name(args.records.name + ".tmp")
        write_records(tmp, records)
        os.replace(tmp, args.records)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"chaindiar: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteGradient, FloatingPointError) as e:
        print(f"chaindiar: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as e:
        print(f"chaindiar: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
