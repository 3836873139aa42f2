"""Command-line pipeline: simulate, train, evaluate, compare, ablate.

Every command funnels its randomness through one named seed, writes its
outputs plus a single run manifest into ``--out``, and is byte-identical
on re-run with the same inputs (only the manifest carries a timestamp).
Flags override config-file keys, which override built-in defaults.

Exit codes: 0 success, 1 usage or configuration error, 2 data validation
error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import evaluate as ev
from .dataio import file_sha256, load_dataset, save_dataset
from .domain import filter_training_searches, validate_dataset
from .errors import (
    ConfigError,
    ContractError,
    DataValidationError,
    JourneyRankError,
    SchemaMismatchError,
    ShapeError,
    TrainingDivergenceError,
    UndefinedTaskWeightError,
)
from .model import (
    load_model,
    model_config_from_record,
    model_config_to_record,
    save_model,
    train,
)
from .simulate import (
    generate,
    generator_config_from_record,
    generator_config_to_record,
    save_world,
    summarize,
)

CONFIG_DIR_ENV = "JOURNEYRANK_CONFIG_DIR"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


# ---------------------------------------------------------------------------
# run manifests


@dataclass
class RunManifest:
    """Everything needed to audit or re-run one command."""

    command: str
    version: str
    seed: list[int]
    config: dict
    inputs: dict[str, str]
    input_hashes: dict[str, str]
    outputs: list[str]
    created_at: str = field(default_factory=lambda: datetime.now(
        timezone.utc).isoformat())

    def to_record(self) -> dict:
        return asdict(self)


def write_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    path = out_dir / "manifest.json"
    _write_json(path, manifest.to_record())
    return path


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(text)
        if not text.endswith("\n"):
            f.write("\n")


def _resolve_config_path(raw: str) -> Path:
    """Literal path first, then the optional shared config directory."""
    path = Path(raw)
    if path.exists():
        return path
    config_dir = os.environ.get(CONFIG_DIR_ENV)
    if config_dir:
        fallback = Path(config_dir) / raw
        if fallback.exists():
            return fallback
    raise ConfigError(f"config file not found: {raw}")


def _load_json_config(raw: str) -> tuple[dict, Path]:
    path = _resolve_config_path(raw)
    try:
        with open(path) as f:
            record = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(record, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return record, path


def _emit(args, payload: dict, table: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(table)


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_valid_dataset(path_arg: str):
    path = Path(path_arg)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    dataset = load_dataset(path)
    report = validate_dataset(dataset)
    if not report.accepted:
        lines = "; ".join(f"{k}x{v}" for k, v in
                          sorted(report.violations.items()))
        raise DataValidationError(f"dataset {path} failed validation: {lines}")
    return dataset, path


def _parse_seeds(raw: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(part) for part in raw.split(",") if part != "")
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, "
                          f"got {raw!r}")
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def _settings(args) -> ev.TrainEvalSettings:
    return ev.TrainEvalSettings(epochs=args.epochs,
                                batch_size=args.batch_size,
                                learning_rate=args.learning_rate)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    record, config_path = _load_json_config(args.config)
    if args.seed is not None:
        record = dict(record, seed=args.seed)
    config = generator_config_from_record(record)
    out = _require_out(args)
    guest_range = tuple(args.guest_range) if args.guest_range else None
    dataset, world = generate(config, guest_range)
    dataset_path = out / "dataset.jsonl"
    world_path = out / "world.json"
    save_dataset(dataset, dataset_path)
    save_world(world, world_path)
    funnel = summarize(dataset)
    _write_json(out / "funnel.json", funnel.to_record())
    manifest = RunManifest(
        command="gen", version=__version__, seed=[config.seed],
        config=generator_config_to_record(config),
        inputs={"config": str(config_path)},
        input_hashes={"config": file_sha256(config_path)},
        outputs=[str(dataset_path), str(world_path),
                 str(out / "funnel.json")])
    write_manifest(out, manifest)
    counts = funnel.milestone_counts
    table = "\n".join([
        f"journeys    {funnel.n_journeys}",
        f"searches    {funnel.n_searches}",
        f"impressions {funnel.n_impressions}",
        "funnel      " + " ".join(f"{m}={counts[m]}"
                                  for m in ("c", "lc", "pp", "req", "book",
                                            "unc", "rej", "cbh", "cbg")),
    ])
    _emit(args, funnel.to_record(), table)
    return EXIT_OK


def cmd_train(args) -> int:
    record, config_path = _load_json_config(args.model_config)
    if args.seed is not None:
        record = dict(record, seed=args.seed)
    config = model_config_from_record(record)
    dataset, dataset_path = _load_valid_dataset(args.dataset)
    if args.filter:
        dataset = filter_training_searches(dataset).dataset
    out = _require_out(args)
    model, history = train(config, dataset, args.epochs,
                           batch_size=args.batch_size,
                           learning_rate=args.learning_rate)
    model_dir = out / "model"
    save_model(model, model_dir)
    loss_keys = ["base", "twiddler", "combination", "total"]
    csv_lines = ["epoch," + ",".join(loss_keys)]
    for stats in history:
        cells = [f"{stats.losses[k]!r}" if k in stats.losses else ""
                 for k in loss_keys]
        csv_lines.append(f"{stats.epoch}," + ",".join(cells))
    _write_text(out / "loss_history.csv", "\n".join(csv_lines))
    manifest = RunManifest(
        command="train", version=__version__, seed=[config.seed],
        config=model_config_to_record(config),
        inputs={"model_config": str(config_path),
                "dataset": str(dataset_path)},
        input_hashes={"model_config": file_sha256(config_path),
                      "dataset": file_sha256(dataset_path)},
        outputs=[str(model_dir / "params.json"),
                 str(model_dir / "params.bin"),
                 str(out / "loss_history.csv")])
    write_manifest(out, manifest)
    payload = {"epochs": args.epochs,
               "final_losses": history[-1].losses if history else {},
               "model_dir": str(model_dir)}
    final = (f"final losses: {history[-1].losses}" if history
             else "no training epochs requested")
    _emit(args, payload, f"trained {args.epochs} epochs\n{final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    dataset, dataset_path = _load_valid_dataset(args.dataset)
    out = _require_out(args)
    reports = ev.evaluate(model, dataset)
    payload = {task: rep.to_record() for task, rep in reports.items()}
    _write_json(out / "ndcg.json", payload)
    table = ev.format_ndcg_table(reports)
    _write_text(out / "ndcg.txt", table)
    manifest = RunManifest(
        command="eval", version=__version__,
        seed=[model.config.seed],
        config=model_config_to_record(model.config),
        inputs={"model": str(args.model), "dataset": str(dataset_path)},
        input_hashes={"model": file_sha256(Path(args.model) / "params.bin"),
                      "dataset": file_sha256(dataset_path)},
        outputs=[str(out / "ndcg.json"), str(out / "ndcg.txt")])
    write_manifest(out, manifest)
    _emit(args, payload, table)
    return EXIT_OK


def cmd_compare(args) -> int:
    record_a, path_a = _load_json_config(args.model_config_a)
    record_b, path_b = _load_json_config(args.model_config_b)
    config_a = model_config_from_record(record_a)
    config_b = model_config_from_record(record_b)
    dataset, dataset_path = _load_valid_dataset(args.dataset)
    seeds = _parse_seeds(args.seeds)
    out = _require_out(args)
    report = ev.compare(config_a, config_b, dataset, seeds,
                        settings=_settings(args),
                        label_a=args.label_a, label_b=args.label_b,
                        jobs=args.jobs)
    _write_json(out / "compare.json", report.to_record())
    table = ev.format_compare_table(report)
    _write_text(out / "compare.txt", table)
    manifest = RunManifest(
        command="compare", version=__version__, seed=list(seeds),
        config={"model_a": model_config_to_record(config_a),
                "model_b": model_config_to_record(config_b),
                "settings": asdict(_settings(args))},
        inputs={"model_config_a": str(path_a), "model_config_b": str(path_b),
                "dataset": str(dataset_path)},
        input_hashes={"model_config_a": file_sha256(path_a),
                      "model_config_b": file_sha256(path_b),
                      "dataset": file_sha256(dataset_path)},
        outputs=[str(out / "compare.json"), str(out / "compare.txt")])
    write_manifest(out, manifest)
    _emit(args, report.to_record(), table)
    return EXIT_OK


def cmd_ablate(args) -> int:
    dataset, dataset_path = _load_valid_dataset(args.dataset)
    seeds = _parse_seeds(args.seeds)
    out = _require_out(args)
    cells = ev.run_ablation(dataset, seeds, settings=_settings(args),
                            embedding_dim=args.embedding_dim,
                            jobs=args.jobs)
    payload = [cell.to_record() for cell in cells]
    _write_json(out / "ablation.json", payload)
    table = ev.format_ablation_table(cells)
    _write_text(out / "ablation.txt", table)
    manifest = RunManifest(
        command="ablate", version=__version__, seed=list(seeds),
        config={"embedding_dim": args.embedding_dim,
                "settings": asdict(_settings(args)),
                "cells": [[name, list(tasks)]
                          for name, tasks in ev.ABLATION_CELLS]},
        inputs={"dataset": str(dataset_path)},
        input_hashes={"dataset": file_sha256(dataset_path)},
        outputs=[str(out / "ablation.json"), str(out / "ablation.txt")])
    write_manifest(out, manifest)
    _emit(args, {"cells": payload}, table)
    return EXIT_OK


def cmd_ntc(args) -> int:
    model = load_model(args.model)
    dataset, dataset_path = _load_valid_dataset(args.dataset)
    out = _require_out(args)
    curve = ev.ntc_curves(model, dataset, args.feature,
                          n_buckets=args.buckets,
                          normalize_by_first=args.normalize)
    _write_json(out / "ntc.json", curve.to_record())
    ev.write_ntc_csv(curve, out / "ntc.csv")
    table = ev.format_ntc_table(curve)
    _write_text(out / "ntc.txt", table)
    manifest = RunManifest(
        command="ntc", version=__version__, seed=[model.config.seed],
        config={"feature": args.feature, "buckets": args.buckets,
                "normalize": args.normalize},
        inputs={"model": str(args.model), "dataset": str(dataset_path)},
        input_hashes={"model": file_sha256(Path(args.model) / "params.bin"),
                      "dataset": file_sha256(dataset_path)},
        outputs=[str(out / "ntc.json"), str(out / "ntc.csv"),
                 str(out / "ntc.txt")])
    write_manifest(out, manifest)
    _emit(args, curve.to_record(), table)
    return EXIT_OK


def cmd_validate(args) -> int:
    path = Path(args.dataset)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    dataset = load_dataset(path)
    report = validate_dataset(dataset)
    payload = report.to_record()
    if report.accepted:
        table = (f"dataset ok: {report.n_journeys} journeys, "
                 f"{report.n_searches} searches, "
                 f"{report.n_impressions} impressions")
    else:
        lines = [f"dataset rejected with "
                 f"{sum(report.violations.values())} violations:"]
        for kind, count in sorted(report.violations.items()):
            lines.append(f"  {kind}: {count}")
        table = "\n".join(lines)
    _emit(args, payload, table)
    return EXIT_OK if report.accepted else EXIT_DATA


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(sub):
    sub.add_argument("--out", default=None,
                     help="output directory for files and the run manifest")
    sub.add_argument("--json", action="store_true",
                     help="print machine-readable JSON instead of tables")
    sub.add_argument("--jobs", type=int, default=1,
                     help="parallel worker processes for independent runs")


def _add_protocol_flags(sub):
    sub.add_argument("--seeds", default="0,1,2,3,4",
                     help="comma-separated training seeds")
    sub.add_argument("--epochs", type=int, default=8)
    sub.add_argument("--batch-size", type=int, default=128)
    sub.add_argument("--learning-rate", type=float, default=1e-3)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="journeyrank",
                     description="Multi-task journey ranking toolkit")
    parser.add_argument("--version", action="version",
                        version=f"journeyrank {__version__}")
    subs = parser.add_subparsers(dest="command", required=True,
                                 parser_class=_Parser)

    gen = subs.add_parser("gen", help="simulate a labeled journey dataset")
    gen.add_argument("--config", required=True,
                     help="JSON file of generator settings")
    gen.add_argument("--seed", type=int, default=None,
                     help="override the seed key in --config")
    gen.add_argument("--guest-range", type=int, nargs=2, default=None,
                     metavar=("LO", "HI"),
                     help="generate only guests [LO, HI) for sharding")
    _add_common(gen)
    gen.set_defaults(func=cmd_gen)

    tr = subs.add_parser("train", help="train one model on a dataset")
    tr.add_argument("--model-config", required=True,
                    help="JSON file of model architecture settings")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--seed", type=int, default=None,
                    help="override the seed key in --model-config")
    tr.add_argument("--epochs", type=int, default=8)
    tr.add_argument("--batch-size", type=int, default=128)
    tr.add_argument("--learning-rate", type=float, default=1e-3)
    tr.add_argument("--filter", action=argparse.BooleanOptionalAction,
                    default=True,
                    help="restrict training to payment-page journeys")
    _add_common(tr)
    tr.set_defaults(func=cmd_train)

    ea = subs.add_parser("eval", help="NDCG report for a trained model")
    ea.add_argument("--model", required=True,
                    help="model directory written by the train command")
    ea.add_argument("--dataset", required=True)
    _add_common(ea)
    ea.set_defaults(func=cmd_eval)

    cp = subs.add_parser("compare",
                         help="paired multi-seed comparison of two configs")
    cp.add_argument("--model-config-a", required=True)
    cp.add_argument("--model-config-b", required=True)
    cp.add_argument("--dataset", required=True)
    cp.add_argument("--label-a", default="A")
    cp.add_argument("--label-b", default="B")
    _add_protocol_flags(cp)
    _add_common(cp)
    cp.set_defaults(func=cmd_compare)

    ab = subs.add_parser("ablate",
                         help="train the funnel task-set ablation grid")
    ab.add_argument("--dataset", required=True)
    ab.add_argument("--embedding-dim", type=int, default=12)
    _add_protocol_flags(ab)
    _add_common(ab)
    ab.set_defaults(func=cmd_ablate)

    nt = subs.add_parser("ntc",
                         help="blend-coefficient curves over context buckets")
    nt.add_argument("--model", required=True)
    nt.add_argument("--dataset", required=True)
    nt.add_argument("--feature", required=True,
                    help="context feature name to bucket by")
    nt.add_argument("--buckets", type=int, default=5)
    nt.add_argument("--normalize", action="store_true",
                    help="divide every bucket by the first bucket's value")
    _add_common(nt)
    nt.set_defaults(func=cmd_ntc)

    va = subs.add_parser("validate",
                         help="check dataset invariants and report counts")
    va.add_argument("--dataset", required=True)
    va.add_argument("--json", action="store_true")
    va.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        print(f"journeyrank: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataValidationError, SchemaMismatchError) as exc:
        print(f"journeyrank: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ShapeError, ContractError,
            UndefinedTaskWeightError) as exc:
        print(f"journeyrank: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except JourneyRankError as exc:
        print(f"journeyrank: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
