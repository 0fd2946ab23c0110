"""Operator-facing command line: train-ge, customize, sweep, overhead, eval, report.

Every command is deterministic given the same config and seed: all randomness
fans out from the root seed through named sub-seeds, so reruns produce
byte-identical checkpoints, metrics, traces, and tables.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig
from .costs import CostConfig, CostError, format_report_table, overhead_report
from .data import (
    DatasetError,
    IdxError,
    LabeledSet,
    balance_classes,
    gn_mixture,
    load_idx,
    make_profile,
    split_validation,
    synthesize_user,
    write_manifest,
)
from .moe import MoeModel, trace_records, write_trace
from .networks import Network, SpecError, build_ge, build_gn, build_le
from .sweep import SweepError, SweepInputs, overhead_rows, select_config, sweep, write_sweep_csv, write_sweep_json
from .tensor import FrozenParamsError, ShapeError
from .training import TrainingError, evaluate_components, train_ge, train_gn, train_le

CliErrors = (
    CheckpointError,
    ConfigError,
    CostError,
    DatasetError,
    IdxError,
    SpecError,
    SweepError,
    TrainingError,
    FrozenParamsError,
    ShapeError,
    FileNotFoundError,
)


def _json_dump(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _update_manifest(out: Path, section: str, entries: dict) -> None:
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.setdefault(section, {}).update(entries)
    _json_dump(path, manifest)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; {hint}")
    return path


def _load_datasets(cfg: ExperimentConfig):
    """Load the generic corpus, balance it, and carve out the user source pool."""
    paths = {k: cfg.get_str(f"data.{k}") for k in ("train_images", "train_labels", "test_images", "test_labels")}
    for key, p in paths.items():
        if not p:
            raise ConfigError(f"config key 'data.{key}' is required")
        if not Path(p).exists():
            raise IdxError(f"no such file: {p} (config key data.{key})")
    classes = cfg.get_int("classes")
    train = load_idx(paths["train_images"], paths["train_labels"], class_count=classes)
    test = load_idx(paths["test_images"], paths["test_labels"], class_count=classes)
    balanced = balance_classes(train, cfg.sub("balance"))
    pool_fraction = cfg.get_float("data.user_pool_fraction")
    ge_pool, user_pool = split_validation(balanced, pool_fraction, cfg.sub("user_pool"))
    return {"ge_train": ge_pool, "user_pool": user_pool, "generic_test": test}


def _load_ge(cfg: ExperimentConfig, out: Path) -> Network:
    path = _require(out / "ge.moew", "run the train-ge command first")
    ge = Network.build(build_ge(cfg.get_int("classes")), seed=0)
    ge.load_state(checkpoint.load_params(path))
    ge.freeze()
    return ge


def _user_data(cfg: ExperimentConfig, user_pool: LabeledSet, user_id: int):
    profile = make_profile(user_id, cfg.seed)
    return profile, synthesize_user(
        user_pool, profile, cfg.get_int("user.train_per_class"), cfg.get_int("user.test_per_class")
    )


def _user_ids(cfg: ExperimentConfig) -> list[int]:
    return list(range(1, cfg.get_int("users") + 1))


def cmd_train_ge(cfg: ExperimentConfig, out: Path) -> None:
    data = _load_datasets(cfg)
    ge, report = train_ge(data["ge_train"], cfg.train_config("ge", "ge"))
    ckpt = out / "ge.moew"
    checkpoint.save_params(ckpt, ge.param_list())
    report.checkpoint = str(ckpt)
    _json_dump(out / "ge_report.json", report.to_dict())
    write_manifest(
        out / "dataset_manifest.json",
        {
            "seed": cfg.seed,
            "ge_train": data["ge_train"].manifest(),
            "user_pool": data["user_pool"].manifest(),
            "generic_test": data["generic_test"].manifest(),
        },
    )
    _update_manifest(out, "train_ge", {"checkpoint": str(ckpt), "report": str(out / "ge_report.json")})
    print(f"trained GE: checkpoint {ckpt}, best epoch {report.best_epoch + 1}/{len(report.epochs)}")


def cmd_customize(cfg: ExperimentConfig, out: Path) -> None:
    data = _load_datasets(cfg)
    ge = _load_ge(cfg, out)
    records = []
    artifacts = {}
    for user_id in _user_ids(cfg):
        profile, (user_train, user_test) = _user_data(cfg, data["user_pool"], user_id)
        le = Network.build(build_le(cfg.get_int("le.n"), cfg.get_int("classes")), seed=cfg.sub(f"user.{user_id}.le.init"))
        gn = Network.build(build_gn(cfg.get_int("gn.m")), seed=cfg.sub(f"user.{user_id}.gn.init"))
        le_report = train_le(ge, le, user_train, cfg.train_config("head", f"user.{user_id}.le"))
        mixture = gn_mixture(user_train, data["ge_train"], cfg.sub(f"user.{user_id}.gn.mixture"))
        gn_report = train_gn(ge, gn, mixture, cfg.train_config("head", f"user.{user_id}.gn"))

        moe = MoeModel.assemble(ge, le, gn)
        metrics = {"user_id": user_id, **evaluate_components(moe, user_test, data["generic_test"])}
        records.append(metrics)

        stem = out / f"user{user_id}"
        checkpoint.save_params(f"{stem}.le.moew", le.param_list())
        checkpoint.save_params(f"{stem}.gn.moew", gn.param_list())
        _json_dump(Path(f"{stem}.metrics.json"), metrics)
        _json_dump(Path(f"{stem}.train_reports.json"), {"le": le_report.to_dict(), "gn": gn_report.to_dict()})
        write_trace(f"{stem}.trace.customized.jsonl", trace_records(moe, user_test))
        write_trace(f"{stem}.trace.generic.jsonl", trace_records(moe, data["generic_test"]))
        artifacts[f"user{user_id}"] = {
            "le": f"{stem}.le.moew",
            "gn": f"{stem}.gn.moew",
            "metrics": f"{stem}.metrics.json",
            "profile": [[k, m] for k, m in profile.transform_chain],
        }
        print(
            f"user {user_id}: GE {metrics['ge_customized']:.3f} -> overall {metrics['overall_customized']:.3f} "
            f"(generic {metrics['overall_generic']:.3f})"
        )

    avg = {"user_id": "avg"}
    for key in records[0]:
        if key == "user_id":
            continue
        vals = [r[key] for r in records if r[key] is not None]
        avg[key] = sum(vals) / len(vals) if vals else None
    _json_dump(out / "customize_metrics.json", {"users": records, "average": avg})
    _update_manifest(out, "customize", artifacts)


def cmd_sweep(cfg: ExperimentConfig, out: Path, dry_run: bool) -> None:
    candidates = cfg.get_int_list("sweep.candidates")
    if dry_run:
        rows = overhead_rows(candidates, class_count=cfg.get_int("classes"))
    else:
        data = _load_datasets(cfg)
        ge = _load_ge(cfg, out)
        _, (user_train, user_test) = _user_data(cfg, data["user_pool"], user_id=1)
        inputs = SweepInputs(
            ge=ge,
            customized_train=user_train,
            customized_test=user_test,
            generic_pool=data["ge_train"],
            generic_test=data["generic_test"],
        )
        rows = sweep(candidates, inputs, cfg.train_config("head", "sweep"))
    write_sweep_csv(rows, out / "sweep.csv")
    write_sweep_json(rows, out / "sweep.json")
    _update_manifest(out, "sweep", {"csv": str(out / "sweep.csv"), "dry_run": dry_run})
    if not dry_run:
        chosen = select_config(rows, cfg.get_float("sweep.tolerance"))
        _update_manifest(out, "sweep", {"selected_n": chosen})
        print(f"selected configuration: n = {chosen}")
    print(f"sweep table written to {out / 'sweep.csv'}")


def cmd_overhead(cfg: ExperimentConfig, out: Path) -> None:
    # counting reflects the deployed geometry (stock 62-way GE) regardless of
    # the desk-scale training class count; override via overhead.classes
    classes = cfg.get_int("overhead.classes") if "overhead.classes" in cfg.values else 62
    cost_cfg = CostConfig(
        energy_per_mac=cfg.get_float("cost.energy_per_mac"),
        energy_per_sram_access=cfg.get_float("cost.energy_per_sram"),
        energy_per_dram_access=cfg.get_float("cost.energy_per_dram"),
        sram_model=cfg.get_str("cost.sram_model"),
        dram_model=cfg.get_str("cost.dram_model"),
    )
    report = overhead_report(
        build_ge(classes), build_le(cfg.get_int("le.n"), classes), build_gn(cfg.get_int("gn.m")), cost_cfg
    )
    (out / "overhead.txt").write_text(format_report_table(report) + "\n")
    (out / "overhead.json").write_text(report.to_json() + "\n")
    _update_manifest(out, "overhead", {"json": str(out / "overhead.json")})
    print(format_report_table(report))


def cmd_eval(cfg: ExperimentConfig, out: Path) -> None:
    data = _load_datasets(cfg)
    ge = _load_ge(cfg, out)
    for user_id in _user_ids(cfg):
        stem = out / f"user{user_id}"
        le = Network.build(build_le(cfg.get_int("le.n"), cfg.get_int("classes")), seed=0)
        le.load_state(checkpoint.load_params(_require(Path(f"{stem}.le.moew"), "run the customize command first")))
        gn = Network.build(build_gn(cfg.get_int("gn.m")), seed=0)
        gn.load_state(checkpoint.load_params(_require(Path(f"{stem}.gn.moew"), "run the customize command first")))
        _, (_, user_test) = _user_data(cfg, data["user_pool"], user_id)
        moe = MoeModel.assemble(ge, le, gn)
        write_trace(f"{stem}.trace.customized.jsonl", trace_records(moe, user_test))
        write_trace(f"{stem}.trace.generic.jsonl", trace_records(moe, data["generic_test"]))
        print(f"user {user_id}: traces written to {stem}.trace.*.jsonl")


def cmd_report(cfg: ExperimentConfig, out: Path) -> None:
    """Render figures and a delimited summary from whatever artifacts exist."""
    from . import figures
    from .sweep import SweepRow

    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    produced = []

    sweep_json = out / "sweep.json"
    if sweep_json.exists():
        rows = [
            SweepRow(r["n"], r["network_size_pct"], r["customized_accuracy"], r["generic_accuracy"])
            for r in json.loads(sweep_json.read_text())
        ]
        figures.sweep_figure(rows, fig_dir / "sweep.png")
        produced.append(fig_dir / "sweep.png")

    metrics_json = out / "customize_metrics.json"
    summary_rows = []
    if metrics_json.exists():
        payload = json.loads(metrics_json.read_text())
        records = payload["users"] + [payload["average"]]
        figures.metrics_figure(payload["users"], fig_dir / "user_metrics.png")
        produced.append(fig_dir / "user_metrics.png")
        summary_rows = records

    overhead_json = out / "overhead.json"
    if overhead_json.exists():
        from .costs import OverheadReport

        raw = json.loads(overhead_json.read_text())
        report = OverheadReport(
            raw["weight_pct"], raw["mac_pct"], raw["sram_pct"], raw["dram_pct"], raw["energy_pct"], raw["counts"]
        )
        figures.overhead_figure(report, fig_dir / "overhead.png")
        produced.append(fig_dir / "overhead.png")

    ge_report = out / "ge_report.json"
    if ge_report.exists():
        figures.training_figure(json.loads(ge_report.read_text()), fig_dir / "ge_training.png")
        produced.append(fig_dir / "ge_training.png")

    if not produced:
        raise FileNotFoundError(f"nothing to report in {out}; run train-ge/customize/sweep/overhead first")

    summary = out / "report_summary.csv"
    with open(summary, "w") as f:
        cols = ["user_id", "ge_customized", "le_customized", "gn_customized", "overall_customized", "le_given_ge_wrong", "overall_generic"]
        f.write(",".join(cols) + "\n")
        for rec in summary_rows:
            f.write(",".join("" if rec.get(c) is None else str(rec.get(c)) for c in cols) + "\n")
    produced.append(summary)
    _update_manifest(out, "report", {"figures": [str(p) for p in produced]})
    for p in produced:
        print(f"wrote {p}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertmix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_dry in [
        ("train-ge", False),
        ("customize", False),
        ("sweep", True),
        ("overhead", False),
        ("eval", False),
        ("report", False),
    ]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value experiment config file")
        p.add_argument("--out", default="runs/exp", help="experiment output directory")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument("--classes", type=int, default=None, help="override the class count")
        p.add_argument("--users", type=int, default=None, help="override the user count")
        if needs_dry:
            p.add_argument("--dry-run", action="store_true", help="counting only, no training")
    return parser


COMMANDS = {
    "train-ge": cmd_train_ge,
    "customize": cmd_customize,
    "overhead": cmd_overhead,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(
            _require(Path(args.config), "pass --config with an experiment file"),
            overrides={"seed": args.seed, "classes": args.classes, "users": args.users},
        )
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _update_manifest(out, "experiment", {"config": str(args.config), "seed": cfg.seed})
        if args.command == "sweep":
            cmd_sweep(cfg, out, args.dry_run)
        else:
            COMMANDS[args.command](cfg, out)
    except CliErrors as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
