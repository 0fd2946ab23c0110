"""Design-space sweep over the pooled feature-map side length shared by the
local expert and the gating head, and selection of the deployment point.

Each candidate retrains LE and GN from fresh seeds against the same frozen
GE, so rows are independent of one another and of candidate order. The
overhead column is pure weight counting and is available without training
(dry-run mode).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

from .costs import count_weights
from .data import LabeledSet, gn_mixture, subseed
from .moe import MoeModel, trace_records
from .networks import Network, build_ge, build_gn, build_le
from .training import TrainConfig, train_gn, train_le


class SweepError(ValueError):
    pass


@dataclass
class SweepRow:
    """One sweep result; accuracies are percentages, like the CSV output."""

    n: int
    weight_overhead_pct: float
    customized_accuracy: Optional[float]
    generic_accuracy: Optional[float]

    def feature_map_label(self) -> str:
        return f"{self.n}x{self.n}x20"


@dataclass
class SweepInputs:
    ge: Network
    customized_train: LabeledSet
    customized_test: LabeledSet
    generic_pool: LabeledSet
    generic_test: LabeledSet


def _overhead_pct(n: int, class_count: int) -> float:
    ge_spec = build_ge(class_count)
    added = count_weights(build_le(n, class_count)) + count_weights(build_gn(n))
    return 100.0 * added / count_weights(ge_spec)


def overhead_rows(candidate_ns: list[int], class_count: int = 62) -> list[SweepRow]:
    """Counting-only rows (the dry-run path); no checkpoints needed."""
    rows = [SweepRow(n, _overhead_pct(n, class_count), None, None) for n in candidate_ns]
    rows.sort(key=lambda r: -r.n)
    return rows


def sweep(candidate_ns: list[int], inputs: SweepInputs, cfg: TrainConfig) -> list[SweepRow]:
    """Train and evaluate one LE/GN pair per candidate side length.

    Rows come back ordered by descending n. Deterministic under cfg.seed:
    every candidate gets its own named sub-seeds, so permuting the candidate
    list changes nothing.
    """
    if not inputs.ge.trained or not inputs.ge.is_frozen():
        raise SweepError("sweep requires a trained, frozen GE")
    class_count = inputs.customized_train.class_count
    mixture = gn_mixture(inputs.customized_train, inputs.generic_pool, subseed(cfg.seed, "sweep.mixture"))

    rows = []
    for n in sorted(set(candidate_ns), reverse=True):
        le = Network.build(build_le(n, class_count), seed=subseed(cfg.seed, f"sweep.n{n}.le"))
        gn = Network.build(build_gn(n), seed=subseed(cfg.seed, f"sweep.n{n}.gn"))
        le_cfg = TrainConfig(**{**vars(cfg), "seed": subseed(cfg.seed, f"sweep.n{n}.le.fit")})
        gn_cfg = TrainConfig(**{**vars(cfg), "seed": subseed(cfg.seed, f"sweep.n{n}.gn.fit")})
        train_le(inputs.ge, le, inputs.customized_train, le_cfg)
        train_gn(inputs.ge, gn, mixture, gn_cfg)
        moe = MoeModel.assemble(inputs.ge, le, gn)
        cust = trace_records(moe, inputs.customized_test)
        gen = trace_records(moe, inputs.generic_test)
        rows.append(
            SweepRow(
                n=n,
                weight_overhead_pct=_overhead_pct(n, class_count),
                customized_accuracy=100.0 * sum(r["final_pred"] == r["label"] for r in cust) / len(cust),
                generic_accuracy=100.0 * sum(r["final_pred"] == r["label"] for r in gen) / len(gen),
            )
        )
    return rows


def select_config(rows: list[SweepRow], accuracy_tolerance: float = 1.0) -> int:
    """Smallest-overhead candidate whose customized accuracy is within
    accuracy_tolerance points of the best row. Monotone in the tolerance."""
    if not rows:
        raise SweepError("select_config on empty sweep results")
    scored = [r for r in rows if r.customized_accuracy is not None]
    if not scored:
        raise SweepError("select_config needs accuracy columns; run a full sweep")
    best = max(r.customized_accuracy for r in scored)
    eligible = [r for r in scored if r.customized_accuracy >= best - accuracy_tolerance]
    return min(eligible, key=lambda r: r.weight_overhead_pct).n


CSV_COLUMNS = ["input_feature_map", "network_size_pct", "customized_accuracy", "generic_accuracy"]


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    r.feature_map_label(),
                    f"{r.weight_overhead_pct:.2f}",
                    "" if r.customized_accuracy is None else f"{r.customized_accuracy:.2f}",
                    "" if r.generic_accuracy is None else f"{r.generic_accuracy:.2f}",
                ]
            )


def write_sweep_json(rows: list[SweepRow], path) -> None:
    payload = [
        {
            "n": r.n,
            "input_feature_map": r.feature_map_label(),
            "network_size_pct": r.weight_overhead_pct,
            "customized_accuracy": r.customized_accuracy,
            "generic_accuracy": r.generic_accuracy,
        }
        for r in rows
    ]
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
