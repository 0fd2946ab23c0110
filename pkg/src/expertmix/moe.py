"""Gating semantics, end-to-end mixture inference, and region accounting.

The gate is a binary argmax over the gating head's two outputs (index 0 means
route to the global expert, index 1 to the local expert); the blend is the
general weighted form, which collapses to pure selection for binary weights.
A labeled dataset splits into four regions by (GE correct?, LE correct?):
r1 both right, r2 only LE right, r3 only GE right, r4 both wrong.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabeledSet
from .networks import FeatureTap, Network, forward_with_tap, ge_feature_tap, tap_features
from .tensor import ShapeError


class GatingError(ValueError):
    pass


@dataclass
class GateDecision:
    w_g: float
    w_l: float
    selected: str  # 'GE' or 'LE'


def gate(gn_logits) -> GateDecision:
    """Binary selection by argmax of the two gating outputs; ties go to GE,
    the conservative choice that preserves generic-data behavior."""
    logits = np.asarray(gn_logits, dtype=np.float64)
    if logits.shape != (2,):
        raise GatingError(f"gate expects exactly two logits, got shape {logits.shape}")
    if not np.isfinite(logits).all():
        raise GatingError(f"gate logits must be finite, got {logits}")
    if logits[1] > logits[0]:
        return GateDecision(0.0, 1.0, "LE")
    return GateDecision(1.0, 0.0, "GE")


def blend(ge_logits, le_logits, decision: GateDecision) -> np.ndarray:
    """w_g * GE output + w_l * LE output, elementwise."""
    ge_logits = np.asarray(ge_logits, dtype=np.float64)
    le_logits = np.asarray(le_logits, dtype=np.float64)
    if ge_logits.shape != le_logits.shape:
        raise ShapeError(f"blend length mismatch: {ge_logits.shape} vs {le_logits.shape}")
    return decision.w_g * ge_logits + decision.w_l * le_logits


@dataclass
class MoeModel:
    """Frozen GE, its feature tap, a trained LE and GN, and the binary gate."""

    ge: Network
    le: Network
    gn: Network
    tap: FeatureTap

    @staticmethod
    def assemble(ge: Network, le: Network, gn: Network) -> "MoeModel":
        return MoeModel(ge=ge, le=le, gn=gn, tap=ge_feature_tap(ge.spec))

    def require_trained(self) -> None:
        for net in (self.ge, self.le, self.gn):
            if not net.trained:
                raise GatingError(f"component '{net.spec.name}' is not trained or loaded")


def infer(moe: MoeModel, x):
    """Gate, blend, and classify one input.

    Returns (predicted class, GateDecision, (ge_logits, le_logits, gn_logits)).
    """
    moe.require_trained()
    ge_logits, le_logits, gn_logits, _ = forward_with_tap(moe.ge, moe.le, moe.gn, x, moe.tap)
    decision = gate(gn_logits)
    final = blend(ge_logits, le_logits, decision)
    return int(np.argmax(final)), decision, (ge_logits, le_logits, gn_logits)


def _batched_logits(moe: MoeModel, images: np.ndarray, chunk: int = 256):
    ge_parts, le_parts, gn_parts = [], [], []
    for lo in range(0, len(images), chunk):
        g, l, n, _ = forward_with_tap(moe.ge, moe.le, moe.gn, images[lo : lo + chunk], moe.tap)
        ge_parts.append(g)
        le_parts.append(l)
        gn_parts.append(n)
    return np.concatenate(ge_parts), np.concatenate(le_parts), np.concatenate(gn_parts)


@dataclass
class RegionPartition:
    """Disjoint index sets covering a labeled dataset."""

    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    r4: np.ndarray

    def total(self) -> int:
        return len(self.r1) + len(self.r2) + len(self.r3) + len(self.r4)


def partition_from_predictions(ge_pred, le_pred, labels) -> RegionPartition:
    """Region split given standalone predictions of both experts."""
    ge_pred = np.asarray(ge_pred)
    le_pred = np.asarray(le_pred)
    labels = np.asarray(labels)
    ge_ok = ge_pred == labels
    le_ok = le_pred == labels
    idx = np.arange(len(labels))
    return RegionPartition(
        r1=idx[ge_ok & le_ok],
        r2=idx[~ge_ok & le_ok],
        r3=idx[ge_ok & ~le_ok],
        r4=idx[~ge_ok & ~le_ok],
    )


def partition_regions(ge: Network, le: Network, tap: FeatureTap, ds: LabeledSet) -> RegionPartition:
    """Split a dataset by standalone GE and LE correctness."""
    feats = _chunked(lambda b: tap_features(ge, b, tap), ds.images)
    ge_pred = np.argmax(
        _chunked(lambda b: ge.forward_range(b, tap.source_layer + 1, len(ge.spec.layers)), feats), axis=1
    )
    le_pred = np.argmax(_chunked(le.forward, feats), axis=1)
    return partition_from_predictions(ge_pred, le_pred, ds.labels)


def _chunked(fn, arr, chunk: int = 256):
    return np.concatenate([fn(arr[lo : lo + chunk]) for lo in range(0, len(arr), chunk)])


def ideal_gate_accuracy(partition: RegionPartition) -> float:
    """Upper bound on mixture accuracy under a perfect gate: (|r1|+|r2|+|r3|)/N."""
    n = partition.total()
    if n == 0:
        raise GatingError("ideal_gate_accuracy of an empty dataset")
    return (len(partition.r1) + len(partition.r2) + len(partition.r3)) / n


def complement_metric(partition: RegionPartition) -> float:
    """LE accuracy restricted to GE's mistakes: |r2| / (|r2| + |r4|)."""
    wrong = len(partition.r2) + len(partition.r4)
    if wrong == 0:
        raise GatingError("complement metric undefined: GE is perfect on this dataset")
    return len(partition.r2) / wrong


REGION_NAMES = ("r1", "r2", "r3", "r4")


def trace_records(moe: MoeModel, ds: LabeledSet) -> list[dict]:
    """Per-sample inference trace; every reported metric is recomputable from it."""
    moe.require_trained()
    ge_logits, le_logits, gn_logits = _batched_logits(moe, ds.images)
    ge_pred = np.argmax(ge_logits, axis=1)
    le_pred = np.argmax(le_logits, axis=1)
    records = []
    for i in range(len(ds)):
        decision = gate(gn_logits[i])
        final = int(np.argmax(blend(ge_logits[i], le_logits[i], decision)))
        ge_ok = ge_pred[i] == ds.labels[i]
        le_ok = le_pred[i] == ds.labels[i]
        region = REGION_NAMES[(0 if ge_ok else 1) + (0 if le_ok else 2)]
        records.append(
            {
                "sample_id": int(i),
                "ge_pred": int(ge_pred[i]),
                "le_pred": int(le_pred[i]),
                "gate": decision.selected,
                "final_pred": final,
                "label": int(ds.labels[i]),
                "region": region,
            }
        )
    return records


def write_trace(path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]
