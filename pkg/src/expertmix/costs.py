"""Analytic hardware cost accounting over network specs.

Weights and MACs are exact integer counts derived from layer geometry.
Memory traffic uses simple configurable access models: DRAM fetches each
weight once per inference (weights_only); SRAM additionally counts every
activation tensor a network produces (weights_plus_activations). The SRAM
and total-energy figures depend on those model choices and on the relative
per-access energies, so they are approximate by construction and flagged as
such in every report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .networks import NetworkSpec

SRAM_MODELS = ("weights_plus_activations", "weights_only")
DRAM_MODELS = ("weights_only",)


class CostError(ValueError):
    pass


@dataclass
class CostConfig:
    """Relative per-access energies plus the memory access-count models."""

    energy_per_mac: float = 1.0
    energy_per_sram_access: float = 6.0
    energy_per_dram_access: float = 200.0
    sram_model: str = "weights_plus_activations"
    dram_model: str = "weights_only"

    def __post_init__(self):
        for name in ("energy_per_mac", "energy_per_sram_access", "energy_per_dram_access"):
            if getattr(self, name) < 0:
                raise CostError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.sram_model not in SRAM_MODELS:
            raise CostError(f"unknown sram_model '{self.sram_model}'")
        if self.dram_model not in DRAM_MODELS:
            raise CostError(f"unknown dram_model '{self.dram_model}'")


def count_weights(spec: NetworkSpec) -> int:
    """Distinct parameters, biases excluded (the network-size metric)."""
    return spec.weight_count()


def count_macs(spec: NetworkSpec) -> int:
    """Multiplies per inference; pooling and activations contribute none."""
    shapes = spec.shape_chain(validate_output=False)
    return sum(layer.mac_count(shapes[i]) for i, layer in enumerate(spec.layers))


def count_activations(spec: NetworkSpec) -> int:
    """Elements of every activation tensor the network itself produces."""
    shapes = spec.shape_chain(validate_output=False)
    total = 0
    for shape in shapes[1:]:
        n = 1
        for d in shape:
            n *= d
        total += n
    return total


def count_sram(spec: NetworkSpec, model: str = "weights_plus_activations") -> int:
    if model == "weights_only":
        return count_weights(spec)
    if model == "weights_plus_activations":
        return count_weights(spec) + count_activations(spec)
    raise CostError(f"unknown sram_model '{model}'")


def count_dram(spec: NetworkSpec, model: str = "weights_only") -> int:
    if model == "weights_only":
        return count_weights(spec)
    raise CostError(f"unknown dram_model '{model}'")


def total_energy(spec: NetworkSpec, cfg: CostConfig) -> float:
    """Sum of per-category access counts times their relative energies."""
    return (
        count_macs(spec) * cfg.energy_per_mac
        + count_sram(spec, cfg.sram_model) * cfg.energy_per_sram_access
        + count_dram(spec, cfg.dram_model) * cfg.energy_per_dram_access
    )


@dataclass
class OverheadReport:
    """(LE+GN) / GE for each quantity, as percentages."""

    weight_pct: float
    mac_pct: float
    sram_pct: float
    dram_pct: float
    energy_pct: float
    counts: dict
    sram_note: str = "SRAM and total depend on the configured access model and are approximate"

    def to_dict(self) -> dict:
        return {
            "weight_pct": self.weight_pct,
            "mac_pct": self.mac_pct,
            "sram_pct": self.sram_pct,
            "dram_pct": self.dram_pct,
            "energy_pct": self.energy_pct,
            "counts": self.counts,
            "sram_note": self.sram_note,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def overhead_report(ge: NetworkSpec, le: NetworkSpec, gn: NetworkSpec, cfg: CostConfig | None = None) -> OverheadReport:
    """All five overhead ratios of the two added heads relative to GE."""
    cfg = cfg or CostConfig()
    quantities = {
        "weights": count_weights,
        "macs": count_macs,
        "sram": lambda s: count_sram(s, cfg.sram_model),
        "dram": lambda s: count_dram(s, cfg.dram_model),
        "energy": lambda s: total_energy(s, cfg),
    }
    counts: dict = {}
    ratios: dict = {}
    for name, fn in quantities.items():
        base = fn(ge)
        added = fn(le) + fn(gn)
        if base == 0:
            raise CostError(f"GE {name} count is zero; overhead undefined")
        counts[name] = {"ge": base, "le_plus_gn": added}
        ratios[name] = 100.0 * added / base
    return OverheadReport(
        weight_pct=ratios["weights"],
        mac_pct=ratios["macs"],
        sram_pct=ratios["sram"],
        dram_pct=ratios["dram"],
        energy_pct=ratios["energy"],
        counts=counts,
    )


def format_report_table(report: OverheadReport) -> str:
    """Aligned text table: network size, then MAC / SRAM / DRAM / total energy."""
    head1 = f"{'network size':<14}| overhead in energy consumption"
    head2 = f"{'|LE+GN|/|GE|':<14}| {'MAC':>8} {'SRAM*':>8} {'DRAM':>8} {'total':>8}"
    row = (
        f"{report.weight_pct:>11.2f}%  | "
        f"{report.mac_pct:>7.2f}% {report.sram_pct:>7.2f}% {report.dram_pct:>7.2f}% {report.energy_pct:>7.2f}%"
    )
    note = f"* {report.sram_note}"
    return "\n".join([head1, head2, row, note])
