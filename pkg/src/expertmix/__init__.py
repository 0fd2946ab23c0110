"""Low-cost local customization of a trained CNN: a frozen global expert, a
lightweight local expert, and a gating network sharing the expert's early
features through a tap."""

from .checkpoint import CheckpointError, load_params, params_digest, save_params
from .costs import CostConfig, OverheadReport, count_dram, count_macs, count_sram, count_weights, overhead_report, total_energy
from .data import (
    LabeledSet,
    UserProfile,
    balance_classes,
    generate_corpus,
    gn_mixture,
    load_idx,
    make_profile,
    split_validation,
    subseed,
    synthesize_user,
    write_idx,
)
from .moe import (
    GateDecision,
    MoeModel,
    RegionPartition,
    blend,
    complement_metric,
    gate,
    ideal_gate_accuracy,
    infer,
    partition_regions,
    trace_records,
)
from .networks import FeatureTap, LayerSpec, Network, NetworkSpec, build_ge, build_gn, build_le, forward_with_tap, ge_feature_tap, tap_features
from .sweep import SweepInputs, SweepRow, overhead_rows, select_config, sweep
from .tensor import (
    LayerParams,
    ShapeError,
    Tape,
    backward,
    conv2d,
    counters,
    fully_connected,
    maxpool,
    relu,
    sgd_step,
    softmax_cross_entropy,
)
from .training import (
    TrainConfig,
    TrainReport,
    evaluate_components,
    finetune_baseline,
    train_alternative,
    train_ge,
    train_gn,
    train_le,
)

__version__ = "0.1.0"
