"""The three-step training procedure, the mistake-driven alternative mode,
and the fine-tuning baseline.

Step 1 trains the global expert on the generic set and freezes it. Steps 2
and 3 train only the fully connected layer of the local expert and of the
gating head, on tap features precomputed through the frozen GE. Both refuse
to run against an unfrozen GE.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import LabeledSet, split_validation, subseed, validation_indices
from .moe import MoeModel, complement_metric, partition_regions
from .networks import Network, NetworkSpec, build_ge, ge_feature_tap, tap_features


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 15
    validation_fraction: float = 0.1
    seed: int = 0
    early_stop_patience: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0 or self.momentum < 0 or self.batch_size <= 0:
            raise TrainingError("learning_rate/batch_size must be positive, momentum nonnegative")
        if self.epochs <= 0 or self.early_stop_patience <= 0:
            raise TrainingError("epochs and early_stop_patience must be positive")
        if not 0.0 < self.validation_fraction < 0.5:
            raise TrainingError(f"validation_fraction must be in (0, 0.5), got {self.validation_fraction}")


@dataclass
class EpochStats:
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainReport:
    epochs: list[EpochStats]
    best_epoch: int
    wall_clock_seconds: float
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {
            "epochs": [vars(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "wall_clock_seconds": self.wall_clock_seconds,
            "checkpoint": self.checkpoint,
        }


def _forward_logits(net: Network, inputs: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.concatenate([net.forward(inputs[lo : lo + chunk]) for lo in range(0, len(inputs), chunk)])


def _loss_accuracy(net: Network, inputs, labels) -> tuple[float, float]:
    logits = _forward_logits(net, inputs)
    loss, probs = T.softmax_cross_entropy(logits, labels)
    return loss, float(np.mean(np.argmax(probs, axis=1) == labels))


def _fit(net: Network, train_x, train_y, val_x, val_y, cfg: TrainConfig) -> TrainReport:
    if len(train_x) == 0:
        raise TrainingError("empty training set")
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    opt = T.Sgd(cfg.learning_rate, cfg.momentum)
    trainable = net.trainable()
    if not trainable:
        raise TrainingError(f"network '{net.spec.name}' has no trainable parameters")

    stats: list[EpochStats] = []
    best_acc, best_epoch, best_state, stale = -1.0, 0, net.snapshot(), 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_x))
        losses, hits, seen = 0.0, 0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            xb, yb = train_x[batch], train_y[batch]
            tape = T.Tape()
            logits = net.forward(xb, tape)
            loss, probs = T.softmax_cross_entropy(logits, yb, tape)
            result = T.backward(tape)
            for params in trainable:
                opt.step(params, result.grads[params.name])
            losses += loss * len(batch)
            hits += int(np.sum(np.argmax(probs, axis=1) == yb))
            seen += len(batch)
        val_loss, val_acc = _loss_accuracy(net, val_x, val_y)
        stats.append(EpochStats(losses / seen, hits / seen, val_loss, val_acc))
        if val_acc > best_acc:
            best_acc, best_epoch, best_state, stale = val_acc, epoch, net.snapshot(), 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    net.load_state(best_state)
    net.trained = True
    return TrainReport(stats, best_epoch, time.perf_counter() - start)


def train_ge(generic_train: LabeledSet, cfg: TrainConfig) -> tuple[Network, TrainReport]:
    """Step 1: train every GE layer on the generic set, then freeze them all."""
    if len(generic_train) == 0:
        raise TrainingError("generic training set is empty")
    ge = Network.build(build_ge(generic_train.class_count), seed=subseed(cfg.seed, "ge.init"))
    train, val = split_validation(generic_train, cfg.validation_fraction, subseed(cfg.seed, "ge.val"))
    report = _fit(ge, train.images, train.labels, val.images, val.labels, cfg)
    ge.freeze()
    return ge, report


def _tap_dataset(ge: Network, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    tap = ge_feature_tap(ge.spec)
    return np.concatenate([tap_features(ge, images[lo : lo + chunk], tap) for lo in range(0, len(images), chunk)])


def _require_frozen(ge: Network, step: str) -> None:
    if not ge.is_frozen():
        raise TrainingError(f"{step} requires a frozen GE; run train_ge first")


def _fit_head(ge: Network, head: Network, ds: LabeledSet, cfg: TrainConfig) -> TrainReport:
    # GE is frozen, so tap features are constants; compute them once up front
    feats = _tap_dataset(ge, ds.images)
    train_idx, val_idx = validation_indices(ds, cfg.validation_fraction, subseed(cfg.seed, f"{head.spec.name}.val"))
    return _fit(head, feats[train_idx], ds.labels[train_idx], feats[val_idx], ds.labels[val_idx], cfg)


def train_le(ge: Network, le: Network, customized_train: LabeledSet, cfg: TrainConfig) -> TrainReport:
    """Step 2: train only the LE fully connected layer on the user's data."""
    _require_frozen(ge, "train_le")
    return _fit_head(ge, le, customized_train, cfg)


def train_gn(ge: Network, gn: Network, mixture: LabeledSet, cfg: TrainConfig) -> TrainReport:
    """Step 3: train only the GN fully connected layer on the origin mixture."""
    _require_frozen(ge, "train_gn")
    if mixture.class_count != 2 or (len(mixture) and mixture.labels.max() > 1):
        raise TrainingError("train_gn expects binary origin labels (0 generic, 1 customized)")
    return _fit_head(ge, gn, mixture, cfg)


def train_alternative(
    ge: Network,
    le: Network,
    gn: Network,
    customized_train: LabeledSet,
    generic_pool: LabeledSet,
    cfg: TrainConfig,
) -> dict[str, TrainReport]:
    """Mistake-driven mode: LE learns only the samples GE gets wrong, and GN
    learns to detect GE mistakes (negatives include an equal slice of generic
    data so GN still sees generic inputs). Prone to overfitting when the
    mistake set is small, which is why the origin-based mode is the default.
    """
    _require_frozen(ge, "train_alternative")
    tap = ge_feature_tap(ge.spec)
    part = partition_regions(ge, le, tap, customized_train)
    mistakes = np.sort(np.concatenate([part.r2, part.r4]))
    correct = np.sort(np.concatenate([part.r1, part.r3]))
    if len(mistakes) == 0:
        raise TrainingError("GE makes no mistakes on the customized set; nothing for LE to learn")

    le_report = _fit_head(ge, le, customized_train.subset(mistakes), cfg)

    rng = np.random.default_rng(subseed(cfg.seed, "alt.gn.pool"))
    n_generic = min(len(mistakes), len(generic_pool))
    pick = rng.choice(len(generic_pool), size=n_generic, replace=False)
    images = np.concatenate(
        [customized_train.images[mistakes], customized_train.images[correct], generic_pool.images[pick]]
    )
    labels = np.concatenate(
        [np.ones(len(mistakes), dtype=np.int64), np.zeros(len(correct) + n_generic, dtype=np.int64)]
    )
    order = rng.permutation(len(labels))
    gn_report = _fit_head(ge, gn, LabeledSet(images[order], labels[order], 2), cfg)
    return {"le": le_report, "gn": gn_report}


def finetune_baseline(ge_copy: Network, customized_train: LabeledSet, cfg: TrainConfig) -> TrainReport:
    """Transfer-learning baseline: freeze the convolutional layers of an
    unfrozen GE copy and retrain both fully connected layers on user data."""
    if ge_copy.is_frozen():
        raise TrainingError("finetune_baseline needs an unfrozen copy of GE")
    first_fc = next(i for i, l in enumerate(ge_copy.spec.layers) if l.kind == "fully_connected")
    for layer, params in zip(ge_copy.spec.layers[:first_fc], ge_copy.params[:first_fc]):
        if params is not None:
            params.freeze()

    feats = np.concatenate(
        [
            ge_copy.forward_range(customized_train.images[lo : lo + 256], 0, first_fc)
            for lo in range(0, len(customized_train), 256)
        ]
    )
    suffix_spec = NetworkSpec(
        name=f"{ge_copy.spec.name}_fc_head",
        layers=ge_copy.spec.layers[first_fc:],
        input_shape=ge_copy.spec.shape_chain()[first_fc],
        output_count=ge_copy.spec.output_count,
    )
    suffix = Network(suffix_spec, ge_copy.params[first_fc:])  # shares parameter stores

    train_idx, val_idx = validation_indices(customized_train, cfg.validation_fraction, subseed(cfg.seed, "ft.val"))
    report = _fit(
        suffix, feats[train_idx], customized_train.labels[train_idx], feats[val_idx], customized_train.labels[val_idx], cfg
    )
    ge_copy.trained = True
    return report


def accuracy(net: Network, ds: LabeledSet) -> float:
    logits = _forward_logits(net, ds.images)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def evaluate_components(moe: MoeModel, customized_test: LabeledSet, generic_test: LabeledSet) -> dict:
    """The component accuracy record: GE, LE, GN, overall, and the complement
    metric on the customized test set, plus overall accuracy on generic data.
    """
    if len(customized_test) == 0 or len(generic_test) == 0:
        raise TrainingError("evaluate_components needs nonempty test sets")
    moe.require_trained()
    from .moe import trace_records  # local import to keep module load acyclic

    cust = trace_records(moe, customized_test)
    gen = trace_records(moe, generic_test)
    n = len(cust)
    ge_acc = sum(r["ge_pred"] == r["label"] for r in cust) / n
    le_acc = sum(r["le_pred"] == r["label"] for r in cust) / n
    gn_acc = sum(r["gate"] == "LE" for r in cust) / n  # customized samples should route to LE
    overall = sum(r["final_pred"] == r["label"] for r in cust) / n
    wrong = [r for r in cust if r["ge_pred"] != r["label"]]
    le_given_ge_wrong = (
        sum(r["le_pred"] == r["label"] for r in wrong) / len(wrong) if wrong else None
    )
    overall_generic = sum(r["final_pred"] == r["label"] for r in gen) / len(gen)
    return {
        "ge_customized": ge_acc,
        "le_customized": le_acc,
        "gn_customized": gn_acc,
        "overall_customized": overall,
        "le_given_ge_wrong": le_given_ge_wrong,
        "overall_generic": overall_generic,
    }
