"""Dataset handling: IDX ingestion, class balancing, per-user synthetic
customization, and the gating-network training mixture.

All sampling is driven by explicit seeds through numpy Generators, so every
derived dataset is byte-reproducible. Images are float64 in [0, 1] on the
k/255 grid (the grid an 8-bit source produces), shaped (N, H, W, 1).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(RuntimeError):
    """IDX file problems: bad magic, truncation, image/label count mismatch."""


class DatasetError(ValueError):
    pass


def subseed(root: int, name: str) -> int:
    """Stable named sub-seed, so one root seed fans out to every sampler."""
    digest = hashlib.sha256(f"{root}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class LabeledSet:
    """Images plus integer class labels.

    source_indices, when present, records which row of a parent set each
    sample was derived from (used to prove train/test disjointness for
    synthesized user data).
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    source_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[3] != 1:
            raise DatasetError(f"images must be (N, H, W, 1), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def per_class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, indices) -> "LabeledSet":
        indices = np.asarray(indices, dtype=np.int64)
        src = self.source_indices[indices] if self.source_indices is not None else None
        return LabeledSet(self.images[indices], self.labels[indices], self.class_count, src)

    def manifest(self) -> dict:
        return {
            "size": int(len(self)),
            "image_shape": list(self.images.shape[1:]),
            "class_count": int(self.class_count),
            "per_class_counts": [int(c) for c in self.per_class_counts()],
        }


# ---------------------------------------------------------------------------
# IDX files

def _read_exact(path: Path, expected: int, what: str) -> bytes:
    blob = path.read_bytes()
    if len(blob) != expected:
        raise IdxError(f"{path}: truncated {what}: expected {expected} bytes, got {len(blob)}")
    return blob


def load_idx(images_path, labels_path, class_count: int | None = None) -> LabeledSet:
    """Load an IDX image/label pair; pixel bytes are scaled by 1/255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    for p in (images_path, labels_path):
        if not p.exists():
            raise IdxError(f"no such file: {p}")

    head = images_path.read_bytes()
    if len(head) < 16:
        raise IdxError(f"{images_path}: truncated header: {len(head)} bytes")
    magic, n, rows, cols = struct.unpack(">IIII", head[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxError(
            f"{images_path}: bad magic: expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"
        )
    blob = _read_exact(images_path, 16 + n * rows * cols, "image data")
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(n, rows, cols, 1)

    lhead = labels_path.read_bytes()
    if len(lhead) < 8:
        raise IdxError(f"{labels_path}: truncated header: {len(lhead)} bytes")
    lmagic, ln = struct.unpack(">II", lhead[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise IdxError(
            f"{labels_path}: bad magic: expected {IDX_LABELS_MAGIC:#010x}, got {lmagic:#010x}"
        )
    lblob = _read_exact(labels_path, 8 + ln, "label data")
    labels = np.frombuffer(lblob, dtype=np.uint8, offset=8).astype(np.int64)
    if ln != n:
        raise IdxError(f"count mismatch: {n} images in {images_path} but {ln} labels in {labels_path}")

    if class_count is None:
        class_count = int(labels.max()) + 1 if ln else 1
    return LabeledSet(pixels.astype(np.float64) / 255.0, labels, class_count)


def write_idx(ds: LabeledSet, images_path, labels_path) -> None:
    """Write a set as an IDX pair (pixels quantized to bytes)."""
    n, rows, cols, _ = ds.images.shape
    pixels = np.round(ds.images[:, :, :, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Balancing and splits

def balance_classes(ds: LabeledSet, seed: int) -> LabeledSet:
    """Randomly downsample every class to the size of the smallest class."""
    counts = ds.per_class_counts()
    if counts.min() == 0:
        empty = int(np.argmin(counts))
        raise DatasetError(f"cannot balance: class {empty} has no samples")
    m = int(counts.min())
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        keep.append(rng.choice(idx, size=m, replace=False))
    order = np.sort(np.concatenate(keep))
    return ds.subset(order)


def validation_indices(ds: LabeledSet, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Index form of split_validation: (train indices, validation indices)."""
    if not 0.0 < fraction < 0.5:
        raise DatasetError(f"validation fraction must be in (0, 0.5), got {fraction}")
    rng = np.random.default_rng(seed)
    val_parts = []
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        n_val = int(len(idx) * fraction)
        if n_val:
            val_parts.append(rng.choice(idx, size=n_val, replace=False))
    if not val_parts:
        # tiny sets would floor to an empty validation set; take one sample
        counts = ds.per_class_counts()
        idx = np.flatnonzero(ds.labels == int(np.argmax(counts)))
        val_parts.append(rng.choice(idx, size=1, replace=False))
    val_idx = np.sort(np.concatenate(val_parts))
    mask = np.ones(len(ds), dtype=bool)
    mask[val_idx] = False
    return np.flatnonzero(mask), val_idx


def split_validation(ds: LabeledSet, fraction: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Stratified train/validation split, deterministic under seed.

    Per class, floor(count * fraction) samples go to validation.
    """
    train_idx, val_idx = validation_indices(ds, fraction, seed)
    return ds.subset(train_idx), ds.subset(val_idx)


def gn_mixture(customized_train: LabeledSet, generic_pool: LabeledSet, seed: int) -> LabeledSet:
    """Binary-labeled mixture for gating training: all customized samples
    (label 1) plus an equal number sampled from the generic pool (label 0)."""
    nc = len(customized_train)
    if nc == 0:
        raise DatasetError("customized training set is empty")
    if len(generic_pool) < nc:
        raise DatasetError(
            f"generic pool too small: {len(generic_pool)} samples, need {nc}"
        )
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(generic_pool), size=nc, replace=False)
    images = np.concatenate([generic_pool.images[pick], customized_train.images])
    labels = np.concatenate([np.zeros(nc, dtype=np.int64), np.ones(nc, dtype=np.int64)])
    order = rng.permutation(2 * nc)
    return LabeledSet(images[order], labels[order], 2)


# ---------------------------------------------------------------------------
# Synthetic per-user customization

TRANSFORM_KINDS = ("rotate", "shear", "elastic", "thicken", "thin")


@dataclass
class UserProfile:
    """Deterministic distortion chain standing in for one user's writing style.

    The same (user_id, seed) always yields the identical chain; magnitudes
    were calibrated so a generically trained network loses substantial
    accuracy on the distorted images while they stay easily learnable.
    """

    user_id: int
    transform_chain: list[tuple[str, float]]
    seed: int

    def __post_init__(self):
        if self.user_id <= 0:
            raise DatasetError(f"user_id must be positive, got {self.user_id}")
        for kind, _ in self.transform_chain:
            if kind not in TRANSFORM_KINDS:
                raise DatasetError(f"unknown transform kind '{kind}'")


def make_profile(user_id: int, seed: int) -> UserProfile:
    """Sample a user's distortion chain: rotation (within +/-25 degrees),
    shear, a smooth elastic warp, and stroke thickening or thinning."""
    rng = np.random.default_rng(subseed(seed, f"user.{user_id}.profile"))
    rot = float(rng.uniform(16.0, 25.0)) * (1.0 if rng.random() < 0.5 else -1.0)
    shear = float(rng.uniform(0.18, 0.32)) * (1.0 if rng.random() < 0.5 else -1.0)
    elastic = float(rng.uniform(2.0, 3.5))
    morph_kind = "thicken" if rng.random() < 0.5 else "thin"
    chain = [("rotate", rot), ("shear", shear), ("elastic", elastic), (morph_kind, 1.0)]
    return UserProfile(user_id=user_id, transform_chain=chain, seed=subseed(seed, f"user.{user_id}.data"))


def _elastic_field(shape, magnitude, rng):
    # one smooth displacement field per user, reused for every image
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma=4.0)
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma=4.0)
    norm = max(np.abs(dy).max(), np.abs(dx).max(), 1e-9)
    return dy / norm * magnitude, dx / norm * magnitude


def _apply_chain(img: np.ndarray, chain, elastic_field) -> np.ndarray:
    out = img[:, :, 0]
    h, w = out.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    for kind, mag in chain:
        if kind == "rotate":
            out = ndimage.rotate(out, mag, reshape=False, order=1, mode="constant", cval=0.0)
        elif kind == "shear":
            mat = np.array([[1.0, mag], [0.0, 1.0]])
            offset = center - mat @ center
            out = ndimage.affine_transform(out, mat, offset=offset, order=1, mode="constant", cval=0.0)
        elif kind == "elastic":
            dy, dx = elastic_field
            yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            out = ndimage.map_coordinates(out, [yy + dy, xx + dx], order=1, mode="constant", cval=0.0)
        elif kind == "thicken":
            out = ndimage.grey_dilation(out, size=(2, 2))
        elif kind == "thin":
            out = ndimage.grey_erosion(out, size=(2, 2))
    out = np.clip(out, 0.0, 1.0)
    out = np.round(out * 255.0) / 255.0
    return out[:, :, None]


def synthesize_user(
    base: LabeledSet,
    profile: UserProfile,
    train_per_class: int,
    test_per_class: int,
) -> tuple[LabeledSet, LabeledSet]:
    """Build one user's customized train/test sets from held-out base samples.

    Per class, train_per_class + test_per_class distinct source samples are
    drawn (train and test disjoint by source index) and pushed through the
    profile's distortion chain. The base set must be data the generic network
    never trained on.
    """
    need = train_per_class + test_per_class
    counts = base.per_class_counts()
    if counts.min() < need:
        short = int(np.argmin(counts))
        raise DatasetError(
            f"class {short} has {int(counts[short])} samples, need {need} per class"
        )
    rng = np.random.default_rng(profile.seed)
    elastic_mag = next((m for k, m in profile.transform_chain if k == "elastic"), 0.0)
    field = _elastic_field(base.images.shape[1:3], elastic_mag, rng)

    tr_idx, te_idx = [], []
    for c in range(base.class_count):
        idx = np.flatnonzero(base.labels == c)
        pick = rng.choice(idx, size=need, replace=False)
        tr_idx.append(pick[:train_per_class])
        te_idx.append(pick[train_per_class:])
    tr_idx = np.concatenate(tr_idx)
    te_idx = np.concatenate(te_idx)

    def build(src_idx):
        images = np.stack([_apply_chain(base.images[i], profile.transform_chain, field) for i in src_idx])
        return LabeledSet(images, base.labels[src_idx], base.class_count, source_indices=src_idx.copy())

    return build(tr_idx), build(te_idx)


# ---------------------------------------------------------------------------
# Procedural glyph corpus (stands in for a real handwriting corpus)

def _segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _render_strokes(strokes, size, width):
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    points = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    ink = np.zeros(size * size)
    for a, b in strokes:
        d = _segment_distance(points, a, b)
        np.maximum(ink, np.clip(0.5 + (width / 2.0 - d), 0.0, 1.0), out=ink)
    return ink.reshape(size, size)


def _class_prototype(class_id: int, seed: int, size: int, accepted):
    # resample until the rendered prototype is far enough from all others
    for attempt in range(64):
        rng = np.random.default_rng(subseed(seed, f"proto.{class_id}.{attempt}"))
        strokes = []
        for _ in range(4):
            for _try in range(32):
                a = rng.uniform(5.0, size - 6.0, 2)
                b = rng.uniform(5.0, size - 6.0, 2)
                if np.linalg.norm(a - b) >= 7.0:
                    strokes.append((a, b))
                    break
        img = _render_strokes(strokes, size, width=1.8)
        if all(np.linalg.norm(img - other) >= 4.0 for other in accepted):
            return strokes, img
    raise DatasetError(f"could not find a separated prototype for class {class_id}")


def _jitter_strokes(strokes, rng, size):
    theta = np.deg2rad(rng.uniform(-10.0, 10.0))
    scale = rng.uniform(0.88, 1.12)
    shear = rng.uniform(-0.08, 0.08)
    shift = rng.uniform(-2.0, 2.0, 2)
    rot = scale * np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    mat = rot @ np.array([[1.0, shear], [0.0, 1.0]])
    center = np.array([(size - 1) / 2.0] * 2)
    return [(mat @ (a - center) + center + shift, mat @ (b - center) + center + shift) for a, b in strokes]


def generate_corpus(
    class_count: int,
    train_per_class: int,
    test_per_class: int,
    seed: int,
    size: int = 28,
) -> tuple[LabeledSet, LabeledSet]:
    """Deterministic stroke-glyph corpus: one random stroke pattern per class,
    per-sample affine jitter plus pixel noise. Replaces external corpora for
    desk-scale runs; written/read through the same IDX interface."""
    protos = []
    accepted = []
    for c in range(class_count):
        strokes, img = _class_prototype(c, seed, size, accepted)
        protos.append(strokes)
        accepted.append(img)

    def build(split: str, per_class: int) -> LabeledSet:
        images = np.empty((class_count * per_class, size, size, 1))
        labels = np.empty(class_count * per_class, dtype=np.int64)
        row = 0
        for c in range(class_count):
            for i in range(per_class):
                rng = np.random.default_rng(subseed(seed, f"{split}.{c}.{i}"))
                strokes = _jitter_strokes(protos[c], rng, size)
                img = _render_strokes(strokes, size, width=rng.uniform(1.4, 2.3))
                img = np.clip(img + rng.normal(0.0, 0.06, img.shape), 0.0, 1.0)
                images[row, :, :, 0] = np.round(img * 255.0) / 255.0
                labels[row] = c
                row += 1
        return LabeledSet(images, labels, class_count)

    return build("train", train_per_class), build("test", test_per_class)


def write_manifest(path, entries: dict) -> None:
    """Dataset manifest as JSON: set sizes, per-class counts, seeds."""
    Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
