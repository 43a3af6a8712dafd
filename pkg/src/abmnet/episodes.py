"""Datasets and episodic samplers for few-shot trials.

A dataset is a list of classes, each holding (H, W, C) images in [0, 1].
Episodes draw a support set (the labeled references) and queries; open-set
episodes hold one sampled class out of the supports and label its queries 0.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class DatasetError(ValueError):
    """Base for dataset loading and sampling failures."""


class BadMagicError(DatasetError):
    """A binary tensor file does not start with a known magic number."""


class DimensionError(DatasetError):
    """Images disagree with the dataset's declared dimensions."""


class EmptyClassError(DatasetError):
    """A class directory or label has no images."""


@dataclass
class ClassRecord:
    id: int
    name: str
    images: np.ndarray  # (n, H, W, C) float32 in [0, 1]


@dataclass
class Dataset:
    name: str
    height: int
    width: int
    channels: int
    classes: list[ClassRecord]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def validate(self) -> None:
        for i, rec in enumerate(self.classes):
            if rec.id != i:
                raise DatasetError(f"class ids must be dense from 0, found {rec.id} at position {i}")
            if len(rec.images) == 0:
                raise EmptyClassError(f"class {rec.name!r} has no images")
            if rec.images.shape[1:] != (self.height, self.width, self.channels):
                raise DimensionError(
                    f"class {rec.name!r} images are {rec.images.shape[1:]}, dataset declares "
                    f"({self.height}, {self.width}, {self.channels})"
                )


@dataclass
class Episode:
    way: int
    supports: list[tuple[np.ndarray, int]]  # (image, label in 1..N or 1..N-1)
    queries: list[tuple[np.ndarray, int]]  # (image, true label; 0 = open set)
    open_class: int | None  # dataset class id held out of the supports
    seed: int | None = None


def dataset_from_arrays(images, labels, name: str = "arrays") -> Dataset:
    """Group a flat (n, H, W[, C]) stack by integer label into a Dataset.

    Pixel values may be uint8 (scaled by 1/255) or floats already in [0, 1].
    """
    images = np.asarray(images)
    labels = np.asarray(labels).astype(np.int64)
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise DimensionError(f"expected (n, H, W[, C]) images, got shape {images.shape}")
    if len(images) != len(labels):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    else:
        images = images.astype(np.float32)
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            lo, hi = float(images.min()), float(images.max())
            if hi > lo:
                images = (images - lo) / (hi - lo)
    records = []
    for new_id, label in enumerate(np.unique(labels)):
        imgs = images[labels == label]
        records.append(ClassRecord(new_id, str(int(label)), imgs))
    n, h, w, c = images.shape
    ds = Dataset(name, h, w, c, records)
    ds.validate()
    return ds


def _read_idx(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise BadMagicError(f"{path}: file too short for a magic number")
    if raw[0] != 0 or raw[1] != 0:
        raise BadMagicError(f"{path}: bad magic bytes {raw[:4].hex()}")
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code != 0x08:
        raise BadMagicError(f"{path}: unsupported element type 0x{dtype_code:02x} (only unsigned byte)")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise BadMagicError(f"{path}: truncated dimension header")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims)) if dims else 0
    body = raw[header:]
    if len(body) != count:
        raise DimensionError(f"{path}: header promises {count} bytes, file holds {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def _load_idx(path: str, labels_path: str | None) -> Dataset:
    if labels_path is None:
        raise DatasetError("idx format needs labels_path alongside the image file")
    images = _read_idx(path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise DimensionError(f"{path}: expected 3-d image tensor, got {images.ndim}-d")
    if labels.ndim != 1:
        raise DimensionError(f"{labels_path}: expected 1-d label tensor, got {labels.ndim}-d")
    if len(images) != len(labels):
        raise DimensionError(f"{len(images)} images vs {len(labels)} labels")
    return dataset_from_arrays(images, labels, name=os.path.basename(path))


def _load_image_dirs(path: str) -> Dataset:
    from PIL import Image

    class_dirs = []
    for root, dirs, files in os.walk(path):
        if not dirs and files:
            class_dirs.append(root)
    if not class_dirs:
        raise DatasetError(f"{path}: no leaf directories with files found")
    class_dirs.sort()

    records = []
    dims = None
    channels = None
    for new_id, cdir in enumerate(class_dirs):
        files = sorted(
            f for f in os.listdir(cdir) if f.lower().endswith((".png", ".jpg", ".jpeg", ".bmp", ".gif", ".pgm", ".ppm"))
        )
        if not files:
            raise EmptyClassError(f"class directory {cdir!r} holds no images")
        imgs = []
        for fname in files:
            with Image.open(os.path.join(cdir, fname)) as im:
                if channels is None:
                    channels = 3 if im.mode in ("RGB", "RGBA", "P") else 1
                im = im.convert("RGB" if channels == 3 else "L")
                arr = np.asarray(im, dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[..., None]
            if dims is None:
                dims = arr.shape[:2]
            if arr.shape[:2] != dims or arr.shape[2] != channels:
                raise DimensionError(
                    f"{fname} in {cdir!r} is {arr.shape}, expected {dims + (channels,)}"
                )
            imgs.append(arr)
        rel = os.path.relpath(cdir, path)
        records.append(ClassRecord(new_id, rel, np.stack(imgs)))
    ds = Dataset(os.path.basename(os.path.normpath(path)), dims[0], dims[1], channels, records)
    ds.validate()
    return ds


def _render_polyline(points: np.ndarray, h: int, w: int, thickness: float) -> np.ndarray:
    """Distance-field rendering of a polyline given in [0,1]^2 coordinates."""
    yy, xx = np.mgrid[0:h, 0:w]
    px = xx / (w - 1)
    py = yy / (h - 1)
    dmin = np.full((h, w), np.inf)
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        dx, dy = x1 - x0, y1 - y0
        seg2 = dx * dx + dy * dy
        if seg2 < 1e-12:
            t = np.zeros((h, w))
        else:
            t = np.clip(((px - x0) * dx + (py - y0) * dy) / seg2, 0.0, 1.0)
        qx = x0 + t * dx
        qy = y0 + t * dy
        dmin = np.minimum(dmin, np.hypot(px - qx, py - qy))
    return np.clip(1.0 - dmin / thickness, 0.0, 1.0).astype(np.float32)


SYNTHETIC_DEFAULTS = {
    "seed": 0,
    "classes": 10,
    "images_per_class": 20,
    "height": 28,
    "width": 28,
    "min_points": 4,
    "max_points": 6,
    "jitter": 0.02,
    "rotation_jitter": 0.08,
    "thickness": 0.07,
}


def _load_synthetic(params: dict | None) -> Dataset:
    opts = dict(SYNTHETIC_DEFAULTS)
    if params:
        unknown = set(params) - set(opts)
        if unknown:
            raise DatasetError(f"unknown synthetic options: {sorted(unknown)}")
        opts.update(params)
    rng = np.random.default_rng(opts["seed"])
    h, w = opts["height"], opts["width"]
    records = []
    for cid in range(opts["classes"]):
        n_points = int(rng.integers(opts["min_points"], opts["max_points"] + 1))
        prototype = rng.uniform(0.18, 0.82, size=(n_points, 2))
        imgs = []
        for _ in range(opts["images_per_class"]):
            pts = prototype + rng.normal(0.0, opts["jitter"], size=prototype.shape)
            angle = rng.uniform(-opts["rotation_jitter"], opts["rotation_jitter"])
            c, s = np.cos(angle), np.sin(angle)
            center = pts.mean(axis=0)
            pts = (pts - center) @ np.array([[c, -s], [s, c]]) + center
            thick = opts["thickness"] * float(rng.uniform(0.85, 1.2))
            imgs.append(_render_polyline(pts, h, w, thick)[..., None])
        records.append(ClassRecord(cid, f"glyph-{cid}", np.stack(imgs)))
    ds = Dataset("synthetic", h, w, 1, records)
    ds.validate()
    return ds


def load_dataset(
    format: str,
    path: str | None = None,
    labels_path: str | None = None,
    synthetic: dict | None = None,
) -> Dataset:
    """Load a dataset: 'idx' binary tensors, 'image-dirs', or 'synthetic'."""
    if format == "idx":
        if path is None:
            raise DatasetError("idx format needs a path")
        return _load_idx(path, labels_path)
    if format == "image-dirs":
        if path is None:
            raise DatasetError("image-dirs format needs a path")
        return _load_image_dirs(path)
    if format == "synthetic":
        return _load_synthetic(synthetic)
    raise DatasetError(f"unknown dataset format {format!r}")


def augment_rotations(dataset: Dataset) -> Dataset:
    """Expand every class into four: rotated clockwise by 0/90/180/270 degrees."""
    if dataset.height != dataset.width:
        raise DimensionError(
            f"rotation augmentation needs square images, got {dataset.height}x{dataset.width}"
        )
    records = []
    for rec in dataset.classes:
        for quarter in range(4):
            rotated = np.rot90(rec.images, k=-quarter, axes=(1, 2))
            records.append(
                ClassRecord(len(records), f"{rec.name}@{quarter * 90}", np.ascontiguousarray(rotated))
            )
    out = Dataset(dataset.name, dataset.height, dataset.width, dataset.channels, records)
    out.validate()
    return out


def _subset(dataset: Dataset, class_ids, name: str, keep_map: dict[int, np.ndarray] | None = None) -> Dataset:
    records = []
    for new_id, cid in enumerate(class_ids):
        rec = dataset.classes[cid]
        imgs = rec.images
        if keep_map is not None and cid in keep_map:
            keep = keep_map[cid]
            if len(keep) == 0:
                raise DatasetError(f"class {rec.name!r} too small to split image pools")
            imgs = imgs[np.sort(keep)]
        records.append(ClassRecord(new_id, rec.name, imgs))
    out = Dataset(name, dataset.height, dataset.width, dataset.channels, records)
    out.validate()
    return out


def split_classes(
    dataset: Dataset,
    rng: np.random.Generator,
    fractions: tuple[float, float, float] | None = None,
    train: list[int] | None = None,
    val: list[int] | None = None,
    test: list[int] | None = None,
) -> tuple[Dataset, Dataset, Dataset]:
    """Class-disjoint train/val/test split.

    Either ``fractions`` (shuffled deterministically by ``rng``) or explicit
    class-id lists. Train never overlaps the others; val and test may name
    the same classes, in which case their image pools are split in half
    (disjointly, per class).
    """
    n = dataset.num_classes
    if fractions is not None:
        if train or val or test:
            raise DatasetError("give either fractions or explicit lists, not both")
        if not np.isclose(sum(fractions), 1.0) or any(f < 0 for f in fractions):
            raise DatasetError(f"fractions must be non-negative and sum to 1, got {fractions}")
        order = rng.permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        train = order[:n_train].tolist()
        val = order[n_train : n_train + n_val].tolist()
        test = order[n_train + n_val :].tolist()
    else:
        train = list(train or [])
        val = list(val or [])
        test = list(test or [])
        for ids, label in ((train, "train"), (val, "val"), (test, "test")):
            for cid in ids:
                if not 0 <= cid < n:
                    raise DatasetError(f"{label} class id {cid} out of range 0..{n - 1}")
        if set(train) & (set(val) | set(test)):
            raise DatasetError("train classes overlap val/test classes")

    shared = sorted(set(val) & set(test))
    val_keep: dict[int, np.ndarray] = {}
    test_keep: dict[int, np.ndarray] = {}
    for cid in shared:
        order = rng.permutation(len(dataset.classes[cid].images))
        half = len(order) // 2
        val_keep[cid] = order[:half]
        test_keep[cid] = order[half:]

    train_ds = _subset(dataset, train, f"{dataset.name}-train")
    val_ds = _subset(dataset, val, f"{dataset.name}-val", val_keep)
    test_ds = _subset(dataset, test, f"{dataset.name}-test", test_keep)
    return train_ds, val_ds, test_ds


def sample_episode(
    dataset: Dataset,
    way: int,
    shot: int,
    queries: int,
    open_set: bool,
    rng: np.random.Generator,
    seed: int | None = None,
) -> Episode:
    """One few-shot trial: supports plus queries, optionally with a held-out class.

    Closed-set episodes label the ``way`` support classes 1..N and draw each
    query's class uniformly from them. Open-set episodes hold one of the
    ``way`` classes out (its queries are labeled 0) and keep N-1 supports.
    """
    if way < 2:
        raise DatasetError(f"way must be >= 2, got {way}")
    if shot < 1 or queries < 1:
        raise DatasetError("shot and query counts must be >= 1")
    if dataset.num_classes < way:
        raise DatasetError(f"dataset has {dataset.num_classes} classes, episode needs {way}")

    class_ids = rng.choice(dataset.num_classes, size=way, replace=False)
    open_class: int | None = None
    support_classes = class_ids
    if open_set:
        open_pos = int(rng.integers(way))
        open_class = int(class_ids[open_pos])
        support_classes = np.delete(class_ids, open_pos)

    for cid in support_classes:
        if len(dataset.classes[cid].images) < shot + 1:
            raise DatasetError(
                f"class {dataset.classes[cid].name!r} has {len(dataset.classes[cid].images)} "
                f"images, needs {shot + 1} for {shot}-shot with queries"
            )

    supports: list[tuple[np.ndarray, int]] = []
    support_idx: dict[int, set[int]] = {}
    for label, cid in enumerate(support_classes, start=1):
        imgs = dataset.classes[cid].images
        picks = rng.choice(len(imgs), size=shot, replace=False)
        support_idx[int(cid)] = set(int(p) for p in picks)
        for p in picks:
            supports.append((imgs[int(p)], label))

    label_of = {int(cid): lab for lab, cid in enumerate(support_classes, start=1)}
    if open_class is not None:
        label_of[open_class] = 0

    query_items: list[tuple[np.ndarray, int]] = []
    episode_classes = class_ids
    for _ in range(queries):
        cid = int(episode_classes[int(rng.integers(way))])
        imgs = dataset.classes[cid].images
        used = support_idx.get(cid, set())
        free = [i for i in range(len(imgs)) if i not in used]
        if not free:
            raise DatasetError(f"class {dataset.classes[cid].name!r} has no query images left")
        query_items.append((imgs[int(rng.choice(free))], label_of[cid]))

    return Episode(
        way=way,
        supports=supports,
        queries=query_items,
        open_class=open_class,
        seed=seed,
    )


def episode_image_batch(episode: Episode) -> np.ndarray:
    """Stack supports then queries as an encoder-ready (n, C, H, W) batch."""
    imgs = [img for img, _ in episode.supports] + [img for img, _ in episode.queries]
    return np.ascontiguousarray(np.stack(imgs).transpose(0, 3, 1, 2))
