"""Labeled image datasets: synthetic domains, directory ingestion, and the
subsampling / label-noise transforms used by the sweep experiments."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .container import load_container, save_container

SHAPES = ("disk", "square", "triangle", "cross", "ring", "bar", "diamond", "corner")


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # N x C x H x W float32 in [0, 1]
    labels: np.ndarray  # N int64
    classes: int
    split: str = "train"
    provenance: str = ""
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if self.mean is None:
            object.__setattr__(self, "mean", self.images.mean(axis=(0, 2, 3)).astype(np.float32))
            std = self.images.std(axis=(0, 2, 3)).astype(np.float32)
            object.__setattr__(self, "std", np.maximum(std, np.float32(1e-3)))

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.classes).tolist()

    def take(self, idx: np.ndarray) -> LabeledDataset:
        return replace(self, images=self.images[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class SyntheticSpec:
    """Geometric shapes over textured backgrounds.

    ``hue_shift`` rotates all colors about the gray axis (degrees);
    ``texture`` picks the background family; ``noise`` is additive Gaussian sigma.
    """

    classes: int = 4
    size: int = 32
    hue_shift: float = 0.0
    texture: int = 0
    noise: float = 0.02
    name: str = "source"
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 2 <= self.classes <= len(SHAPES):
            raise ValueError(f"classes must be in [2, {len(SHAPES)}], got {self.classes}")
        if self.texture not in range(4):
            raise ValueError(f"texture id must be 0..3, got {self.texture}")


def _hue_matrix(deg: float) -> np.ndarray:
    # rotation about the (1,1,1) axis in RGB space
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    k = 1.0 / 3.0
    r = np.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + (1 - c) * k, k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + (1 - c) * k],
    ])


def _mask(shape_id: int, size: int, cx: float, cy: float, rad: float, yy, xx) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    name = SHAPES[shape_id]
    if name == "disk":
        return dx * dx + dy * dy <= rad * rad
    if name == "square":
        return (np.abs(dx) <= rad * 0.85) & (np.abs(dy) <= rad * 0.85)
    if name == "triangle":
        return (dy <= rad * 0.8) & (dy >= -rad) & (np.abs(dx) <= (dy + rad) * 0.6)
    if name == "cross":
        w = rad * 0.33
        return ((np.abs(dx) <= w) & (np.abs(dy) <= rad)) | ((np.abs(dy) <= w) & (np.abs(dx) <= rad))
    if name == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= rad * rad) & (d2 >= (0.55 * rad) ** 2)
    if name == "bar":
        return (np.abs(dx) <= rad) & (np.abs(dy) <= rad * 0.3)
    if name == "diamond":
        return np.abs(dx) + np.abs(dy) <= rad
    return ((np.abs(dx) <= rad) & (dy >= rad * 0.5) & (dy <= rad)) | ((np.abs(dy) <= rad) & (dx >= rad * 0.5) & (dx <= rad))


def _background(texture: int, size: int, rng: np.random.Generator, yy, xx) -> np.ndarray:
    c1, c2 = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
    if texture == 0:  # smooth gradient
        theta = rng.uniform(0, 2 * np.pi)
        t = (np.cos(theta) * xx + np.sin(theta) * yy) / size + 0.5
    elif texture == 1:  # stripes
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.3, 0.8)
        t = 0.5 + 0.5 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    elif texture == 2:  # checkerboard
        cell = int(rng.integers(3, 7))
        t = ((xx // cell + yy // cell) % 2).astype(float)
    else:  # blotches
        coarse = rng.uniform(0, 1, (size // 8 + 2, size // 8 + 2))
        t = coarse[(yy // 8).astype(int), (xx // 8).astype(int)]
    t = np.clip(t, 0, 1)[None]
    return c1[:, None, None] * (1 - t) + c2[:, None, None] * t


def generate_synthetic(spec: SyntheticSpec, n: int, seed: int, split: str = "train") -> LabeledDataset:
    if n < spec.classes:
        raise ValueError(f"need at least one sample per class: n={n} < classes={spec.classes}")
    rng = np.random.default_rng([seed, spec.classes, spec.size, spec.texture])
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    labels = rng.permutation(np.arange(n) % spec.classes).astype(np.int64)
    hue = _hue_matrix(spec.hue_shift)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, lab in enumerate(labels):
        img = _background(spec.texture, size, rng, yy, xx)
        rad = rng.uniform(0.22, 0.36) * size
        cx, cy = rng.uniform(rad, size - rad, 2)
        fg = rng.uniform(0.0, 1.0, 3)
        m = _mask(int(lab), size, cx, cy, rad, yy, xx)
        img = np.where(m[None], fg[:, None, None], img * 0.7)
        img = np.tensordot(hue, img, axes=1)
        img = img + rng.normal(0.0, spec.noise, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    note = f"synthetic:{spec.name} hue={spec.hue_shift} texture={spec.texture} noise={spec.noise} seed={seed}"
    return LabeledDataset(images, labels, spec.classes, split, note)


def load_image_dir(path, target_size: int = 72, split: str = "train") -> LabeledDataset:
    """One subdirectory per class (sorted name order = label order), bilinear resize."""
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class subdirectories")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file())
        if not files:
            raise ValueError(f"{d}: empty class directory")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((target_size, target_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as e:
                raise ValueError(f"{f}: cannot decode image ({e})") from None
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
    note = f"dir:{root} classes={','.join(d.name for d in class_dirs)}"
    return LabeledDataset(np.stack(images), np.array(labels, dtype=np.int64), len(class_dirs), split, note)


def subsample(ds: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Keep floor(fraction * n_c) samples of every class (at least one)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return ds.take(np.arange(len(ds)))
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        k = max(1, int(np.floor(fraction * len(idx))))
        keep.append(rng.permutation(idx)[:k])
    sel = np.sort(np.concatenate(keep))
    out = ds.take(sel)
    return replace(out, provenance=f"{ds.provenance} | subsample {fraction} seed={seed}")


def inject_label_noise(ds: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Relabel exactly floor(fraction * N) samples, each to a different uniformly drawn class."""
    if not 0 <= fraction < 1:
        raise ValueError(f"noise fraction must be in [0, 1), got {fraction}")
    if fraction > 0 and ds.classes < 2:
        raise ValueError("label noise needs at least two classes")
    labels = ds.labels.copy()
    k = int(np.floor(fraction * len(ds)))
    if k:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(ds), size=k, replace=False)
        labels[idx] = (labels[idx] + rng.integers(1, ds.classes, size=k)) % ds.classes
    return replace(ds, labels=labels, provenance=f"{ds.provenance} | label-noise {fraction} seed={seed}")


def save_dataset(ds: LabeledDataset, path) -> None:
    path = Path(path)
    save_container(path, {"images": ds.images})
    sidecar = {"labels": ds.labels.tolist(), "classes": ds.classes, "split": ds.split,
               "provenance": ds.provenance, "mean": ds.mean.tolist(), "std": ds.std.tolist()}
    path.with_name(path.name + ".labels.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n",
                                                          encoding="utf-8")


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    arrays, _ = load_container(path)
    meta = json.loads(path.with_name(path.name + ".labels.json").read_text(encoding="utf-8"))
    return LabeledDataset(arrays["images"], np.array(meta["labels"], dtype=np.int64), meta["classes"],
                          meta["split"], meta["provenance"], np.array(meta["mean"], dtype=np.float32),
                          np.array(meta["std"], dtype=np.float32))


def spec_to_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d.pop("extra")
    return d
