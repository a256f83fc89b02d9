"""Datasets: seeded synthetic textures/blobs, image folders, npz files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 4
    samples_per_class: int = 200
    image_size: int = 32
    noise_std: float = 0.3
    seed: int = 0
    generator: str = "textures"
    channels: int = 1

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 1 or self.image_size < 4:
            raise ValueError(f"invalid synthetic dataset spec: {self}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.generator not in ("textures", "gaussian-blobs"):
            raise ValueError(f"unknown generator {self.generator!r}")


@dataclass
class Dataset:
    images: np.ndarray   # [N, C, H, W] float32
    labels: np.ndarray   # [N] int64
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def class_frequencies(num_classes: int, image_size: int) -> np.ndarray:
    """Dominant spatial frequency (cycles per image) for each class, evenly spread below Nyquist/2."""
    hi = image_size / 4
    return np.linspace(1.5, hi, num_classes) if num_classes > 1 else np.array([hi / 2])


def _texture(rng, freq: float, size: int) -> np.ndarray:
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size
    return np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def _blobs(rng, n_blobs: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    sigma = size / 12
    for _ in range(n_blobs):
        cy, cx = rng.uniform(sigma, size - sigma, 2)
        img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return 2 * img - 1


def generate_synthetic_dataset(spec: SyntheticDatasetSpec) -> Dataset:
    """Class-conditional images plus Gaussian noise, fully determined by ``spec``.

    ``textures``: a cosine grating at the class frequency with random
    orientation and phase.  ``gaussian-blobs``: class ``c`` has ``c + 1``
    randomly placed blobs.  Samples are interleaved by class.
    """
    rng = np.random.default_rng(spec.seed)
    freqs = class_frequencies(spec.num_classes, spec.image_size)
    n = spec.num_classes * spec.samples_per_class
    images = np.empty((n, spec.channels, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.tile(np.arange(spec.num_classes), spec.samples_per_class)
    noise_rng = np.random.default_rng([spec.seed, 1])
    for i, c in enumerate(labels):
        if spec.generator == "textures":
            base = _texture(rng, freqs[c], spec.image_size)
        else:
            base = _blobs(rng, int(c) + 1, spec.image_size)
        img = np.broadcast_to(base, images.shape[1:])
        if spec.noise_std > 0:
            img = img + noise_rng.normal(0.0, spec.noise_std, images.shape[1:])
        images[i] = img
    return Dataset(images, labels, spec.num_classes)


def synthetic_split(spec: SyntheticDatasetSpec, test_per_class: int = 50) -> tuple[Dataset, Dataset]:
    """Train set from ``spec`` and an independent test set drawn from a derived seed."""
    test_spec = SyntheticDatasetSpec(spec.num_classes, test_per_class, spec.image_size, spec.noise_std,
                                     spec.seed + 1_000_003, spec.generator, spec.channels)
    return generate_synthetic_dataset(spec), generate_synthetic_dataset(test_spec)


def _stratified_indices(ds: Dataset, fraction: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    counts = ds.class_counts()
    total = max(int(round(fraction * len(ds))), int((counts > 0).sum()))
    exact = counts * total / len(ds)
    take = np.floor(exact).astype(int)
    # largest remainder, lower class index first on ties
    short = total - take.sum()
    for c in np.argsort(-(exact - take), kind="stable")[:short]:
        take[c] += 1
    take = np.maximum(take, (counts > 0).astype(int))
    picked = [rng.permutation(np.nonzero(ds.labels == c)[0])[:take[c]] for c in range(ds.num_classes)]
    return np.sort(np.concatenate(picked))


def stratified_fraction(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Seeded class-stratified subsample of ``round(fraction * N)`` samples (at least one per class)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"data fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return ds
    return ds.subset(_stratified_indices(ds, fraction, seed))


def stratified_split(ds: Dataset, held_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """``(rest, held_out)`` with the held-out part stratified by class."""
    held = _stratified_indices(ds, held_fraction, seed)
    rest = np.setdiff1d(np.arange(len(ds)), held)
    return ds.subset(rest), ds.subset(held)


def load_image_folder(root, image_size: int, channels: int = 1) -> Dataset:
    """Per-class subdirectories of 8-bit images, resized and z-scored per channel."""
    from PIL import Image

    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class subdirectories under {root}")
    mode = "L" if channels == 1 else "RGB"
    images, labels = [], []
    for c, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
                continue
            with Image.open(f) as im:
                arr = np.asarray(im.convert(mode).resize((image_size, image_size)), dtype=np.float32)
            images.append(arr[None] if channels == 1 else arr.transpose(2, 0, 1))
            labels.append(c)
    x = np.stack(images)
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    sd = x.std(axis=(0, 2, 3), keepdims=True)
    x = (x - mu) / np.where(sd > 0, sd, 1.0)
    return Dataset(x, np.array(labels), len(classes))


def save_npz(ds: Dataset, path) -> None:
    np.savez(path, images=ds.images, labels=ds.labels, num_classes=ds.num_classes)


def load_npz(path) -> Dataset:
    with np.load(path) as f:
        return Dataset(f["images"], f["labels"], int(f["num_classes"]))


def load_dataset(source, image_size: int, channels: int = 1) -> Dataset:
    """Single entry point: an ``.npz`` file or an image folder."""
    source = Path(source)
    if source.is_dir():
        return load_image_folder(source, image_size, channels)
    return load_npz(source)
