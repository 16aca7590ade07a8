"""Dataset construction, binary image-file I/O, subsetting, and augmentation.

Datasets are immutable after construction: a feature array, an integer label
array, and the class count. Sampling operations (per-class subsets, the
long-tailed reduction) always draw without replacement and are deterministic
per seed. Augmentations take an explicit rng so workers can hold their own
streams.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR_LAYOUTS = ("cifar10", "cifar100")


@dataclass(frozen=True)
class LabeledDataset:
    """Feature tensors plus integer labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    # Coarse byte of the two-byte record layout, kept so files round-trip.
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        coarse = self.coarse_labels[idx] if self.coarse_labels is not None else None
        return LabeledDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            coarse_labels=coarse,
        )


@dataclass(frozen=True)
class ImbalanceProfile:
    """Imbalance ratio and the per-class counts it produced."""

    rho: float
    per_class_counts: tuple[int, ...]


@dataclass(frozen=True)
class CutMixBatch:
    """Patch-mixed inputs with per-sample (ya, yb, lambda_mix) label pairs."""

    mixed_inputs: np.ndarray
    ya: np.ndarray
    yb: np.ndarray
    lambda_mix: np.ndarray


def gaussian_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    separation: float,
    noise_sigma: float,
    seed,
) -> LabeledDataset:
    """Isotropic Gaussian clusters around centers on a sphere of the given radius."""
    if separation <= 0 or noise_sigma <= 0:
        raise ValueError("separation and noise_sigma must be positive")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = separation * directions
    features = np.repeat(centers, per_class, axis=0) + rng.normal(
        scale=noise_sigma, size=(num_classes * per_class, dim)
    )
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(features=features, labels=labels.astype(np.intp), num_classes=num_classes)


def load_cifar_binary(path, layout: str = "cifar100") -> LabeledDataset:
    """Read fixed-record binary image files into a dataset.

    ``cifar100`` records are 1 coarse byte + 1 fine byte + 3072 pixel bytes;
    ``cifar10`` records are 1 label byte + 3072 pixel bytes. Pixels come out
    scaled to [0, 1] as channel-major 3x32x32 float32.
    """
    if layout not in CIFAR_LAYOUTS:
        raise ValueError(f"layout must be one of {CIFAR_LAYOUTS}, got {layout!r}")
    raw = np.fromfile(path, dtype=np.uint8)
    header = 2 if layout == "cifar100" else 1
    record = header + CIFAR_IMAGE_BYTES
    if raw.size == 0 or raw.size % record:
        raise ValueError(
            f"{path}: file length {raw.size} is not a positive multiple of the "
            f"{record}-byte {layout} record"
        )
    rows = raw.reshape(-1, record)
    pixels = rows[:, header:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    if layout == "cifar100":
        coarse = rows[:, 0].astype(np.intp)
        labels = rows[:, 1].astype(np.intp)
        return LabeledDataset(pixels, labels, num_classes=100, coarse_labels=coarse)
    return LabeledDataset(pixels, rows[:, 0].astype(np.intp), num_classes=10)


def save_cifar_binary(dataset: LabeledDataset, path, layout: str = "cifar100") -> None:
    """Write a dataset back to the binary record format, bit-exact on round trip."""
    if layout not in CIFAR_LAYOUTS:
        raise ValueError(f"layout must be one of {CIFAR_LAYOUTS}, got {layout!r}")
    feats = dataset.features
    if feats.shape[1:] != (3, 32, 32):
        raise ValueError(f"expected 3x32x32 features, got {feats.shape[1:]}")
    pixels = np.round(np.asarray(feats, dtype=np.float64) * 255.0).astype(np.uint8)
    pixels = pixels.reshape(len(dataset), CIFAR_IMAGE_BYTES)
    header = 2 if layout == "cifar100" else 1
    rows = np.empty((len(dataset), header + CIFAR_IMAGE_BYTES), dtype=np.uint8)
    if layout == "cifar100":
        coarse = dataset.coarse_labels
        rows[:, 0] = 0 if coarse is None else coarse
        rows[:, 1] = dataset.labels
    else:
        rows[:, 0] = dataset.labels
    rows[:, header:] = pixels
    rows.tofile(path)


def subset_per_class(dataset: LabeledDataset, n_per_class: int, seed) -> LabeledDataset:
    """Uniform per-class sample without replacement, deterministic per seed."""
    counts = dataset.class_counts()
    if n_per_class > counts.min():
        raise ValueError(
            f"n_per_class={n_per_class} exceeds the smallest class count {counts.min()}"
        )
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        picked.append(rng.choice(idx, size=n_per_class, replace=False))
    return dataset.take(np.concatenate(picked))


def long_tail_counts(n_max: int, num_classes: int, rho: float) -> list[int]:
    """Exponential class-count profile n_max * rho^(-i / (C-1)), half-up rounded."""
    if rho < 1.0:
        raise ValueError(f"imbalance ratio must be >= 1, got {rho}")
    counts = []
    for i in range(num_classes):
        n = int(n_max * rho ** (-i / (num_classes - 1)) + 0.5)
        if n < 1:
            warnings.warn(f"class {i} count rounded to 0 under rho={rho}; clamped to 1")
            n = 1
        counts.append(n)
    return counts


def make_long_tailed(
    dataset: LabeledDataset, rho: float, seed
) -> tuple[LabeledDataset, ImbalanceProfile]:
    """Subsample a balanced dataset into an exponentially long-tailed one.

    Class 0 keeps all its items and counts decay geometrically so that
    max/min equals rho up to rounding. Items are drawn without replacement.
    """
    counts = dataset.class_counts()
    n_max = int(counts.max())
    targets = long_tail_counts(n_max, dataset.num_classes, rho)
    rng = np.random.default_rng(seed)
    picked = []
    for c, want in enumerate(targets):
        idx = np.flatnonzero(dataset.labels == c)
        if want > idx.size:
            raise ValueError(f"class {c} has {idx.size} items, cannot keep {want}")
        picked.append(rng.choice(idx, size=want, replace=False))
    reduced = dataset.take(np.concatenate(picked))
    return reduced, ImbalanceProfile(rho=rho, per_class_counts=tuple(targets))


def augment_standard(image, pad: int, crop_size: int, flip_prob: float, rng) -> np.ndarray:
    """Zero-pad, random-crop back to crop_size, and maybe flip horizontally."""
    img = np.asarray(image)
    if pad < 0:
        raise ValueError(f"pad must be nonnegative, got {pad}")
    c, h, w = img.shape
    if pad:
        img = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    ph, pw = h + 2 * pad, w + 2 * pad
    if crop_size > ph or crop_size > pw:
        raise ValueError(f"crop_size {crop_size} exceeds padded image {ph}x{pw}")
    top = rng.integers(0, ph - crop_size + 1)
    left = rng.integers(0, pw - crop_size + 1)
    img = img[:, top : top + crop_size, left : left + crop_size]
    if rng.random() < flip_prob:
        img = img[:, :, ::-1]
    return np.ascontiguousarray(img)


def cutout(image, size: int, rng) -> np.ndarray:
    """Zero a size x size square centered at a uniform point, clipped to bounds."""
    img = np.asarray(image).copy()
    _, h, w = img.shape
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y1, y2 = max(cy - size // 2, 0), min(cy + (size + 1) // 2, h)
    x1, x2 = max(cx - size // 2, 0), min(cx + (size + 1) // 2, w)
    img[:, y1:y2, x1:x2] = 0.0
    return img


def _cutmix_box(h: int, w: int, lam: float, rng) -> tuple[int, int, int, int]:
    """Clipped box whose unclipped area ratio is 1 - lam, uniformly centered.

    A draw of exactly 0 means total replacement, which only a full box
    realizes regardless of where the center lands.
    """
    if lam == 0.0:
        return 0, 0, w, h
    cut = np.sqrt(1.0 - lam)
    half_w = int(w * cut) // 2
    half_h = int(h * cut) // 2
    cx = int(rng.integers(0, w))
    cy = int(rng.integers(0, h))
    x1, x2 = np.clip(cx - half_w, 0, w), np.clip(cx + half_w, 0, w)
    y1, y2 = np.clip(cy - half_h, 0, h), np.clip(cy + half_h, 0, h)
    return int(x1), int(y1), int(x2), int(y2)


def cutmix_mix(inputs, labels, alpha: float, rng, lam: float | None = None) -> CutMixBatch:
    """Mix each sample with a random partner through one shared rectangle.

    The mix coefficient is drawn from Beta(alpha, alpha) unless given, a box
    with that area ratio is cut, clipped to the image, and the coefficient is
    recomputed from the clipped area so that the label weights match the
    pixel fractions exactly.
    """
    x = np.asarray(inputs)
    y = np.asarray(labels)
    if x.shape[0] < 2:
        raise ValueError("cutmix needs a batch of at least two samples")
    if x.ndim != 4:
        raise ValueError(f"expected (M, C, H, W) inputs, got shape {x.shape}")
    perm = rng.permutation(x.shape[0])
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    _, _, h, w = x.shape
    x1, y1, x2, y2 = _cutmix_box(h, w, lam, rng)
    mixed = x.copy()
    mixed[:, :, y1:y2, x1:x2] = x[perm][:, :, y1:y2, x1:x2]
    lam_eff = 1.0 - (x2 - x1) * (y2 - y1) / (h * w)
    return CutMixBatch(
        mixed_inputs=mixed,
        ya=y.copy(),
        yb=y[perm],
        lambda_mix=np.full(x.shape[0], lam_eff),
    )
