"""Simulated dataset shift: image perturbations, class-overlap splits, and synthetic data.

Covariate shift is simulated with four perturbation families (rotation,
brightness, additive Gaussian noise, cut-out). Concept shift is simulated by
splitting classes between a train side and a test side with a controllable
shared fraction, and by streaming random class subsets cycle after cycle.
Images live in [0, 1] before any model-side normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .linalg import as_tensor4

__all__ = [
    "Rotation",
    "Brightness",
    "GaussianNoise",
    "CutOut",
    "ShiftSpec",
    "OverlapSpec",
    "SyntheticDataset",
    "generate_dataset",
    "apply_shift",
    "overlapping_split",
    "cycle_stream",
]

DATA_RANGE = (0.0, 1.0)


@dataclass(frozen=True)
class Rotation:
    degrees: float

    def __post_init__(self):
        if not 0.0 <= self.degrees < 360.0:
            raise ValueError(f"degrees must lie in [0, 360), got {self.degrees}")


@dataclass(frozen=True)
class Brightness:
    delta: float


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


@dataclass(frozen=True)
class CutOut:
    holes: int
    hole_size: int

    def __post_init__(self):
        if self.holes < 0 or self.hole_size < 0:
            raise ValueError("holes and hole_size must be non-negative")


ShiftSpec = Union[Rotation, Brightness, GaussianNoise, CutOut]


@dataclass(frozen=True)
class OverlapSpec:
    """Class-overlap protocol: both sides get `classes_per_split` classes, of which
    round(overlap_probability * classes_per_split) are shared."""

    total_classes: int
    classes_per_split: int
    overlap_probability: float
    seed: int = 0

    def __post_init__(self):
        if self.classes_per_split > self.total_classes:
            raise ValueError("classes_per_split cannot exceed total_classes")
        if not 0.0 <= self.overlap_probability <= 1.0:
            raise ValueError(f"overlap probability must lie in [0, 1], got {self.overlap_probability}")


@dataclass
class SyntheticDataset:
    """Images (N, C, H, W) in [0, 1] with integer labels in [0, class_count).

    class_ids lists the original class ids actually present (subsets produced
    by splits and cycles keep their parent's label space).
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    class_ids: tuple[int, ...]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = as_tensor4(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "SyntheticDataset":
        idx = np.asarray(indices, dtype=np.int64)
        present = tuple(sorted(int(c) for c in np.unique(self.labels[idx])))
        return SyntheticDataset(
            images=self.images[idx].copy(),
            labels=self.labels[idx].copy(),
            class_count=self.class_count,
            class_ids=present,
            params=dict(self.params),
        )


# Integer cycle counts (cx, cy) per class: gratings with distinct integer
# frequencies are orthogonal over the periodic image grid, so class patterns
# stay statistically distinct even inside mixed batches.
_FREQ_PAIRS = (
    (1, 0), (0, 2), (2, 1), (1, 3), (3, 0), (0, 1), (2, 3), (3, 1),
    (4, 1), (1, 4), (2, 0), (0, 3), (3, 2), (4, 3), (1, 1), (2, 2),
    (4, 0), (0, 4), (3, 3), (1, 2), (2, 4), (4, 2), (3, 4), (5, 1),
)


def generate_dataset(
    class_count: int,
    samples_per_class: int,
    seed: int = 0,
    image_size: int = 16,
) -> SyntheticDataset:
    """Seeded synthetic image classes: orthogonal gratings with distinct statistics.

    Class k is a sinusoidal grating at its own integer spatial frequency with
    a seeded phase, a per-class brightness offset, and a per-class contrast;
    each sample adds phase jitter and Gaussian pixel noise. Values are
    clipped to [0, 1]. Deterministic per seed.
    """
    if class_count < 2:
        raise ValueError(f"need at least 2 classes, got {class_count}")
    if samples_per_class < 1:
        raise ValueError("need at least 1 sample per class")
    rng = np.random.default_rng(seed)
    h = w = image_size
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    offsets = np.linspace(-0.15, 0.15, class_count)
    amplitudes = 0.18 + 0.12 * ((np.arange(class_count) * 5) % class_count) / max(class_count - 1, 1)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=class_count)
    images = np.empty((class_count * samples_per_class, 1, h, w))
    labels = np.empty(class_count * samples_per_class, dtype=np.int64)
    i = 0
    for k in range(class_count):
        cx, cy = _FREQ_PAIRS[k % len(_FREQ_PAIRS)]
        carrier = 2.0 * np.pi * (cx * xx + cy * yy) / image_size
        for _ in range(samples_per_class):
            phase = phases[k] + rng.uniform(-0.4, 0.4)
            img = 0.5 + offsets[k] + amplitudes[k] * np.sin(carrier + phase)
            img = img + rng.normal(0.0, 0.05, size=(h, w))
            images[i, 0] = np.clip(img, *DATA_RANGE)
            labels[i] = k
            i += 1
    return SyntheticDataset(
        images=images,
        labels=labels,
        class_count=class_count,
        class_ids=tuple(range(class_count)),
        params={
            "seed": seed,
            "image_size": image_size,
            "phases": phases.tolist(),
            "offsets": offsets.tolist(),
            "amplitudes": amplitudes.tolist(),
        },
    )


def _rotate_nearest(images: np.ndarray, degrees: float) -> np.ndarray:
    """Nearest-neighbor rotation about the image center ((H-1)/2, (W-1)/2).

    Out-of-bounds source pixels take the mean of the input tensor, which keeps
    the operation seed-free. Multiples of 90 degrees map indices exactly.
    """
    b, c, h, w = images.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: source coordinates that land on each output pixel
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    sy = cy + (yy - cy) * cos_t - (xx - cx) * sin_t
    sx = cx + (yy - cy) * sin_t + (xx - cx) * cos_t
    syi = np.rint(sy).astype(np.int64)
    sxi = np.rint(sx).astype(np.int64)
    inside = (syi >= 0) & (syi < h) & (sxi >= 0) & (sxi < w)
    fill = float(images.mean())
    out = np.full_like(images, fill)
    out[:, :, inside] = images[:, :, syi[inside], sxi[inside]]
    return out


def apply_shift(images, spec: ShiftSpec, seed: int = 0) -> np.ndarray:
    """Apply one perturbation to a batch of images; zero severity is a bitwise identity."""
    a = as_tensor4(images)
    if isinstance(spec, Rotation):
        return _rotate_nearest(a, spec.degrees)
    if isinstance(spec, Brightness):
        return np.clip(a + spec.delta, *DATA_RANGE)
    if isinstance(spec, GaussianNoise):
        if spec.sigma == 0.0:
            return a.copy()
        rng = np.random.default_rng(seed)
        return a + rng.normal(0.0, spec.sigma, size=a.shape)
    if isinstance(spec, CutOut):
        out = a.copy()
        if spec.holes == 0 or spec.hole_size == 0:
            return out
        rng = np.random.default_rng(seed)
        b, _, h, w = a.shape
        size = min(spec.hole_size, h, w)
        for i in range(b):
            for _ in range(spec.holes):
                top = int(rng.integers(0, h - size + 1))
                left = int(rng.integers(0, w - size + 1))
                out[i, :, top : top + size, left : left + size] = 0.0
        return out
    raise TypeError(f"unknown shift spec {spec!r}")


def overlapping_split(dataset: SyntheticDataset, spec: OverlapSpec):
    """Split classes into a train side and a test side with a controlled shared fraction.

    round(p * c) classes are shared; their samples are divided disjointly
    (half and half) between the sides. Each exclusive class contributes all of
    its samples to its side. Sample index sets never intersect. Returns
    (train set, test set, number of shared classes).
    """
    k = spec.total_classes
    if dataset.class_count != k:
        raise ValueError(f"dataset has {dataset.class_count} classes, spec says {k}")
    c = spec.classes_per_split
    shared_n = int(round(spec.overlap_probability * c))
    exclusive = c - shared_n
    if shared_n + 2 * exclusive > k:
        raise ValueError(
            f"infeasible overlap: {c} classes per side with {shared_n} shared needs "
            f"{shared_n + 2 * exclusive} distinct classes, dataset has {k}"
        )
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(k)
    shared = perm[:shared_n]
    train_only = perm[shared_n : shared_n + exclusive]
    test_only = perm[shared_n + exclusive : shared_n + 2 * exclusive]

    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for cls in train_only:
        train_idx.append(np.flatnonzero(dataset.labels == cls))
    for cls in test_only:
        test_idx.append(np.flatnonzero(dataset.labels == cls))
    for cls in shared:
        idx = np.flatnonzero(dataset.labels == cls)
        idx = idx[rng.permutation(idx.shape[0])]
        half = idx.shape[0] // 2
        train_idx.append(idx[:half])
        test_idx.append(idx[half:])
    train = dataset.subset(np.sort(np.concatenate(train_idx))) if train_idx else dataset.subset([])
    test = dataset.subset(np.sort(np.concatenate(test_idx))) if test_idx else dataset.subset([])
    return train, test, shared_n


def cycle_stream(dataset: SyntheticDataset, c: int, cycles: int, seed: int = 0) -> list[SyntheticDataset]:
    """Per cycle, draw c classes uniformly without replacement and return that subset.

    Draws are fresh each cycle, so consecutive cycles overlap in roughly
    (c / class_count)^2 of the label space. Deterministic per seed.
    """
    if c < 1 or c > dataset.class_count:
        raise ValueError(f"c must lie in [1, {dataset.class_count}], got {c}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(cycles):
        classes = np.sort(rng.choice(dataset.class_count, size=c, replace=False))
        idx = np.flatnonzero(np.isin(dataset.labels, classes))
        sub = dataset.subset(idx)
        sub.class_ids = tuple(int(v) for v in classes)
        out.append(sub)
    return out
