"""Deterministic data sources.

The synthetic set renders parametric figures at 64px and stores them at 40px
so the crop pipeline's resize stage has headroom. Classes split into two
signal families: shape-coded classes draw a distinct figure in a random
color, color-coded classes all draw the same figure (an ellipse) and differ
only by hue. Photometric invariance therefore erases the color classes'
signal while leaving shape classes intact.

Images are stored as uint8 and scaled to float [0, 1] at access time; at the
100k tier a float store would not fit desk memory.
"""

from __future__ import annotations

import colorsys
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import imaging
from .errors import ConfigError, FormatError, ParameterError

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_MAX_LABEL = 9


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 20_000
    n_classes: int = 10
    image_size: int = 40
    render_size: int = 64
    shape_fraction: float = 0.6
    color_fraction: float = 0.4
    noise_std: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError(f"need >= 2 classes, got {self.n_classes}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if abs(self.shape_fraction + self.color_fraction - 1.0) > 1e-9:
            raise ConfigError("shape_fraction + color_fraction must sum to 1")
        if not 0.0 <= self.shape_fraction <= 1.0:
            raise ConfigError("fractions must lie in [0, 1]")
        if self.render_size < self.image_size:
            raise ConfigError("render_size must be >= image_size")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    @property
    def n_shape_classes(self) -> int:
        return int(round(self.shape_fraction * self.n_classes))

    @property
    def n_color_classes(self) -> int:
        return self.n_classes - self.n_shape_classes

    def content_hash(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, 3, H, W]
    labels: np.ndarray  # int64 [N]
    n_classes: int
    provenance: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    def image(self, i: int) -> np.ndarray:
        """One sample as float32 CHW in [0, 1]."""
        return self.images[i].astype(np.float32) / 255.0

    def image_batch(self, indices) -> np.ndarray:
        return self.images[np.asarray(indices)].astype(np.float32) / 255.0

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def take(self, indices, provenance: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=self.images[idx].copy(),
            labels=self.labels[idx].copy(),
            n_classes=self.n_classes,
            provenance=provenance or f"{self.provenance}|take[{idx.size}]",
        )


# ---------------------------------------------------------------------------
# synthetic renderer
# ---------------------------------------------------------------------------

# shape-coded classes cycle through these figures; color-coded classes all
# use the ellipse, which is deliberately absent from this list
_SHAPE_NAMES = ("disk", "square", "triangle", "plus", "ring", "stripes")

_COLOR_CLASS_HUES = (0.0, 0.25, 0.5, 0.75)


def _shape_mask(name: str, xr: np.ndarray, yr: np.ndarray) -> np.ndarray:
    r = np.sqrt(xr * xr + yr * yr)
    if name == "disk":
        return r <= 1.0
    if name == "square":
        return np.maximum(np.abs(xr), np.abs(yr)) <= 0.9
    if name == "triangle":
        return (yr <= 0.9) & (yr >= 2.2 * np.abs(xr) - 1.1)
    if name == "plus":
        return ((np.abs(xr) <= 0.35) & (np.abs(yr) <= 1.0)) | (
            (np.abs(yr) <= 0.35) & (np.abs(xr) <= 1.0)
        )
    if name == "ring":
        return (r >= 0.55) & (r <= 1.0)
    if name == "stripes":
        inside = np.maximum(np.abs(xr), np.abs(yr)) <= 1.0
        return inside & (np.sin(3.0 * math.pi * xr) > 0)
    if name == "ellipse":
        return np.sqrt((xr / 1.0) ** 2 + (yr / 0.45) ** 2) <= 1.0
    raise ConfigError(f"unknown shape {name!r}")


def _render_sample(rng: np.random.Generator, cls: int, spec: SyntheticSpec) -> np.ndarray:
    rs = spec.render_size
    lin = np.linspace(-1.0, 1.0, rs)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    theta = rng.uniform(0.0, 2.0 * math.pi)
    cx, cy = rng.uniform(-0.35, 0.35, size=2)
    scale = rng.uniform(0.35, 0.7)
    ct, st = math.cos(theta), math.sin(theta)
    xs, ys = xx - cx, yy - cy
    xr = (ct * xs + st * ys) / scale
    yr = (-st * xs + ct * ys) / scale

    if cls < spec.n_shape_classes:
        name = _SHAPE_NAMES[cls % len(_SHAPE_NAMES)]
        hue = rng.uniform(0.0, 1.0)
        sat = rng.uniform(0.6, 1.0)
        val = rng.uniform(0.6, 1.0)
    else:
        name = "ellipse"
        color_idx = cls - spec.n_shape_classes
        hue = (_COLOR_CLASS_HUES[color_idx % len(_COLOR_CLASS_HUES)] + rng.uniform(-0.02, 0.02)) % 1.0
        sat = 0.9
        val = 0.9
    fg = np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float64)

    mask = _shape_mask(name, xr, yr).astype(np.float64)
    bg = rng.uniform(0.05, 0.45)
    img = bg * (1.0 - mask)[None] + fg[:, None, None] * mask[None]

    img = imaging.bilinear_resize(img, spec.image_size, spec.image_size)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


def synth_generate(spec: SyntheticSpec, seed: int | None = None) -> Dataset:
    """Render the full synthetic dataset; bit-deterministic given (spec, seed).

    Sample i's label is i mod n_classes and its latent draws come from an
    rng keyed on (seed, i), so prefixes of the dataset are reproducible
    regardless of n_samples.
    """
    spec.validate()
    seed = spec.seed if seed is None else seed
    n = spec.n_samples
    images = np.empty((n, 3, spec.image_size, spec.image_size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        cls = i % spec.n_classes
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A3D, i)))
        images[i] = _render_sample(rng, cls, spec)
        labels[i] = cls
    return Dataset(
        images=images,
        labels=labels,
        n_classes=spec.n_classes,
        provenance=f"synthetic:{spec.content_hash()}:seed{seed}",
    )


# ---------------------------------------------------------------------------
# CIFAR binary layout
# ---------------------------------------------------------------------------


def parse_cifar_binary(data: bytes, provenance: str = "cifar:<bytes>") -> Dataset:
    """Parse records of [1 label byte][1024 R][1024 G][1024 B]."""
    if len(data) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"truncated CIFAR file: length {len(data)} is not a multiple of "
            f"{CIFAR_RECORD_BYTES}; parsing stopped at byte offset "
            f"{len(data) - len(data) % CIFAR_RECORD_BYTES}"
        )
    n = len(data) // CIFAR_RECORD_BYTES
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels > CIFAR_MAX_LABEL)[0]
    if bad.size:
        rec = int(bad[0])
        raise FormatError(
            f"label byte {int(labels[rec])} > {CIFAR_MAX_LABEL} in record {rec} "
            f"at byte offset {rec * CIFAR_RECORD_BYTES}"
        )
    images = raw[:, 1:].reshape(n, 3, 32, 32).copy()
    return Dataset(images=images, labels=labels, n_classes=10, provenance=provenance)


def load_cifar_binary(path) -> Dataset:
    with open(path, "rb") as f:
        data = f.read()
    digest = hashlib.sha256(data).hexdigest()[:16]
    return parse_cifar_binary(data, provenance=f"cifar:{digest}")


# ---------------------------------------------------------------------------
# iteration and subsampling
# ---------------------------------------------------------------------------


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Pure function of (seed, epoch)."""
    ss = np.random.SeedSequence((seed, epoch, 0xBA7C4))
    return np.random.default_rng(ss).permutation(n)


def batch_iter(dataset: Dataset, batch_size: int, epoch: int, seed: int):
    """Yield index batches; last partial batch is dropped."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    perm = epoch_permutation(len(dataset), seed, epoch)
    for start in range(0, len(dataset) - batch_size + 1, batch_size):
        yield perm[start : start + batch_size]


def subsample(dataset: Dataset, k: int, seed: int) -> Dataset:
    """First k entries of one seeded permutation.

    The permutation depends only on (len(dataset), seed), so for fixed seed a
    2k-sample subset is a prefix of the 20k-sample subset: nested by
    construction for dataset-size sweeps.
    """
    if not 1 <= k <= len(dataset):
        raise ParameterError(f"cannot take {k} of {len(dataset)} samples")
    perm = np.random.default_rng(np.random.SeedSequence((seed, 0x5AB5))).permutation(
        len(dataset)
    )
    return dataset.take(perm[:k], provenance=f"{dataset.provenance}|sub{k}s{seed}")
