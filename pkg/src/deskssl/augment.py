"""Multicrop view generation and block masking.

Four view-generation modes, ordered from most to least augmentation:

- ``original``     random resized crops + an independent photometric draw per view
- ``shared``       random resized crops + ONE photometric draw applied to every view
- ``crop_resize``  random resized crops only, photometrics are the identity
- ``crop``         one resize of the source image, then pure subwindow crops; no
                   photometrics and no per-view resampling

Randomness is split into a geometric and a photometric stream so that, for a
fixed seed, ``original`` and ``shared`` produce identical crop rectangles and
differ only in color-space treatment.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .errors import ConfigError, ContractViolation, ParameterError, PlanError

MODES = ("original", "shared", "crop_resize", "crop")


# ---------------------------------------------------------------------------
# photometric parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhotometricParams:
    """One concrete draw of the photometric chain.

    The chain is applied in a fixed order: color jitter (brightness, contrast,
    saturation, hue), grayscale, gaussian blur, horizontal flip, solarize.
    Factor 1.0 / delta 0.0 / sigma 0.0 / False are all no-ops.
    """

    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    grayscale: bool = False
    blur_sigma: float = 0.0
    flip: bool = False
    solarize: bool = False
    solarize_threshold: float = 0.5

    @classmethod
    def identity(cls) -> "PhotometricParams":
        return cls()

    def is_identity(self) -> bool:
        return (
            self.brightness == 1.0
            and self.contrast == 1.0
            and self.saturation == 1.0
            and self.hue == 0.0
            and not self.grayscale
            and self.blur_sigma == 0.0
            and not self.flip
            and not self.solarize
        )


@dataclass(frozen=True)
class PhotometricRanges:
    """Sampling distribution for ``sample_photometric_params``.

    Defaults are the global-view table; solarize is off here and enabled per
    view by the caller (second global view only in ``original`` mode).
    """

    p_jitter: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    p_grayscale: float = 0.2
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    p_flip: float = 0.5
    p_solarize: float = 0.0
    solarize_threshold: float = 0.5

    def replace(self, **kw) -> "PhotometricRanges":
        return dataclasses.replace(self, **kw)

    def validate(self) -> None:
        for name in ("p_jitter", "p_grayscale", "p_blur", "p_flip", "p_solarize"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} outside [0, 1]")
        if self.blur_sigma[0] <= 0 or self.blur_sigma[1] < self.blur_sigma[0]:
            raise ConfigError(f"bad blur sigma range {self.blur_sigma}")


def sample_photometric_params(
    rng: np.random.Generator, ranges: PhotometricRanges
) -> PhotometricParams:
    """Draw one photometric bundle.

    Gate draws are always consumed (even at p=0) so the stream layout does not
    depend on the probability table; value draws happen only when a gate fires.
    With every probability at zero the result is exactly the identity bundle.
    """
    brightness = contrast = saturation = 1.0
    hue = 0.0
    if rng.random() < ranges.p_jitter:
        brightness = 1.0 + rng.uniform(-ranges.brightness, ranges.brightness)
        contrast = 1.0 + rng.uniform(-ranges.contrast, ranges.contrast)
        saturation = 1.0 + rng.uniform(-ranges.saturation, ranges.saturation)
        hue = rng.uniform(-ranges.hue, ranges.hue)
    grayscale = bool(rng.random() < ranges.p_grayscale)
    blur_sigma = 0.0
    if rng.random() < ranges.p_blur:
        blur_sigma = float(rng.uniform(*ranges.blur_sigma))
    flip = bool(rng.random() < ranges.p_flip)
    solarize = bool(rng.random() < ranges.p_solarize)
    return PhotometricParams(
        brightness=float(brightness),
        contrast=float(contrast),
        saturation=float(saturation),
        hue=float(hue),
        grayscale=grayscale,
        blur_sigma=blur_sigma,
        flip=flip,
        solarize=solarize,
        solarize_threshold=ranges.solarize_threshold,
    )


def apply_photometric(img: np.ndarray, params: PhotometricParams) -> np.ndarray:
    """Apply the photometric chain to a CHW image in [0, 1]; never mutates."""
    out = img
    if params.brightness != 1.0:
        out = imaging.adjust_brightness(out, params.brightness)
    if params.contrast != 1.0:
        out = imaging.adjust_contrast(out, params.contrast)
    if params.saturation != 1.0:
        out = imaging.adjust_saturation(out, params.saturation)
    if params.hue != 0.0:
        out = imaging.adjust_hue(out, params.hue)
    if params.grayscale:
        out = imaging.to_grayscale(out)
    if params.blur_sigma > 0.0:
        out = imaging.gaussian_blur(out, params.blur_sigma)
    if params.flip:
        out = imaging.hflip(out)
    if params.solarize:
        out = imaging.solarize(out, params.solarize_threshold)
    if out is img:
        out = img.copy()
    return out.astype(img.dtype, copy=False)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def random_resized_crop(
    img: np.ndarray,
    rng: np.random.Generator,
    scale_range: tuple[float, float],
    ratio_range: tuple[float, float],
    out_size: int,
) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Sample a crop whose integer-pixel area fraction lies in ``scale_range``.

    Up to 10 rejection attempts; the fallback is a center crop with a side
    length chosen so the fraction constraint provably holds. Returns the view
    resized to ``out_size`` and the accepted rect as (x, y, w, h) in source
    pixels.
    """
    lo, hi = scale_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ParameterError(f"scale range {scale_range} outside (0, 1]")
    _, h_img, w_img = img.shape
    area = h_img * w_img

    rect = None
    for _ in range(10):
        frac = rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(math.log(ratio_range[0]), math.log(ratio_range[1])))
        w = int(round(math.sqrt(frac * area * aspect)))
        h = int(round(math.sqrt(frac * area / aspect)))
        if 0 < w <= w_img and 0 < h <= h_img and lo <= (w * h) / area <= hi:
            x = int(rng.integers(0, w_img - w + 1))
            y = int(rng.integers(0, h_img - h + 1))
            rect = (x, y, w, h)
            break
    if rect is None:
        # fallback: center square whose integer side keeps the fraction in range
        s_lo = int(math.ceil(math.sqrt(lo * area)))
        s_hi = min(int(math.floor(math.sqrt(hi * area))), h_img, w_img)
        if s_lo > s_hi:
            raise ContractViolation(
                f"no integer crop side satisfies scale range {scale_range} "
                f"on a {h_img}x{w_img} image"
            )
        s = s_hi
        rect = ((w_img - s) // 2, (h_img - s) // 2, s, s)

    x, y, w, h = rect
    crop = img[:, y : y + h, x : x + w]
    return imaging.bilinear_resize(crop, out_size, out_size), rect


def resize_then_random_crop(
    img: np.ndarray,
    rng: np.random.Generator,
    resize_to: int,
    crop_size: int,
) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Resize once, then cut an axis-aligned subwindow with no resampling.

    The returned view is a bit-exact copy of a window of the resized image;
    the rect coordinates live in the resized image's pixel space.
    """
    if crop_size > resize_to:
        raise ConfigError(f"crop_size {crop_size} exceeds resize_to {resize_to}")
    resized = imaging.bilinear_resize(img, resize_to, resize_to)
    view, rect = _subwindow_crop(resized, rng, crop_size)
    return view, rect


def _subwindow_crop(
    resized: np.ndarray, rng: np.random.Generator, crop_size: int
) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    side = resized.shape[1]
    x = int(rng.integers(0, side - crop_size + 1))
    y = int(rng.integers(0, side - crop_size + 1))
    view = resized[:, y : y + crop_size, x : x + crop_size].copy()
    return view, (x, y, crop_size, crop_size)


# ---------------------------------------------------------------------------
# view generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationConfig:
    mode: str = "original"
    n_global: int = 2
    n_local: int = 8
    global_size: int = 32
    local_size: int = 16
    global_scale: tuple[float, float] = (0.32, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.32)
    ratio_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    resize_to: int = 40
    photometric: PhotometricRanges = field(default_factory=PhotometricRanges)
    solarize_second_global: float = 0.2
    mask_ratio: float = 0.3

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.n_global < 1 or self.n_local < 0:
            raise ConfigError("need at least one global view and n_local >= 0")
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 1.0):
                raise ConfigError(f"{name}={(lo, hi)} outside (0, 1]")
        if self.ratio_range[0] <= 0 or self.ratio_range[1] < self.ratio_range[0]:
            raise ConfigError(f"bad aspect ratio range {self.ratio_range}")
        if self.mode == "crop" and self.resize_to < max(self.global_size, self.local_size):
            raise ConfigError(
                f"resize_to={self.resize_to} smaller than the largest view size"
            )
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio={self.mask_ratio} outside [0, 1]")
        self.photometric.validate()

    def ranges_for_view(self, kind: str, index: int) -> PhotometricRanges:
        """Per-view probability table for ``original`` mode.

        Solarize fires only on the second global view, matching the convention
        of asymmetric treatment of the two global crops.
        """
        if kind == "global" and index == 1:
            return self.photometric.replace(p_solarize=self.solarize_second_global)
        return self.photometric.replace(p_solarize=0.0)

    def shared_ranges(self) -> PhotometricRanges:
        """Table for the single draw in ``shared`` mode.

        Position-independent, so solarize keeps its nominal probability and,
        when drawn, lands on every view.
        """
        return self.photometric.replace(p_solarize=self.solarize_second_global)


@dataclass(frozen=True)
class ViewProvenance:
    kind: str  # "global" | "local"
    index: int
    rect: tuple[int, int, int, int]  # (x, y, w, h)
    crop_space: str  # "source" or "resized"
    photometric: PhotometricParams


@dataclass
class ViewSet:
    global_views: list[np.ndarray]
    local_views: list[np.ndarray]
    provenance: list[ViewProvenance]

    @property
    def n_views(self) -> int:
        return len(self.global_views) + len(self.local_views)

    def all_views(self) -> list[np.ndarray]:
        return list(self.global_views) + list(self.local_views)


class SampleRng:
    """Two independent substreams (geometric, photometric) for one sample.

    Built from a SeedSequence key so draws in one stream can never shift the
    other; this is what keeps crop rectangles identical between ``original``
    and ``shared`` at a fixed seed.
    """

    def __init__(self, geometric: np.random.Generator, photometric: np.random.Generator):
        self.geometric = geometric
        self.photometric = photometric

    @classmethod
    def from_key(cls, *key: int) -> "SampleRng":
        geo_ss, photo_ss = np.random.SeedSequence(key).spawn(2)
        return cls(np.random.default_rng(geo_ss), np.random.default_rng(photo_ss))


def _as_sample_rng(rng) -> SampleRng:
    if isinstance(rng, SampleRng):
        return rng
    if isinstance(rng, np.random.SeedSequence):
        geo, photo = rng.spawn(2)
        return SampleRng(np.random.default_rng(geo), np.random.default_rng(photo))
    if isinstance(rng, (int, np.integer)):
        return SampleRng.from_key(int(rng))
    if isinstance(rng, tuple):
        return SampleRng.from_key(*rng)
    raise ParameterError(f"cannot build SampleRng from {type(rng).__name__}")


def generate_views(img: np.ndarray, cfg: AugmentationConfig, rng) -> ViewSet:
    """Produce the multicrop view set for one source image.

    Geometry is sampled first for every view (globals then locals) from the
    geometric stream; photometrics afterwards from the photometric stream.
    ``crop`` mode resamples the source exactly once and then only takes
    subwindows; ``crop_resize`` and ``crop`` leave pixels otherwise untouched.
    """
    cfg.validate()
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractViolation(f"expected a 3xHxW image, got shape {img.shape}")
    if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
        raise ContractViolation("image values must lie in [0, 1]")
    srng = _as_sample_rng(rng)

    plan = [("global", i, cfg.global_size, cfg.global_scale) for i in range(cfg.n_global)]
    plan += [("local", i, cfg.local_size, cfg.local_scale) for i in range(cfg.n_local)]

    views: list[np.ndarray] = []
    rects: list[tuple[int, int, int, int]] = []
    if cfg.mode == "crop":
        resized = imaging.bilinear_resize(img, cfg.resize_to, cfg.resize_to)
        for _, _, out_size, _ in plan:
            view, rect = _subwindow_crop(resized, srng.geometric, out_size)
            views.append(view)
            rects.append(rect)
        crop_space = "resized"
    else:
        for _, _, out_size, scale in plan:
            view, rect = random_resized_crop(
                img, srng.geometric, scale, cfg.ratio_range, out_size
            )
            views.append(view)
            rects.append(rect)
        crop_space = "source"

    if cfg.mode == "original":
        params = [
            sample_photometric_params(srng.photometric, cfg.ranges_for_view(kind, i))
            for kind, i, _, _ in plan
        ]
    elif cfg.mode == "shared":
        one = sample_photometric_params(srng.photometric, cfg.shared_ranges())
        params = [one] * len(plan)
    else:
        params = [PhotometricParams.identity()] * len(plan)

    out_views = [
        apply_photometric(v, p) if not p.is_identity() else v
        for v, p in zip(views, params)
    ]
    provenance = [
        ViewProvenance(kind=kind, index=i, rect=rect, crop_space=crop_space, photometric=p)
        for (kind, i, _, _), rect, p in zip(plan, rects, params)
    ]
    n_g = cfg.n_global
    return ViewSet(
        global_views=out_views[:n_g],
        local_views=out_views[n_g:],
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# block masking
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MaskPlan:
    """Which token-grid positions a student view should see as mask tokens."""

    grid: tuple[int, int]
    indices: np.ndarray  # sorted unique int64 in [0, grid_h * grid_w)

    def __post_init__(self):
        h, w = self.grid
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if idx.ndim != 1:
            raise PlanError(f"indices must be 1-D, got shape {idx.shape}")
        if idx.size:
            if idx.min() < 0 or idx.max() >= h * w:
                raise PlanError(f"mask index outside [0, {h * w})")
            if np.unique(idx).size != idx.size:
                raise PlanError("mask indices must be unique")
            if not np.all(np.diff(idx) > 0):
                raise PlanError("mask indices must be sorted")

    @property
    def n_masked(self) -> int:
        return int(self.indices.size)

    def as_bool(self) -> np.ndarray:
        flat = np.zeros(self.grid[0] * self.grid[1], dtype=bool)
        flat[self.indices] = True
        return flat


_MAX_BLOCK_SIDE = 4


def sample_mask_plan(
    rng: np.random.Generator, ratio: float, grid: tuple[int, int]
) -> MaskPlan:
    """Sample rectangular blocks until exactly round(ratio * n) cells are set.

    Blocks may overlap; newly covered cells are recorded in draw order and the
    overshoot from the final block is trimmed, so the count is always exact.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"mask ratio {ratio} outside [0, 1]")
    h, w = grid
    if h < 1 or w < 1:
        raise ParameterError(f"bad token grid {grid}")
    n = h * w
    target = int(math.floor(ratio * n + 0.5))
    if target == 0:
        return MaskPlan(grid=grid, indices=np.empty(0, dtype=np.int64))

    covered = np.zeros((h, w), dtype=bool)
    order: list[int] = []
    max_bh = min(h, _MAX_BLOCK_SIDE)
    max_bw = min(w, _MAX_BLOCK_SIDE)
    while len(order) < target:
        bh = int(rng.integers(1, max_bh + 1))
        bw = int(rng.integers(1, max_bw + 1))
        y = int(rng.integers(0, h - bh + 1))
        x = int(rng.integers(0, w - bw + 1))
        for yy in range(y, y + bh):
            for xx in range(x, x + bw):
                if not covered[yy, xx]:
                    covered[yy, xx] = True
                    order.append(yy * w + xx)
    indices = np.sort(np.asarray(order[:target], dtype=np.int64))
    return MaskPlan(grid=grid, indices=indices)
