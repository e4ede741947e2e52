"""Frozen-feature evaluation: linear probe, kNN probe, view-invariance score.

All probes consume teacher CLS features extracted with a deterministic
resize to the model's input size and nothing else; augmentation never leaks
into evaluation. The invariance metric is the one exception by design: it
re-augments held-out images to measure how tightly views of the same image
cluster relative to cross-image pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import augment, imaging
from . import tensor as T
from . import vit
from .errors import DimensionError, ParameterError, ProbeError


@dataclass
class FeatureTable:
    features: np.ndarray  # float32 [n, d]
    labels: np.ndarray  # int64 [n]
    split: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DimensionError(f"features must be [n, d], got {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise DimensionError(
                f"{len(self.features)} feature rows vs {len(self.labels)} labels"
            )
        if not np.all(np.isfinite(self.features)):
            raise ProbeError(f"non-finite features in split {self.split!r}")

    def __len__(self) -> int:
        return len(self.features)


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    lr: float = 1e-2
    momentum: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    n_train: int
    n_val: int


def extract_features(
    params: vit.ModelParams, dataset, batch_size: int = 256, split: str = "train"
) -> FeatureTable:
    """Encoder CLS features for every sample, gradients off.

    Images are bilinearly resized to the model's input size; no crops, no
    photometrics, so feature extraction is a pure function of (params, data).
    """
    size = params.cfg.image_size
    n = len(dataset)
    feats = np.empty((n, params.cfg.embed_dim), dtype=np.float32)
    with T.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            imgs = dataset.image_batch(idx)
            if imgs.shape[-2:] != (size, size):
                imgs = np.stack([imaging.bilinear_resize(im, size, size) for im in imgs])
            cls, _ = vit.encode_images(params, imgs)
            feats[idx] = cls.data.astype(np.float32)
    return FeatureTable(features=feats, labels=dataset.labels.copy(), split=split)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


def _standardize(train: np.ndarray, other: np.ndarray):
    mu = train.mean(axis=0)
    sd = np.maximum(train.std(axis=0), 1e-6)
    return (train - mu) / sd, (other - mu) / sd


def _check_tables(train: FeatureTable, val: FeatureTable) -> int:
    if train.features.shape[1] != val.features.shape[1]:
        raise DimensionError(
            f"train dim {train.features.shape[1]} != val dim {val.features.shape[1]}"
        )
    if np.unique(train.labels).size < 2:
        raise ProbeError("training split contains a single class; probe is degenerate")
    return int(max(train.labels.max(), val.labels.max())) + 1


def linear_probe(
    train: FeatureTable, val: FeatureTable, cfg: ProbeConfig = ProbeConfig()
) -> ProbeResult:
    """Multinomial logistic regression on standardized frozen features.

    Full-batch gradient descent with heavy-ball momentum and a cosine learning
    rate, fixed epoch count. Full-batch makes the gradient a mean over rows,
    so duplicating the training set reproduces the exact trajectory.
    """
    n_classes = _check_tables(train, val)
    x_tr, x_va = _standardize(
        train.features.astype(np.float64), val.features.astype(np.float64)
    )
    n, d = x_tr.shape
    onehot = np.eye(n_classes)[train.labels]

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x11EA)))
    w = rng.normal(0.0, 0.01, size=(d, n_classes))
    b = np.zeros(n_classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)

    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
        logits = x_tr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        gw = x_tr.T @ (p - onehot) / n
        gb = (p - onehot).mean(axis=0)
        vw = cfg.momentum * vw - lr * gw
        vb = cfg.momentum * vb - lr * gb
        w += vw
        b += vb

    pred = np.argmax(x_va @ w + b, axis=1)
    acc = float(np.mean(pred == val.labels))
    return ProbeResult(accuracy=acc, n_train=n, n_val=len(val))


# ---------------------------------------------------------------------------
# kNN probe
# ---------------------------------------------------------------------------


def _row_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def knn_probe(train: FeatureTable, val: FeatureTable, k: int = 20) -> ProbeResult:
    """Cosine-similarity majority vote; ties go to the smaller class index."""
    n_classes = _check_tables(train, val)
    if not 1 <= k <= len(train):
        raise ParameterError(f"k={k} outside [1, n_train={len(train)}]")
    z_tr = _row_normalize(train.features.astype(np.float64))
    z_va = _row_normalize(val.features.astype(np.float64))
    sims = z_va @ z_tr.T  # [n_val, n_train]
    # argpartition keeps the k largest; exact order within them is irrelevant
    top = np.argpartition(-sims, kth=k - 1, axis=1)[:, :k]
    votes = train.labels[top]
    correct = 0
    for row_votes, y in zip(votes, val.labels):
        counts = np.bincount(row_votes, minlength=n_classes)
        correct += int(np.argmax(counts) == y)  # argmax -> first max -> smallest class
    return ProbeResult(
        accuracy=correct / len(val), n_train=len(train), n_val=len(val)
    )


# ---------------------------------------------------------------------------
# view invariance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InvarianceReport:
    n_images: int
    n_views: int
    mean_pos_cos: float
    mean_neg_cos: float
    neg_std: float
    normalized_sim: float | str  # "undefined" when neg_std < 1e-6


def pairwise_cos_stats(feats: np.ndarray) -> tuple[float, float, float]:
    """Cosine statistics over view features [n_images, n_views, d].

    Positive pairs: distinct views of one image, averaged per image and then
    over images. Negative pairs: views of distinct images, pooled. Returns
    (mean_pos, mean_neg, std_neg); std is population std.
    """
    n_img, n_views, d = feats.shape
    z = _row_normalize(feats.reshape(n_img * n_views, d).astype(np.float64))
    gram = z @ z.T
    img_of = np.repeat(np.arange(n_img), n_views)
    r, c = np.triu_indices(n_img * n_views, k=1)
    same = img_of[r] == img_of[c]
    pos_vals = gram[r[same], c[same]].reshape(n_img, -1)
    mean_pos = float(pos_vals.mean(axis=1).mean())
    neg_vals = gram[r[~same], c[~same]]
    return mean_pos, float(neg_vals.mean()), float(neg_vals.std())


def invariance_from_features(feats: np.ndarray) -> InvarianceReport:
    n_img, n_views, _ = feats.shape
    mean_pos, mean_neg, neg_std = pairwise_cos_stats(feats)
    if neg_std < 1e-6:
        sim: float | str = "undefined"
    else:
        sim = (mean_pos - mean_neg) / neg_std
    return InvarianceReport(
        n_images=n_img,
        n_views=n_views,
        mean_pos_cos=mean_pos,
        mean_neg_cos=mean_neg,
        neg_std=neg_std,
        normalized_sim=sim,
    )


def invariance_metric(
    params: vit.ModelParams,
    images: np.ndarray,
    aug_cfg: augment.AugmentationConfig,
    n_views: int = 16,
    seed: int = 0,
    batch_size: int = 256,
) -> InvarianceReport:
    """Cluster tightness of same-image views in feature space.

    Every view is a random resized crop to the global size plus one draw of
    the independent photometric chain (the solarize-free table), no matter
    which augmentation mode trained the model, so scores are comparable
    across modes. Deterministic given (params, images, seed).
    """
    if n_views < 2:
        raise ParameterError(f"need >= 2 views per image, got {n_views}")
    if len(images) < 2:
        raise ParameterError("need >= 2 images for cross-image negatives")
    aug_cfg.validate()
    ranges = aug_cfg.ranges_for_view("global", 0)
    size = aug_cfg.global_size
    views = np.empty((len(images), n_views, 3, size, size), dtype=np.float32)
    for i, img in enumerate(images):
        img = np.asarray(img, dtype=np.float32)
        for v in range(n_views):
            srng = augment.SampleRng.from_key(seed, 0x11F, i, v)
            view, _ = augment.random_resized_crop(
                img, srng.geometric, aug_cfg.global_scale, aug_cfg.ratio_range, size
            )
            photo = augment.sample_photometric_params(srng.photometric, ranges)
            views[i, v] = augment.apply_photometric(view, photo)

    flat = views.reshape(-1, 3, size, size)
    feats = np.empty((len(flat), params.cfg.embed_dim), dtype=np.float32)
    with T.no_grad():
        for start in range(0, len(flat), batch_size):
            stop = min(start + batch_size, len(flat))
            cls, _ = vit.encode_images(params, flat[start:stop])
            feats[start:stop] = cls.data.astype(np.float32)
    return invariance_from_features(feats.reshape(len(images), n_views, -1))
