"""Evaluation tests: linear probe against separable/random/shuffled-label
baselines, kNN probe against a quadratic all-pairs oracle, and the
invariance score against a brute-force double loop over view pairs."""

import numpy as np
import pytest

from deskssl import evaluation as E
from deskssl import vit
from deskssl.augment import AugmentationConfig
from deskssl.errors import DimensionError, ParameterError, ProbeError
from deskssl.vit import ModelConfig

TINY = ModelConfig(
    image_size=8,
    patch_size=4,
    embed_dim=8,
    depth=1,
    num_heads=2,
    head_hidden_dim=16,
    head_bottleneck_dim=8,
    num_prototypes=12,
)

TINY_AUG = AugmentationConfig(
    mode="original", global_size=8, local_size=4, resize_to=10, n_local=2
)


def cluster_features(rng, n, n_classes, d=32, spread=5.0, noise=0.1):
    centers = rng.normal(0.0, spread, size=(n_classes, d))
    labels = rng.integers(0, n_classes, size=n)
    feats = centers[labels] + rng.normal(0.0, noise, size=(n, d))
    return feats.astype(np.float32), labels.astype(np.int64)


def random_table(rng, n, n_classes, d=32, split="x"):
    feats = rng.normal(size=(n, d)).astype(np.float32)
    labels = rng.integers(0, n_classes, size=n).astype(np.int64)
    return E.FeatureTable(feats, labels, split)


class TestFeatureTable:
    def test_rejects_non_2d(self):
        with pytest.raises(DimensionError):
            E.FeatureTable(np.zeros(5), np.zeros(5, dtype=np.int64), "x")

    def test_rejects_length_mismatch(self):
        with pytest.raises(DimensionError):
            E.FeatureTable(np.zeros((3, 2)), np.zeros(2, dtype=np.int64), "x")

    def test_rejects_nonfinite(self):
        feats = np.zeros((2, 2), dtype=np.float32)
        feats[0, 0] = np.nan
        with pytest.raises(ProbeError):
            E.FeatureTable(feats, np.zeros(2, dtype=np.int64), "x")


class TestLinearProbe:
    def test_separable_clusters_near_perfect(self):
        rng = np.random.default_rng(0)
        xt, yt = cluster_features(rng, 500, 10)
        xv, yv = cluster_features(rng, 200, 10)
        # same class centers: draw both splits from one generator pass
        rng = np.random.default_rng(0)
        centers = rng.normal(0.0, 5.0, size=(10, 32))
        yt = rng.integers(0, 10, size=500).astype(np.int64)
        xt = (centers[yt] + rng.normal(0.0, 0.1, size=(500, 32))).astype(np.float32)
        yv = rng.integers(0, 10, size=200).astype(np.int64)
        xv = (centers[yv] + rng.normal(0.0, 0.1, size=(200, 32))).astype(np.float32)
        res = E.linear_probe(
            E.FeatureTable(xt, yt, "train"), E.FeatureTable(xv, yv, "val")
        )
        assert res.accuracy >= 0.99

    def test_random_features_at_chance(self):
        rng = np.random.default_rng(1)
        res = E.linear_probe(
            random_table(rng, 1000, 10), random_table(rng, 1000, 10)
        )
        assert abs(res.accuracy - 0.10) <= 0.03

    def test_duplicated_train_set_identical_accuracy(self):
        rng = np.random.default_rng(2)
        tr = random_table(rng, 300, 5)
        va = random_table(rng, 200, 5)
        doubled = E.FeatureTable(
            np.concatenate([tr.features, tr.features]),
            np.concatenate([tr.labels, tr.labels]),
            "train",
        )
        assert E.linear_probe(tr, va).accuracy == E.linear_probe(doubled, va).accuracy

    def test_shuffled_labels_at_most_chance(self):
        rng = np.random.default_rng(3)
        centers = rng.normal(0.0, 5.0, size=(5, 32))
        yt = rng.integers(0, 5, size=600).astype(np.int64)
        xt = (centers[yt] + rng.normal(0.0, 0.1, size=(600, 32))).astype(np.float32)
        yv = rng.integers(0, 5, size=500).astype(np.int64)
        xv = (centers[yv] + rng.normal(0.0, 0.1, size=(500, 32))).astype(np.float32)
        shuffled = rng.permutation(yt)
        res = E.linear_probe(
            E.FeatureTable(xt, shuffled, "train"), E.FeatureTable(xv, yv, "val")
        )
        chance = 1.0 / 5.0
        sigma = np.sqrt(chance * (1 - chance) / 500)
        assert res.accuracy <= chance + 3 * sigma

    def test_single_class_train_rejected(self):
        feats = np.random.default_rng(0).normal(size=(10, 4)).astype(np.float32)
        ones = E.FeatureTable(feats, np.ones(10, dtype=np.int64), "train")
        val = random_table(np.random.default_rng(1), 10, 2, d=4)
        with pytest.raises(ProbeError):
            E.linear_probe(ones, val)

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DimensionError):
            E.linear_probe(random_table(rng, 10, 2, d=4), random_table(rng, 10, 2, d=5))

    def test_result_counts(self):
        rng = np.random.default_rng(4)
        res = E.linear_probe(random_table(rng, 50, 3), random_table(rng, 20, 3))
        assert (res.n_train, res.n_val) == (50, 20)


def knn_oracle(train_f, train_y, val_f, val_y, k, n_classes):
    # quadratic reference: full sort per query, explicit tie-break
    def norm(x):
        return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)

    zt, zv = norm(train_f.astype(np.float64)), norm(val_f.astype(np.float64))
    correct = 0
    for q, y in zip(zv, val_y):
        sims = zt @ q
        nearest = np.argsort(-sims)[:k]
        counts = np.bincount(train_y[nearest], minlength=n_classes)
        best = min(c for c in range(n_classes) if counts[c] == counts.max())
        correct += int(best == y)
    return correct / len(val_y)


class TestKnnProbe:
    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(5)
        xt, yt = cluster_features(rng, 200, 4, d=16, spread=2.0, noise=1.0)
        xv, yv = cluster_features(rng, 60, 4, d=16, spread=2.0, noise=1.0)
        for k in (1, 7, 20):
            got = E.knn_probe(
                E.FeatureTable(xt, yt, "train"), E.FeatureTable(xv, yv, "val"), k=k
            ).accuracy
            want = knn_oracle(xt, yt, xv, yv, k, 4)
            assert got == want

    def test_identity_lookup(self):
        rng = np.random.default_rng(6)
        tab = random_table(rng, 50, 5, d=8)
        res = E.knn_probe(tab, tab, k=1)
        assert res.accuracy == 1.0

    def test_full_vote_on_balanced_train_picks_class_zero(self):
        rng = np.random.default_rng(7)
        feats = rng.normal(size=(12, 6)).astype(np.float32)
        labels = np.repeat(np.arange(3), 4).astype(np.int64)
        train = E.FeatureTable(feats, labels, "train")
        val_f = rng.normal(size=(9, 6)).astype(np.float32)
        zeros = E.FeatureTable(val_f, np.zeros(9, dtype=np.int64), "val")
        twos = E.FeatureTable(val_f, np.full(9, 2, dtype=np.int64), "val")
        assert E.knn_probe(train, zeros, k=12).accuracy == 1.0
        assert E.knn_probe(train, twos, k=12).accuracy == 0.0

    def test_k_bounds(self):
        rng = np.random.default_rng(8)
        tr, va = random_table(rng, 10, 2), random_table(rng, 5, 2)
        with pytest.raises(ParameterError):
            E.knn_probe(tr, va, k=11)
        with pytest.raises(ParameterError):
            E.knn_probe(tr, va, k=0)

    def test_single_class_train_rejected(self):
        feats = np.random.default_rng(0).normal(size=(10, 4)).astype(np.float32)
        ones = E.FeatureTable(feats, np.ones(10, dtype=np.int64), "train")
        val = random_table(np.random.default_rng(1), 10, 2, d=4)
        with pytest.raises(ProbeError):
            E.knn_probe(ones, val, k=3)


class FakeDataset:
    def __init__(self, images, labels):
        self.images_f = images
        self.labels = labels

    def __len__(self):
        return len(self.images_f)

    def image_batch(self, idx):
        return self.images_f[np.asarray(idx)]


class TestExtractFeatures:
    def make(self, n=7, size=8):
        rng = np.random.default_rng(9)
        imgs = rng.random((n, 3, size, size)).astype(np.float32)
        labels = rng.integers(0, 3, size=n).astype(np.int64)
        return FakeDataset(imgs, labels)

    def test_shape_and_labels(self):
        params = vit.init_params(TINY, seed=0)
        tab = E.extract_features(params, self.make(), split="val")
        assert tab.features.shape == (7, TINY.embed_dim)
        assert tab.features.dtype == np.float32
        assert tab.split == "val"
        assert np.array_equal(tab.labels, self.make().labels)

    def test_batch_size_does_not_change_features(self):
        params = vit.init_params(TINY, seed=0)
        a = E.extract_features(params, self.make(), batch_size=3)
        b = E.extract_features(params, self.make(), batch_size=64)
        assert np.array_equal(a.features, b.features)

    def test_resizes_oversized_inputs(self):
        params = vit.init_params(TINY, seed=0)
        tab = E.extract_features(params, self.make(size=12))
        assert tab.features.shape == (7, TINY.embed_dim)

    def test_deterministic(self):
        params = vit.init_params(TINY, seed=1)
        a = E.extract_features(params, self.make())
        b = E.extract_features(params, self.make())
        assert np.array_equal(a.features, b.features)


def double_loop_stats(feats):
    n_img, n_views, _ = feats.shape
    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    pos_means = []
    for i in range(n_img):
        vals = [
            cos(feats[i, a], feats[i, b])
            for a in range(n_views)
            for b in range(a + 1, n_views)
        ]
        pos_means.append(np.mean(vals))
    negs = []
    for i in range(n_img):
        for j in range(i + 1, n_img):
            for a in range(n_views):
                for b in range(n_views):
                    negs.append(cos(feats[i, a], feats[j, b]))
    return float(np.mean(pos_means)), float(np.mean(negs)), float(np.std(negs))


class TestInvariance:
    def test_matches_double_loop_oracle(self):
        feats = np.random.default_rng(10).normal(size=(4, 3, 8))
        got = E.pairwise_cos_stats(feats)
        want = double_loop_stats(feats)
        assert got == pytest.approx(want, abs=1e-7)

    def test_scale_invariant(self):
        feats = np.random.default_rng(11).normal(size=(3, 4, 6))
        a = E.pairwise_cos_stats(feats)
        b = E.pairwise_cos_stats(3.7 * feats)
        assert a == pytest.approx(b, abs=1e-6)

    def test_constant_features_undefined(self):
        feats = np.tile(np.ones(5), (3, 4, 1))
        report = E.invariance_from_features(feats)
        assert report.mean_pos_cos == pytest.approx(1.0, abs=1e-9)
        assert report.neg_std < 1e-6
        assert report.normalized_sim == "undefined"

    def test_perfectly_invariant_model_scores_high(self):
        # one fixed vector per image, shared across views, distinct across images
        rng = np.random.default_rng(12)
        per_image = rng.normal(size=(5, 1, 16))
        feats = np.repeat(per_image, 6, axis=1)
        report = E.invariance_from_features(feats)
        assert report.mean_pos_cos == pytest.approx(1.0, abs=1e-9)
        assert isinstance(report.normalized_sim, float)
        assert report.normalized_sim > 1.0

    def test_metric_runs_and_is_deterministic(self):
        params = vit.init_params(TINY, seed=2)
        imgs = np.random.default_rng(13).random((3, 3, 10, 10)).astype(np.float32)
        a = E.invariance_metric(params, imgs, TINY_AUG, n_views=4, seed=5)
        b = E.invariance_metric(params, imgs, TINY_AUG, n_views=4, seed=5)
        assert a == b
        assert a.n_images == 3 and a.n_views == 4
        c = E.invariance_metric(params, imgs, TINY_AUG, n_views=4, seed=6)
        assert c.mean_pos_cos != a.mean_pos_cos

    def test_view_count_validated(self):
        params = vit.init_params(TINY, seed=2)
        imgs = np.zeros((3, 3, 10, 10), dtype=np.float32)
        with pytest.raises(ParameterError):
            E.invariance_metric(params, imgs, TINY_AUG, n_views=1)

    def test_needs_two_images(self):
        params = vit.init_params(TINY, seed=2)
        imgs = np.zeros((1, 3, 10, 10), dtype=np.float32)
        with pytest.raises(ParameterError):
            E.invariance_metric(params, imgs, TINY_AUG, n_views=4)
