"""Training-loop tests: loss laws against brute-force oracles, center/EMA
algebra, schedule endpoints, optimizer arithmetic, and step-level invariants."""

import math

import numpy as np
import pytest

from deskssl import tensor as T
from deskssl import trainer, vit
from deskssl.augment import AugmentationConfig, MaskPlan, generate_views, sample_mask_plan
from deskssl.errors import (
    ConfigError,
    ContractViolation,
    HarnessError,
    NumericError,
    ParameterError,
    StateError,
)
from deskssl.tensor import Tensor
from deskssl.trainer import (
    CollapseReport,
    StepMetrics,
    TrainConfig,
    collapse_metrics,
    dino_loss,
    ema_update,
    ibot_loss,
    init_train_state,
    mean_entropy,
    schedules,
    teacher_probs,
    train_step,
    update_center,
)
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

TINY_TRAIN = TrainConfig(
    batch_size=2,
    total_steps=10,
    lr_peak=1e-3,
    warmup_steps=2,
    tau_t_warmup_steps=2,
    seed=0,
)


def np_log_softmax(x, tau):
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def rand_logits(rng, *shape):
    return rng.standard_normal(shape)


class TestDinoLoss:
    def _views(self, rng, n_global=2, n_local=8, b=4, k=16):
        teacher = [rand_logits(rng, b, k) for _ in range(n_global)]
        student = [Tensor(t.copy(), requires_grad=True) for t in teacher]
        student += [
            Tensor(rand_logits(rng, b, k), requires_grad=True) for _ in range(n_local)
        ]
        return student, teacher

    def test_self_distillation_equals_entropy(self):
        # student logits == teacher logits, center 0, tau_s == tau_t
        rng = np.random.default_rng(0)
        teacher = [rand_logits(rng, 4, 16) for _ in range(2)]
        student = [Tensor(t.copy()) for t in teacher] + [Tensor(t.copy()) for t in teacher]
        # views: [g0, g1, g0, g1] so every student view j equals teacher i's
        # logits only when they are copies; use all-equal logits instead
        same = rand_logits(rng, 4, 16)
        teacher = [same.copy(), same.copy()]
        student = [Tensor(same.copy()) for _ in range(10)]
        center = np.zeros(16)
        loss = dino_loss(student, teacher, center, tau_s=0.07, tau_t=0.07)
        h = mean_entropy(teacher_probs(same, center, 0.07))
        assert abs(loss.item() - h) < 1e-6

    def test_pair_structure_brute_force(self):
        rng = np.random.default_rng(1)
        student, teacher = self._views(rng)
        student = [Tensor(rand_logits(rng, 4, 16)) for _ in range(10)]
        center = rand_logits(rng, 16)
        tau_s, tau_t = 0.1, 0.05
        loss = dino_loss(student, teacher, center, tau_s, tau_t).item()

        pairs = [(i, j) for i in range(2) for j in range(10) if j != i]
        assert len(pairs) == 18  # 2*1 global-global + 2*8 local-global
        acc = 0.0
        for i, j in pairs:
            p = teacher_probs(teacher[i], center, tau_t)
            logq = np_log_softmax(student[j].data, tau_s)
            acc += float(-(p * logq).sum(axis=-1).mean())
        assert abs(loss - acc / 18) < 1e-6

    def test_gibbs_inequality_100_batches(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            student, teacher = self._views(rng, b=3, k=8)
            student = [Tensor(rand_logits(rng, 3, 8)) for _ in range(10)]
            center = rand_logits(rng, 8) * 0.1
            tau = float(rng.uniform(0.04, 0.2))
            loss = dino_loss(student, teacher, center, tau_s=tau, tau_t=tau).item()
            h = np.mean([mean_entropy(teacher_probs(t, center, tau)) for t in teacher])
            assert loss >= h - 1e-9

    def test_student_shift_invariance(self):
        rng = np.random.default_rng(3)
        student, teacher = self._views(rng)
        center = np.zeros(16)
        base = dino_loss(student, teacher, center, 0.1, 0.05).item()
        shifted = [Tensor(s.data + 7.3) for s in student]
        assert abs(dino_loss(shifted, teacher, center, 0.1, 0.05).item() - base) < 1e-5

    def test_center_shift_invariance(self):
        rng = np.random.default_rng(4)
        student, teacher = self._views(rng)
        center = rand_logits(rng, 16)
        base = dino_loss(student, teacher, center, 0.1, 0.05).item()
        moved = dino_loss(student, teacher, center + 4.2, 0.1, 0.05).item()
        assert abs(base - moved) < 1e-5

    def test_teacher_gradient_rejected(self):
        rng = np.random.default_rng(5)
        student, _ = self._views(rng)
        bad_teacher = [Tensor(rand_logits(rng, 4, 16), requires_grad=True)] * 2
        with pytest.raises(ContractViolation):
            dino_loss(student, bad_teacher, np.zeros(16), 0.1, 0.05)


class TestIbotLoss:
    def test_empty_plan_zero_with_warning(self):
        rng = np.random.default_rng(0)
        s = [Tensor(rand_logits(rng, 2, 4, 8), requires_grad=True)]
        t = [rand_logits(rng, 2, 4, 8)]
        empty = MaskPlan(grid=(2, 2), indices=np.empty(0, dtype=np.int64))
        with pytest.warns(UserWarning):
            loss = ibot_loss(s, t, [empty], np.zeros(8), 0.1, 0.05)
        assert loss.item() == 0.0

    def test_self_distillation_entropy_at_masked_positions(self):
        rng = np.random.default_rng(1)
        logits = rand_logits(rng, 2, 4, 8)
        plan = MaskPlan(grid=(2, 2), indices=np.array([1, 3], dtype=np.int64))
        center = np.zeros(8)
        loss = ibot_loss(
            [Tensor(logits.copy())], [logits], [plan], center, tau_s=0.06, tau_t=0.06
        )
        rows = logits.reshape(8, 8)[[1, 3, 5, 7]]  # masked flat rows of both samples
        h = mean_entropy(teacher_probs(rows, center, 0.06))
        assert abs(loss.item() - h) < 1e-6

    def test_brute_force_19_of_64(self):
        rng = np.random.default_rng(2)
        b, n, k = 3, 64, 16
        s = rand_logits(rng, b, n, k)
        t = rand_logits(rng, b, n, k)
        plans = [sample_mask_plan(np.random.default_rng(10 + i), 0.3, (8, 8)) for i in range(b)]
        assert all(p.n_masked == 19 for p in plans)
        center = rand_logits(rng, k) * 0.1
        tau_s, tau_t = 0.1, 0.05
        loss = ibot_loss([Tensor(s)], [t], [plans], center, tau_s, tau_t).item()

        acc, count = 0.0, 0
        for bi in range(b):
            for pos in plans[bi].indices:
                p = teacher_probs(t[bi, pos], center, tau_t)
                logq = np_log_softmax(s[bi, pos], tau_s)
                acc += float(-(p * logq).sum())
                count += 1
        assert count == 57
        assert abs(loss - acc / count) < 1e-6

    def test_two_views_averaged(self):
        rng = np.random.default_rng(3)
        s = [rand_logits(rng, 2, 4, 8) for _ in range(2)]
        t = [rand_logits(rng, 2, 4, 8) for _ in range(2)]
        plan = MaskPlan(grid=(2, 2), indices=np.array([0, 2], dtype=np.int64))
        center = np.zeros(8)
        both = ibot_loss([Tensor(x) for x in s], t, [plan, plan], center, 0.1, 0.05).item()
        singles = [
            ibot_loss([Tensor(s[v])], [t[v]], [plan], center, 0.1, 0.05).item()
            for v in range(2)
        ]
        assert abs(both - np.mean(singles)) < 1e-6

    def test_teacher_gradient_rejected(self):
        rng = np.random.default_rng(4)
        s = [Tensor(rand_logits(rng, 1, 4, 8))]
        t = [Tensor(rand_logits(rng, 1, 4, 8), requires_grad=True)]
        plan = MaskPlan(grid=(2, 2), indices=np.array([0], dtype=np.int64))
        with pytest.raises(ContractViolation):
            ibot_loss(s, t, [plan], np.zeros(8), 0.1, 0.05)


class TestUpdateCenter:
    def test_momentum_one_unchanged(self):
        c = np.array([1.0, 2.0], dtype=np.float32)
        out = update_center(c, np.random.default_rng(0).random((5, 2)), 1.0)
        assert np.array_equal(out, c)

    def test_momentum_zero_batch_mean(self):
        batch = np.random.default_rng(1).random((6, 3)).astype(np.float32)
        out = update_center(np.zeros(3, dtype=np.float32), batch, 0.0)
        assert np.allclose(out, batch.mean(axis=0), atol=1e-7)

    def test_two_step_closed_form(self):
        rng = np.random.default_rng(2)
        c0 = rng.random(4)
        b1, b2 = rng.random((7, 4)), rng.random((7, 4))
        m = 0.9
        c2 = update_center(update_center(c0, b1, m), b2, m)
        closed = m * m * c0 + (1 - m) * (m * b1.mean(axis=0) + b2.mean(axis=0))
        assert np.allclose(c2, closed, atol=1e-6)

    def test_flattens_leading_dims(self):
        batch = np.random.default_rng(3).random((2, 5, 3))
        out = update_center(np.zeros(3), batch, 0.0)
        assert np.allclose(out, batch.reshape(-1, 3).mean(axis=0))

    def test_bad_momentum(self):
        with pytest.raises(ParameterError):
            update_center(np.zeros(2), np.zeros((1, 2)), 1.5)


class TestEmaUpdate:
    def _pair(self):
        student = vit.init_params(TINY, seed=0)
        teacher = vit.init_params(TINY, seed=1, requires_grad=False)
        return student, teacher

    def test_momentum_one_teacher_unchanged(self):
        s, t = self._pair()
        before = t.checksum()
        ema_update(t, s, 1.0)
        assert t.checksum() == before

    def test_momentum_zero_copies_student(self):
        s, t = self._pair()
        ema_update(t, s, 0.0)
        assert t.checksum() == s.checksum()

    def test_midpoint(self):
        s, t = self._pair()
        for tens in s.tensors.values():
            tens.data[...] = 4.0
        for tens in t.tensors.values():
            tens.data[...] = 2.0
        ema_update(t, s, 0.5)
        assert all(np.allclose(x.data, 3.0) for x in t.tensors.values())

    def test_shape_mismatch_state_error(self):
        s, t = self._pair()
        t.tensors["mask_token"] = Tensor(np.zeros(5, dtype=np.float32))
        with pytest.raises(StateError):
            ema_update(t, s, 0.5)


class TestSchedules:
    CFG = TrainConfig(total_steps=1000, warmup_steps=100, tau_t_warmup_steps=100)

    def test_lr_zero_at_start(self):
        assert schedules(0, self.CFG).lr == 0.0

    def test_lr_peak_at_warmup_end(self):
        assert schedules(100, self.CFG).lr == pytest.approx(self.CFG.lr_peak)

    def test_lr_floor_at_end(self):
        assert schedules(1000, self.CFG).lr == pytest.approx(self.CFG.lr_floor)

    def test_lr_monotone_after_warmup(self):
        lrs = [schedules(s, self.CFG).lr for s in range(100, 1001)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_tau_t_endpoints_and_linearity(self):
        assert schedules(0, self.CFG).tau_t == pytest.approx(0.04)
        assert schedules(50, self.CFG).tau_t == pytest.approx(0.055)
        assert schedules(100, self.CFG).tau_t == pytest.approx(0.07)
        assert schedules(900, self.CFG).tau_t == pytest.approx(0.07)

    def test_ema_endpoints(self):
        assert schedules(0, self.CFG).ema_m == pytest.approx(0.99)
        assert schedules(1000, self.CFG).ema_m == 1.0

    def test_out_of_range_step(self):
        with pytest.raises(HarnessError):
            schedules(1001, self.CFG)
        with pytest.raises(HarnessError):
            schedules(-1, self.CFG)

    def test_weight_decay_constant(self):
        assert schedules(3, self.CFG).weight_decay == self.CFG.weight_decay


class TestAdamW:
    def test_first_step_closed_form(self):
        cfg = TrainConfig(seed=0)
        state = init_train_state(TINY, cfg)
        lr, wd = 0.01, 0.1
        g = {n: np.full_like(p.data, 0.5) for n, p in state.student.items()}
        before = {n: p.data.copy() for n, p in state.student.items()}
        for n, p in state.student.items():
            p.grad = g[n].copy()
        norm = trainer.adamw_step(state, lr, wd, cfg)

        total = sum(p.data.size for p in state.student.tensors.values())
        assert norm == pytest.approx(math.sqrt(0.25 * total), rel=1e-6)
        # with constant grad, mhat = g and vhat = g*g at t=1
        adaptive = lr * 0.5 / (0.5 + cfg.adam_eps)
        w = "blocks.0.attn.qkv.weight"
        expect_w = before[w] - lr * wd * before[w] - adaptive
        assert np.allclose(state.student[w].data, expect_w, atol=1e-6)
        b = "blocks.0.attn.qkv.bias"
        expect_b = before[b] - adaptive  # biases skip weight decay
        assert np.allclose(state.student[b].data, expect_b, atol=1e-6)

    def test_no_grad_params_do_not_move(self):
        cfg = TrainConfig(seed=0)
        state = init_train_state(TINY, cfg)
        before = state.student["mask_token"].data.copy()
        state.student["norm.gamma"].grad = np.ones_like(state.student["norm.gamma"].data)
        trainer.adamw_step(state, 0.01, 0.1, cfg)
        assert np.array_equal(state.student["mask_token"].data, before)


def make_batch(seed, b=2, with_plans=True, mask_ratio=0.5):
    viewsets = [
        generate_views(
            np.random.default_rng(1000 + seed * 100 + i).random((3, 12, 12)).astype(np.float32),
            TINY_AUG,
            (seed, i),
        )
        for i in range(b)
    ]
    if not with_plans:
        return viewsets, None
    plans = [
        [
            sample_mask_plan(np.random.default_rng((seed, i, g)), mask_ratio, (2, 2))
            for g in range(2)
        ]
        for i in range(b)
    ]
    return viewsets, plans


class TestTrainStep:
    def test_metrics_deterministic(self):
        runs = []
        for _ in range(2):
            state = init_train_state(TINY, TINY_TRAIN)
            stream = []
            for step in range(3):
                views, plans = make_batch(step)
                _, m = train_step(state, views, plans, TINY_TRAIN)
                stream.append(m)
            runs.append(stream)
        assert runs[0] == runs[1]

    def test_pure_dino_runs_with_zero_ibot(self):
        cfg = TrainConfig(batch_size=2, total_steps=10, warmup_steps=2,
                          tau_t_warmup_steps=2, ibot_weight=0.0, mask_ratio=0.0, seed=0)
        state = init_train_state(TINY, cfg)
        views, _ = make_batch(0, with_plans=False)
        _, m = train_step(state, views, None, cfg)
        assert m.ibot_loss == 0.0
        assert math.isfinite(m.dino_loss)

    def test_plans_with_zero_weight_bit_identical(self):
        cfg = TrainConfig(batch_size=2, total_steps=10, warmup_steps=2,
                          tau_t_warmup_steps=2, ibot_weight=0.0, seed=0)
        stream_a, stream_b = [], []
        state_a = init_train_state(TINY, cfg)
        state_b = init_train_state(TINY, cfg)
        for step in range(3):
            views, plans = make_batch(step)
            _, ma = train_step(state_a, views, None, cfg)
            _, mb = train_step(state_b, views, plans, cfg)
            stream_a.append(ma)
            stream_b.append(mb)
        assert stream_a == stream_b  # masking touches only the masked-patch path

    def test_ibot_contributes_when_active(self):
        state = init_train_state(TINY, TINY_TRAIN)
        views, plans = make_batch(0)
        _, m = train_step(state, views, plans, TINY_TRAIN)
        assert m.ibot_loss > 0.0

    def test_teacher_untouched_when_ema_momentum_one(self):
        cfg = TrainConfig(batch_size=2, total_steps=10, warmup_steps=2,
                          tau_t_warmup_steps=2, ema_start=1.0, seed=0)
        state = init_train_state(TINY, cfg)
        before = state.teacher.checksum()
        for step in range(2):  # step 0 has lr=0 (warmup start); step 1 moves
            views, plans = make_batch(step)
            train_step(state, views, plans, cfg)
        assert state.teacher.checksum() == before
        assert state.student.checksum() != before  # optimizer moved the student

    def test_teacher_within_student_envelope(self):
        state = init_train_state(TINY, TINY_TRAIN)
        name = "blocks.0.mlp.fc1.weight"
        coords = [(0, 0), (3, 7), (5, 2)]
        lows = {c: state.teacher[name].data[c] for c in coords}
        highs = dict(lows)
        for step in range(4):
            views, plans = make_batch(step)
            train_step(state, views, plans, TINY_TRAIN)
            for c in coords:
                s = state.student[name].data[c]
                lows[c] = min(lows[c], s)
                highs[c] = max(highs[c], s)
        for c in coords:
            t = state.teacher[name].data[c]
            assert lows[c] - 1e-7 <= t <= highs[c] + 1e-7

    def test_step_counter_and_state_progression(self):
        state = init_train_state(TINY, TINY_TRAIN)
        views, plans = make_batch(0)
        _, m = train_step(state, views, plans, TINY_TRAIN)
        assert state.step == 1 and m.step == 1
        assert np.any(state.dino_center != 0)
        assert np.any(state.ibot_center != 0)

    def test_nan_loss_aborts_with_diagnostics(self, monkeypatch):
        state = init_train_state(TINY, TINY_TRAIN)
        views, plans = make_batch(0)
        monkeypatch.setattr(
            trainer, "dino_loss", lambda *a, **k: Tensor(np.float32(np.nan))
        )
        with pytest.raises(NumericError, match="step 0"):
            train_step(state, views, plans, TINY_TRAIN, batch_ids=[4, 5])

    def test_empty_batch_rejected(self):
        state = init_train_state(TINY, TINY_TRAIN)
        with pytest.raises(ContractViolation):
            train_step(state, [], None, TINY_TRAIN)

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(tau_s=0.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(ibot_weight=-1.0).validate()


class TestFullLossGradients:
    def test_dino_plus_ibot_fd_one_block(self):
        """End-to-end gradient for the combined loss on a 1-block model."""
        p = vit.init_params(TINY, seed=3, dtype=np.float64)
        rng = np.random.default_rng(7)
        g_all = rng.random((4, 3, 8, 8))  # two global views, batch 2
        l_all = rng.random((4, 3, 4, 4))  # two local views, batch 2
        plans = [sample_mask_plan(np.random.default_rng(20 + i), 0.5, (2, 2)) for i in range(4)]
        center = rng.standard_normal(TINY.num_prototypes) * 0.05
        icenter = rng.standard_normal(TINY.num_prototypes) * 0.05

        with T.no_grad():
            t_cls, t_patches = vit.encode_images(p, g_all)
            t_logits = vit.head_forward(p, t_cls).data
            t_patch_logits = vit.head_forward(p, t_patches).data
        teacher_views = [t_logits[:2], t_logits[2:]]
        teacher_patch_views = [t_patch_logits[:2], t_patch_logits[2:]]

        def loss():
            s_cls_g, _ = vit.encode_images(p, g_all)
            s_cls_l, _ = vit.encode_images(p, l_all)
            logits_g = vit.head_forward(p, s_cls_g)
            logits_l = vit.head_forward(p, s_cls_l)
            student_views = [logits_g[:2], logits_g[2:], logits_l[:2], logits_l[2:]]
            dino = dino_loss(student_views, teacher_views, center, 0.1, 0.06)
            _, s_patches = vit.encode_images(p, g_all, plan=plans)
            k = TINY.num_prototypes
            s_patch_logits = vit.head_forward(p, s_patches)
            ib = ibot_loss(
                [s_patch_logits[:2], s_patch_logits[2:]],
                teacher_patch_views,
                [plans[:2], plans[2:]],
                icenter,
                0.1,
                0.06,
            )
            return T.add(dino, T.mul(ib, 0.7))

        subset = {
            name: p[name]
            for name in (
                "patch_embed.weight",
                "mask_token",
                "pos_embed",
                "blocks.0.attn.qkv.weight",
                "blocks.0.mlp.fc2.bias",
                "head.fc1.weight",
                "head.prototypes",
            )
        }
        report = T.finite_diff_check(loss, subset, tol=1e-4, max_coords=5)
        assert report.passed, str(report)


class TestCollapseMetrics:
    def test_one_hot_collapse_flagged(self):
        p = np.zeros((16, 32))
        p[:, 3] = 1.0
        rep = collapse_metrics(p)
        assert rep.mean_entropy == pytest.approx(0.0, abs=1e-12)
        assert rep.collapsed
        assert rep.argmax_fraction == pytest.approx(1 / 32)

    def test_uniform_not_flagged(self):
        p = np.full((16, 32), 1 / 32)
        rep = collapse_metrics(p)
        assert rep.mean_entropy == pytest.approx(math.log(32), rel=1e-9)
        assert not rep.collapsed

    def test_mid_entropy_between_bounds(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((32, 64))
        p = teacher_probs(logits, np.zeros(64), 1.0)
        rep = collapse_metrics(p, features=rng.standard_normal((32, 8)))
        assert 0.0 < rep.mean_entropy < math.log(64)
        assert rep.feature_std > 0
        assert not rep.collapsed

    def test_threshold_is_ten_percent_of_log_k(self):
        rep = collapse_metrics(np.full((4, 1024), 1 / 1024))
        assert rep.threshold == pytest.approx(0.1 * math.log(1024))
