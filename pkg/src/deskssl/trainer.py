"""Self-distillation training loop.

Two losses share one projection head: a CLS-level multicrop loss (every
teacher global view teaches every other student view) and a masked patch loss
(the student sees a masked global view, the teacher the same view unmasked;
cross-entropy over masked positions only). The teacher is an EMA of the
student and is never touched by the optimizer. Teacher logits are centered
with a running mean and sharpened with a low temperature before the softmax;
DINO (CLS) and patch losses keep separate centers.

Fixed update order inside a step: optimizer, then center updates, then EMA.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit
from .augment import MaskPlan, ViewSet
from .errors import (
    ConfigError,
    ContractViolation,
    HarnessError,
    NumericError,
    ParameterError,
    StateError,
)
from .tensor import Tensor
from .vit import ModelConfig, ModelParams

METRIC_FIELDS = (
    "step",
    "lr",
    "tau_t",
    "ema_m",
    "dino_loss",
    "ibot_loss",
    "teacher_entropy",
    "grad_norm",
)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    total_steps: int = 5000
    lr_peak: float = 1e-3
    lr_floor: float = 1e-6
    warmup_steps: int = 500
    weight_decay: float = 0.04
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.07
    tau_t_warmup_steps: int = 500
    center_momentum: float = 0.9
    ema_start: float = 0.99
    ibot_weight: float = 1.0
    mask_ratio: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.total_steps < 0:
            raise ConfigError("batch_size must be >= 1 and total_steps >= 0")
        if self.tau_s <= 0 or self.tau_t_start <= 0 or self.tau_t_end <= 0:
            raise ConfigError("temperatures must be > 0")
        for name in ("center_momentum", "ema_start", "beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.ibot_weight < 0:
            raise ConfigError(f"ibot_weight={self.ibot_weight} must be >= 0")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio={self.mask_ratio} outside [0, 1]")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("warmup_steps must lie in [0, total_steps]")
        if self.lr_peak < self.lr_floor:
            raise ConfigError("lr_peak below lr_floor")


@dataclass
class TrainState:
    student: ModelParams
    teacher: ModelParams
    dino_center: np.ndarray
    ibot_center: np.ndarray
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    step: int = 0


def init_train_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    """Student from seeded init; teacher starts as an identical frozen copy."""
    cfg.validate()
    student = vit.init_params(model_cfg, cfg.seed)
    teacher = student.copy(requires_grad=False)
    k = model_cfg.num_prototypes
    return TrainState(
        student=student,
        teacher=teacher,
        dino_center=np.zeros(k, dtype=np.float32),
        ibot_center=np.zeros(k, dtype=np.float32),
        opt_m={n: np.zeros_like(t.data) for n, t in student.items()},
        opt_v={n: np.zeros_like(t.data) for n, t in student.items()},
        step=0,
    )


@dataclass(frozen=True)
class StepMetrics:
    step: int
    lr: float
    tau_t: float
    ema_m: float
    dino_loss: float
    ibot_loss: float
    teacher_entropy: float
    grad_norm: float

    def as_row(self) -> list:
        return [getattr(self, f) for f in METRIC_FIELDS]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _assert_no_grad(x, what: str) -> np.ndarray:
    if isinstance(x, Tensor):
        if x.requires_grad or x._parents:
            raise ContractViolation(f"{what} must not carry gradient")
        return x.data
    return np.asarray(x)


def teacher_probs(logits: np.ndarray, center: np.ndarray, tau_t: float) -> np.ndarray:
    """softmax((logits - center) / tau_t), numerically stable, no gradient."""
    if tau_t <= 0:
        raise ParameterError(f"teacher temperature must be > 0, got {tau_t}")
    z = (logits - center) / tau_t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mean_entropy(probs: np.ndarray) -> float:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return float(-terms.sum(axis=-1).mean())


def dino_loss(
    student_logits: Sequence[Tensor],
    teacher_logits: Sequence,
    center: np.ndarray,
    tau_s: float,
    tau_t: float,
) -> Tensor:
    """Mean cross-entropy over (teacher global i, student view j != i) pairs.

    ``student_logits`` lists every view's CLS logits with the global views
    first, aligned so index i of ``teacher_logits`` is the same crop as index
    i of ``student_logits``. With 2 globals and 8 locals this is 18 terms.
    """
    n_t = len(teacher_logits)
    n_s = len(student_logits)
    if n_t < 1 or n_s < 2:
        raise ContractViolation("need at least one teacher view and two student views")
    t_arrays = [_assert_no_grad(t, "teacher logits") for t in teacher_logits]
    log_qs = [T.log_softmax(s, temperature=tau_s) for s in student_logits]

    total = None
    n_terms = 0
    for i, t in enumerate(t_arrays):
        p = Tensor(teacher_probs(t, center, tau_t))
        for j in range(n_s):
            if j == i:
                continue
            term = T.cross_entropy_soft(p, log_qs[j])
            total = term if total is None else T.add(total, term)
            n_terms += 1
    return T.mul(total, 1.0 / n_terms)


def _masked_ce(
    student_rows: Tensor, teacher_rows: np.ndarray, center: np.ndarray, tau_s: float, tau_t: float
) -> Tensor:
    p = Tensor(teacher_probs(teacher_rows, center, tau_t))
    return T.cross_entropy_soft(p, T.log_softmax(student_rows, temperature=tau_s))


def _as_plan_list(plan, batch: int) -> list[MaskPlan]:
    if isinstance(plan, MaskPlan):
        return [plan] * batch
    plans = list(plan)
    if len(plans) != batch:
        raise ContractViolation(f"{len(plans)} plans for batch of {batch}")
    return plans


def ibot_loss(
    student_patch_logits: Sequence[Tensor],
    teacher_patch_logits: Sequence,
    plans: Sequence,
    ibot_center: np.ndarray,
    tau_s: float,
    tau_t: float,
) -> Tensor:
    """Masked-position cross-entropy, averaged over positions then views.

    Each entry is one student-masked global view ([B, n, K] logits), its
    teacher counterpart from the identical unmasked view, and the plans used
    (one MaskPlan, or one per batch row). Views with no masked positions
    contribute zero and emit a warning.
    """
    if len(student_patch_logits) != len(teacher_patch_logits) or len(plans) != len(
        student_patch_logits
    ):
        raise ContractViolation("per-view lists must have equal length")
    total = None
    n_views = len(student_patch_logits)
    for s, t, plan in zip(student_patch_logits, teacher_patch_logits, plans):
        t = _assert_no_grad(t, "teacher patch logits")
        if s.shape != t.shape or s.ndim != 3:
            raise ContractViolation(f"view shapes differ: {s.shape} vs {t.shape}")
        b, n, k = s.shape
        view_plans = _as_plan_list(plan, b)
        idx = vit.flat_mask_indices(view_plans, n)
        if idx.size == 0:
            warnings.warn("ibot_loss: empty mask plan, view contributes 0", stacklevel=2)
            continue
        s_rows = T.take_rows(T.reshape(s, (b * n, k)), idx)
        t_rows = t.reshape(b * n, k)[idx]
        term = _masked_ce(s_rows, t_rows, ibot_center, tau_s, tau_t)
        total = term if total is None else T.add(total, term)
    if total is None:
        return Tensor(np.zeros((), dtype=np.float32))
    return T.mul(total, 1.0 / n_views)


def update_center(center: np.ndarray, teacher_logits_batch, momentum: float) -> np.ndarray:
    """center' = momentum * center + (1 - momentum) * batch mean."""
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"center momentum {momentum} outside [0, 1]")
    logits = _assert_no_grad(teacher_logits_batch, "center update input")
    mean = logits.reshape(-1, logits.shape[-1]).mean(axis=0)
    return (momentum * center + (1.0 - momentum) * mean).astype(center.dtype)


def ema_update(teacher: ModelParams, student: ModelParams, momentum: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, in place, every tensor."""
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError(f"EMA momentum {momentum} outside [0, 1]")
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise StateError(f"EMA shape mismatch on {name}: {t.shape} vs {s.shape}")
        t.data *= momentum
        t.data += (1.0 - momentum) * s.data


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleValues:
    lr: float
    weight_decay: float
    tau_t: float
    ema_m: float


def schedules(step: int, cfg: TrainConfig) -> ScheduleValues:
    """Pure function of step: lr warmup+cosine, constant wd, linear tau_t
    warmup, cosine EMA momentum ending at exactly 1.0."""
    if not 0 <= step <= cfg.total_steps:
        raise HarnessError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        lr = cfg.lr_peak * step / cfg.warmup_steps
    else:
        span = max(cfg.total_steps - cfg.warmup_steps, 1)
        progress = (step - cfg.warmup_steps) / span
        lr = cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1 + math.cos(math.pi * progress))
    if step >= cfg.tau_t_warmup_steps:
        tau_t = cfg.tau_t_end
    else:
        tau_t = cfg.tau_t_start + (cfg.tau_t_end - cfg.tau_t_start) * step / cfg.tau_t_warmup_steps
    span = max(cfg.total_steps, 1)
    ema_m = 1.0 - (1.0 - cfg.ema_start) * 0.5 * (1 + math.cos(math.pi * step / span))
    return ScheduleValues(lr=lr, weight_decay=cfg.weight_decay, tau_t=tau_t, ema_m=ema_m)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

_NO_DECAY_NAMES = ("cls_token", "pos_embed", "mask_token")


def _decays(name: str) -> bool:
    if name in _NO_DECAY_NAMES:
        return False
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("bias", "gamma", "beta")


def adamw_step(state: TrainState, lr: float, weight_decay: float, cfg: TrainConfig) -> float:
    """Decoupled-weight-decay adaptive-moment update on the student.

    Returns the global gradient norm. Parameters with no gradient this step
    (for example the mask token on a pure-DINO step) accumulate nothing and
    do not move.
    """
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    sq_sum = 0.0
    for name, p in state.student.items():
        g = p.grad
        if g is None:
            continue
        sq_sum += float((g.astype(np.float64) ** 2).sum())
    grad_norm = math.sqrt(sq_sum)

    for name, p in state.student.items():
        g = p.grad
        if g is None:
            continue
        m = state.opt_m[name]
        v = state.opt_v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if weight_decay and _decays(name):
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return grad_norm


# ---------------------------------------------------------------------------
# the step
# ---------------------------------------------------------------------------


def collate_views(viewsets: Sequence[ViewSet]) -> tuple[np.ndarray, np.ndarray]:
    """Stack a batch of view sets into two arrays.

    Returns (globals, locals): globals is [n_global*B, C, gs, gs] with view 0
    of every sample first, then view 1, etc.; locals likewise.
    """
    if not viewsets:
        raise ContractViolation("empty batch of view sets")
    n_g = len(viewsets[0].global_views)
    n_l = len(viewsets[0].local_views)
    for vs in viewsets:
        if len(vs.global_views) != n_g or len(vs.local_views) != n_l:
            raise ContractViolation("inconsistent view counts within batch")
    g = np.stack([vs.global_views[i] for i in range(n_g) for vs in viewsets])
    if n_l:
        l = np.stack([vs.local_views[i] for i in range(n_l) for vs in viewsets])
    else:
        l = np.empty((0,), dtype=np.float32)
    return g, l


def _rows(x: Tensor, view: int, batch: int) -> Tensor:
    return x[view * batch : (view + 1) * batch]


def train_step(
    state: TrainState,
    viewsets: Sequence[ViewSet],
    plans: Sequence[Sequence[MaskPlan]] | None,
    cfg: TrainConfig,
    batch_ids: Sequence[int] | None = None,
) -> tuple[TrainState, StepMetrics]:
    """One optimization step over a batch of multicrop view sets.

    ``plans`` holds one MaskPlan per global view per sample
    (plans[sample][global_view]); pass None on a pure-DINO run. The masked
    path is skipped entirely whenever ibot_weight is 0 or no plan masks
    anything, so metrics are bit-identical with or without plans in that case.
    Mutates ``state`` in place and returns it with the step's metrics.
    """
    cfg.validate()
    if not viewsets:
        raise ContractViolation("train_step needs a non-empty batch")
    if state.step >= cfg.total_steps:
        raise HarnessError(f"step {state.step} beyond total_steps {cfg.total_steps}")
    sched = schedules(state.step, cfg)
    b = len(viewsets)
    n_g = len(viewsets[0].global_views)
    n_l = len(viewsets[0].local_views)
    g_all, l_all = collate_views(viewsets)

    ibot_active = (
        cfg.ibot_weight > 0
        and plans is not None
        and any(p.n_masked for row in plans for p in row)
    )

    # teacher: frozen forward over global views only
    with T.no_grad():
        t_cls, t_patches = vit.encode_images(state.teacher, g_all)
        t_logits = vit.head_forward(state.teacher, t_cls).data  # [n_g*B, K]
    teacher_view_logits = [t_logits[i * b : (i + 1) * b] for i in range(n_g)]

    # student: unmasked CLS path for every view
    s_cls_g, _ = vit.encode_images(state.student, g_all)
    s_logits_g = vit.head_forward(state.student, s_cls_g)
    student_view_logits = [_rows(s_logits_g, i, b) for i in range(n_g)]
    if n_l:
        s_cls_l, _ = vit.encode_images(state.student, l_all)
        s_logits_l = vit.head_forward(state.student, s_cls_l)
        student_view_logits += [_rows(s_logits_l, i, b) for i in range(n_l)]

    tau_t = sched.tau_t
    dino = dino_loss(student_view_logits, teacher_view_logits, state.dino_center, cfg.tau_s, tau_t)

    teacher_rows_for_center = None
    if ibot_active:
        # student sees the masked views; teacher features come from the same
        # views unmasked (already computed above)
        flat_plans = [plans[s][i] for i in range(n_g) for s in range(b)]
        _, s_patches_m = vit.encode_images(state.student, g_all, plan=flat_plans)
        n_tok = s_patches_m.shape[1]
        idx = vit.flat_mask_indices(flat_plans, n_tok)
        d = state.student.cfg.embed_dim
        s_rows = T.take_rows(T.reshape(s_patches_m, (n_g * b * n_tok, d)), idx)
        s_row_logits = vit.head_forward(state.student, s_rows)
        with T.no_grad():
            t_rows = Tensor(t_patches.data.reshape(n_g * b * n_tok, d)[idx])
            t_row_logits = vit.head_forward(state.teacher, t_rows).data
        # per-sample mask counts are exact and equal, so the flat mean equals
        # the per-view-then-positions average
        ibot = _masked_ce(s_row_logits, t_row_logits, state.ibot_center, cfg.tau_s, tau_t)
        teacher_rows_for_center = t_row_logits
        total = T.add(dino, T.mul(ibot, cfg.ibot_weight))
        ibot_value = float(ibot.item())
    else:
        ibot = None
        ibot_value = 0.0
        total = dino

    loss_value = float(total.item())
    if not math.isfinite(loss_value):
        ids = list(batch_ids) if batch_ids is not None else "unknown"
        raise NumericError(
            f"non-finite loss at step {state.step} (lr {sched.lr:.3e}, batch ids {ids})"
        )

    state.student.zero_grad()
    total.backward()
    grad_norm = adamw_step(state, sched.lr, sched.weight_decay, cfg)

    state.dino_center = update_center(state.dino_center, t_logits, cfg.center_momentum)
    if ibot_active:
        state.ibot_center = update_center(
            state.ibot_center, teacher_rows_for_center, cfg.center_momentum
        )
    ema_update(state.teacher, state.student, sched.ema_m)
    state.step += 1

    entropy = mean_entropy(teacher_probs(t_logits, state.dino_center, tau_t))
    metrics = StepMetrics(
        step=state.step,
        lr=sched.lr,
        tau_t=tau_t,
        ema_m=sched.ema_m,
        dino_loss=float(dino.item()),
        ibot_loss=ibot_value,
        teacher_entropy=entropy,
        grad_norm=grad_norm,
    )
    return state, metrics


# ---------------------------------------------------------------------------
# collapse monitoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CollapseReport:
    mean_entropy: float
    argmax_fraction: float
    feature_std: float
    threshold: float
    collapsed: bool


def collapse_metrics(
    teacher_probs_batch: np.ndarray, features: np.ndarray | None = None
) -> CollapseReport:
    """Monitor-only collapse report over a batch of teacher distributions.

    Flags collapse when mean entropy drops below 10% of ln(K). Never alters
    training.
    """
    p = np.asarray(teacher_probs_batch)
    if p.ndim != 2:
        raise ContractViolation(f"expected [N, K] probabilities, got {p.shape}")
    k = p.shape[-1]
    ent = mean_entropy(p)
    argmax_fraction = float(np.unique(p.argmax(axis=-1)).size / k)
    feature_std = float(np.asarray(features).std(axis=0).mean()) if features is not None else 0.0
    threshold = 0.1 * math.log(k)
    return CollapseReport(
        mean_entropy=ent,
        argmax_fraction=argmax_fraction,
        feature_std=feature_std,
        threshold=threshold,
        collapsed=ent < threshold,
    )
