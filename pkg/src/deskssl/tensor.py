"""Dense tensor with reverse-mode autodiff.

Just enough machinery for a small ViT and the distillation losses: dense
row-major numpy storage, a tape built on the fly, and a finite-difference
checker used as the independent gradient oracle in tests.

Training runs in float32; gradient checking runs the same ops in float64
(dtype follows the input arrays, so the switch is just how leaves are built).
All ops are pure functions of their inputs and allocate fresh outputs; the
only mutation anywhere is gradient accumulation into ``.grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, DimensionError, GradCheckError, NumericError, ParameterError

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction (teacher forward, eval)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    ``data`` is a C-contiguous numpy array; ``grad`` is lazily allocated with
    the same shape during ``backward``. Tensors produced by ops hold references
    to their parents plus a closure that routes the incoming gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _fail_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        """Leaf-level dtype cast; drops any graph history."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def _take(self, g: np.ndarray) -> None:
        # first-touch variant for callers that pass a freshly allocated array;
        # owning it directly skips _accumulate's defensive copy
        if self.grad is None:
            self.grad = g if g.dtype == self.data.dtype else g.astype(self.data.dtype)
        else:
            self.grad += g

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_view(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _fail_scalar(t: Tensor):
    raise DimensionError(f"item() needs a scalar, got shape {t.shape}")


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out = a.data + b.data

    def backward(g):
        # _unbroadcast returns g itself when shapes already match; only a
        # reduced copy is safe to hand over without _accumulate's copy
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._take(ga) if ga is not g else a._accumulate(g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            b._take(gb) if gb is not g else b._accumulate(g)

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._take(ga) if ga is not g else a._accumulate(g)
        if b.requires_grad:
            b._take(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._take(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._take(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product with stacked-batch broadcasting; dA = dC·Bᵀ, dB = Aᵀ·dC."""
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    if a.ndim > 2 and b.ndim == 2:
        # stacked @ matrix: fold the batch axes so BLAS sees one large GEMM
        # instead of a loop of small per-sample ones
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = np.matmul(a2, b.data).reshape(lead + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._take(np.matmul(g2, b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._take(np.matmul(a2.T, g2))

        return _make(out, (a, b), backward)

    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._take(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._take(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


# -- shape manipulation ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = ensure_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = ensure_tensor(a)
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _make(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out, tensors, backward)


def slice_view(a: Tensor, key) -> Tensor:
    a = ensure_tensor(a)
    out = np.ascontiguousarray(a.data[key])

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._take(full)

    return _make(out, (a,), backward)


def take_rows(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Index-select along ``axis``; backward scatter-adds (duplicates allowed)."""
    a = ensure_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        a._take(full)

    return _make(out, (a,), backward)


def expand(a: Tensor, shape) -> Tensor:
    a = ensure_tensor(a)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _make(out, (a,), backward)


# -- reductions -----------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = ensure_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _make(np.asarray(out), (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = ensure_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._take((np.broadcast_to(g, a.shape) / count).astype(a.dtype, copy=False))

    return _make(np.asarray(out), (a,), backward)


# -- neural-net primitives ---------------------------------------------------


def softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax over ``axis``; stable via max subtraction."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    x = ensure_tensor(x)
    z = x.data / np.asarray(temperature, dtype=x.dtype)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._take((y * (g - dot)) / temperature)

    return _make(y, (x,), backward)


def log_softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise ParameterError(f"log_softmax temperature must be > 0, got {temperature}")
    x = ensure_tensor(x)
    z = x.data / np.asarray(temperature, dtype=x.dtype)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        gsum = g.sum(axis=axis, keepdims=True)
        x._take((g - sm * gsum) / temperature)

    return _make(out, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row (last axis) normalization with affine output.

    Zero-variance rows map to ``beta`` through the eps guard.
    """
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    x, gamma, beta = ensure_tensor(x), ensure_tensor(gamma), ensure_tensor(beta)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._take((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._take(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x._take(inv * (gy - m1 - xhat * m2))

    return _make(out, (x, gamma, beta), backward)


def gelu(x) -> Tensor:
    """GELU, tanh approximation (the backward differentiates the approximation)."""
    x = ensure_tensor(x)
    v = x.data
    # v*v*v instead of v**3 (numpy's pow loop is slow) and in-place temporaries;
    # this op dominates step time otherwise
    v2 = v * v
    t = v2 * v
    t *= _GELU_A
    t += v
    t *= _GELU_C
    np.tanh(t, out=t)
    out = 1.0 + t
    out *= v
    out *= 0.5

    def backward(g):
        # in-place chain: d = g * (0.5*(1+t) + 0.5*v*sech2*(C + 3CA*v2))
        d = t * t
        np.subtract(1.0, d, out=d)
        d *= _GELU_C + (3.0 * _GELU_C * _GELU_A) * v2
        d *= v
        d += 1.0
        d += t
        d *= 0.5
        d *= g
        x._take(d)

    return _make(out, (x,), backward)


def l2_normalize(x, eps: float = 1e-6) -> Tensor:
    """Unit-L2 rows (last axis); all-zero rows stay zero through the eps guard."""
    if eps <= 0:
        raise ParameterError(f"l2_normalize eps must be > 0, got {eps}")
    x = ensure_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom

    def backward(g):
        # rows inside the eps deadzone fall back to the plain 1/eps scaling
        live = norm > eps
        dot = (g * y).sum(axis=-1, keepdims=True)
        x._take(np.where(live, (g - y * dot) / denom, g / denom))

    return _make(y, (x,), backward)


def cross_entropy_soft(p_target, log_q) -> Tensor:
    """−Σ p·log q averaged over rows. ``p_target`` is the stop-gradient side."""
    p, lq = ensure_tensor(p_target), ensure_tensor(log_q)
    if p.requires_grad:
        raise ContractViolation("cross_entropy_soft target carries gradient; detach the teacher side")
    if p.shape != lq.shape:
        raise DimensionError(f"target/logq shapes differ: {p.shape} vs {lq.shape}")
    row_sums = p.data.sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0) > 1e-4):
        worst = float(np.abs(row_sums - 1.0).max())
        raise ContractViolation(f"target rows are not probability vectors (max |sum-1| = {worst:.2e})")
    n_rows = max(1, p.size // p.shape[-1])
    out = np.asarray(-(p.data * lq.data).sum() / n_rows)

    def backward(g):
        lq._take(-(g * p.data) / n_rows)

    return _make(out, (lq,), backward)


def check_finite(x: Tensor | np.ndarray, context: str = "") -> None:
    arr = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(arr)):
        n_bad = int((~np.isfinite(arr)).sum())
        raise NumericError(f"non-finite values ({n_bad} entries){': ' + context if context else ''}")


# -- finite-difference oracle --------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float
    worst: tuple[str, int, float, float] | None = None  # (param name, flat index, analytic, numeric)
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_rel_err:.3e} over {self.n_checked} coords (tol {self.tol:g})"


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[tuple[str, Tensor]],
    h: float = 1e-4,
    tol: float = 1e-4,
    max_coords: int = 24,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` must be a deterministic closure over ``params``; the check perturbs
    parameter entries in place and restores them. A sampled subset of at most
    ``max_coords`` coordinates per parameter is checked. Relative error uses
    denominator max(|analytic|, |numeric|, 1e-3) so that finite-difference
    noise on near-zero gradients does not fire spuriously.
    """
    if h <= 0:
        raise ParameterError(f"finite_diff_check step must be > 0, got {h}")
    items = list(params.items()) if isinstance(params, dict) else list(params)
    rng = rng or np.random.default_rng(0)

    out1 = f()
    out2 = f()
    if not np.array_equal(out1.data, out2.data):
        raise GradCheckError("function is not deterministic: two forward passes differ")

    for _, p in items:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in items}

    max_rel = 0.0
    n_checked = 0
    worst = None
    per_param: dict[str, float] = {}
    for name, p in items:
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        param_max = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = f().item()
            flat[c] = orig - h
            f_minus = f().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = float(analytic[name].reshape(-1)[c])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-3)
            n_checked += 1
            if rel > param_max:
                param_max = rel
            if rel > max_rel:
                max_rel = rel
                worst = (name, int(c), ana, numeric)
        per_param[name] = param_max
    return GradCheckReport(max_rel_err=max_rel, n_checked=n_checked, tol=tol, worst=worst, per_param=per_param)
