"""Tiny Vision Transformer encoder plus projection head.

One parameter set serves two resolutions: local crops reuse the global
positional embeddings through bilinear grid interpolation. The mask token is
substituted after patch projection and before position embeddings, so pixel
space stays augmentation-only. Head output is prototype logits computed from
an l2-normalized bottleneck, with no bias and no final activation.
"""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .augment import MaskPlan
from .errors import ConfigError, DimensionError, PlanError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    head_hidden_dim: int = 512
    head_bottleneck_dim: int = 64
    num_prototypes: int = 1024
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0  # exposed knob; nonzero is rejected
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.num_heads}"
            )
        if min(self.depth, self.head_hidden_dim, self.head_bottleneck_dim, self.num_prototypes) < 1:
            raise ConfigError("depth, head dims and prototype count must be >= 1")
        if self.drop_path_rate != 0.0:
            raise ConfigError("drop_path_rate is exposed for forward-compat but must stay 0.0")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def mlp_hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape table; also fixes the init draw order."""
    d = cfg.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, 1, d),
        "pos_embed": (1, 1 + cfg.n_patches, d),
        "mask_token": (d,),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes[p + "norm1.gamma"] = (d,)
        shapes[p + "norm1.beta"] = (d,)
        shapes[p + "attn.qkv.weight"] = (d, 3 * d)
        shapes[p + "attn.qkv.bias"] = (3 * d,)
        shapes[p + "attn.proj.weight"] = (d, d)
        shapes[p + "attn.proj.bias"] = (d,)
        shapes[p + "norm2.gamma"] = (d,)
        shapes[p + "norm2.beta"] = (d,)
        shapes[p + "mlp.fc1.weight"] = (d, cfg.mlp_hidden_dim)
        shapes[p + "mlp.fc1.bias"] = (cfg.mlp_hidden_dim,)
        shapes[p + "mlp.fc2.weight"] = (cfg.mlp_hidden_dim, d)
        shapes[p + "mlp.fc2.bias"] = (d,)
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    shapes["head.fc1.weight"] = (d, cfg.head_hidden_dim)
    shapes["head.fc1.bias"] = (cfg.head_hidden_dim,)
    shapes["head.fc2.weight"] = (cfg.head_hidden_dim, cfg.head_hidden_dim)
    shapes["head.fc2.bias"] = (cfg.head_hidden_dim,)
    shapes["head.fc3.weight"] = (cfg.head_hidden_dim, cfg.head_bottleneck_dim)
    shapes["head.fc3.bias"] = (cfg.head_bottleneck_dim,)
    shapes["head.prototypes"] = (cfg.num_prototypes, cfg.head_bottleneck_dim)
    return shapes


_ONES_INIT = ("gamma",)
_ZEROS_INIT = ("beta", "bias", "mask_token")


class ModelParams:
    """Named parameter tensors for one encoder+head."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        cfg.validate()
        expected = param_shapes(cfg)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigError(f"param name mismatch; missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigError(
                    f"param {name}: shape {tensors[name].shape}, expected {shape}"
                )
        self.cfg = cfg
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy(self, requires_grad: bool | None = None) -> "ModelParams":
        out = {}
        for name, t in self.tensors.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[name] = Tensor(t.data.copy(), requires_grad=rg)
        return ModelParams(self.cfg, out)

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(
        cls, cfg: ModelConfig, arrays: dict[str, np.ndarray], requires_grad: bool = True
    ) -> "ModelParams":
        tensors = {
            name: Tensor(np.asarray(a, dtype=np.float32), requires_grad=requires_grad)
            for name, a in arrays.items()
        }
        return cls(cfg, tensors)


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Std-scaled normal draws, redrawn until all lie within two sigma."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return x * std


def init_params(
    cfg: ModelConfig, seed: int, dtype=np.float32, requires_grad: bool = True
) -> ModelParams:
    """Deterministic init: truncated-normal std 0.02 weights, zero biases and
    mask token, unit layer-norm gains. Same (cfg, seed) gives bit-identical
    parameters."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x565454)))
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1] if "." in name else name
        if leaf in _ONES_INIT:
            data = np.ones(shape)
        elif leaf in _ZEROS_INIT or name == "mask_token":
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, 0.02)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=requires_grad)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# patch pipeline
# ---------------------------------------------------------------------------


def patchify(view: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a CHW image into non-overlapping row-major patches.

    Each token is the C*p*p pixels of one patch, flattened channel-major.
    """
    if view.ndim != 3:
        raise DimensionError(f"patchify expects CHW, got shape {view.shape}")
    c, h, w = view.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"{h}x{w} not divisible by patch {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = view.reshape(c, gh, patch_size, gw, patch_size)
    x = x.transpose(1, 3, 0, 2, 4)  # [gh, gw, c, p, p]
    return np.ascontiguousarray(x.reshape(gh * gw, c * patch_size * patch_size))


def unpatchify(tokens: np.ndarray, patch_size: int, image_shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of ``patchify``; bit-exact round trip."""
    c, h, w = image_shape
    gh, gw = h // patch_size, w // patch_size
    x = tokens.reshape(gh, gw, c, patch_size, patch_size)
    x = x.transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(x.reshape(c, h, w))


def patchify_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, n_tokens, patch_dim], same token layout as patchify."""
    if images.ndim != 4:
        raise DimensionError(f"expected BCHW, got shape {images.shape}")
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"{h}x{w} not divisible by patch {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * patch_size * patch_size))


def embed_patches(params: ModelParams, patches) -> Tensor:
    """Project flattened patches to embedding space; graph entry point."""
    x = T.ensure_tensor(patches)
    return T.add(T.matmul(x, params["patch_embed.weight"]), params["patch_embed.bias"])


def apply_mask_tokens(
    tokens: Tensor, plan: MaskPlan | Sequence[MaskPlan], mask_token: Tensor
) -> Tensor:
    """Replace planned token rows with the learned mask token.

    Works on [n, d] or [B, n, d]. A single plan applies to every batch row; a
    sequence of plans (one per row) applies row-wise. Positions off the plan
    pass through untouched; an all-empty plan returns the input tensor as is.
    """
    tokens = T.ensure_tensor(tokens)
    n = tokens.shape[-2]
    if isinstance(plan, MaskPlan):
        if plan.n_masked == 0:
            return tokens
        if int(plan.indices.max()) >= n:
            raise PlanError(f"mask index {int(plan.indices.max())} >= n_tokens {n}")
        masked = plan.as_bool()[:, None]  # [n, 1]
    else:
        plans = list(plan)
        if tokens.ndim != 3 or len(plans) != tokens.shape[0]:
            raise PlanError(
                f"{len(plans)} plans for token batch of shape {tokens.shape}"
            )
        if all(p.n_masked == 0 for p in plans):
            return tokens
        for p in plans:
            if p.n_masked and int(p.indices.max()) >= n:
                raise PlanError(f"mask index {int(p.indices.max())} >= n_tokens {n}")
        masked = np.stack([p.as_bool() for p in plans])[:, :, None]  # [B, n, 1]
    keep = (~masked).astype(tokens.data.dtype)
    fill = masked.astype(tokens.data.dtype)
    return T.add(T.mul(tokens, keep), T.mul(mask_token, fill))


def flat_mask_indices(plans: Sequence[MaskPlan], n_tokens: int) -> np.ndarray:
    """Row-major flat indices of all masked positions in a [B, n, ...] batch."""
    parts = [b * n_tokens + p.indices for b, p in enumerate(plans) if p.n_masked]
    if not parts:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# positional embeddings
# ---------------------------------------------------------------------------


def pos_interp_matrix(src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Dense [dst_h*dst_w, src_h*src_w] bilinear interpolation matrix.

    Half-pixel centers, edge clamp: the same convention as image resizing.
    Kept as a constant matrix so gradients flow through a plain matmul.
    """
    sh, sw = src
    dh, dw = dst
    ys = np.clip((np.arange(dh) + 0.5) * (sh / dh) - 0.5, 0.0, sh - 1.0)
    xs = np.clip((np.arange(dw) + 0.5) * (sw / dw) - 0.5, 0.0, sw - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    wy = ys - y0
    wx = xs - x0

    w_mat = np.zeros((dh * dw, sh * sw))
    for oy in range(dh):
        for ox in range(dw):
            r = oy * dw + ox
            w_mat[r, y0[oy] * sw + x0[ox]] += (1 - wy[oy]) * (1 - wx[ox])
            w_mat[r, y0[oy] * sw + x1[ox]] += (1 - wy[oy]) * wx[ox]
            w_mat[r, y1[oy] * sw + x0[ox]] += wy[oy] * (1 - wx[ox])
            w_mat[r, y1[oy] * sw + x1[ox]] += wy[oy] * wx[ox]
    return w_mat


def interpolate_pos_embed(params: ModelParams, grid: tuple[int, int]) -> Tensor:
    """Positional embeddings for an arbitrary token grid.

    The CLS slot is kept verbatim; the grid part is bilinearly resampled.
    When the requested grid equals the stored grid this is exactly the
    identity (the stored tensor is returned untouched).
    """
    g = params.cfg.grid_size
    pos = params["pos_embed"]  # [1, 1+g*g, d]
    if grid == (g, g):
        return pos
    w_mat = pos_interp_matrix((g, g), grid).astype(pos.data.dtype)
    cls_slot = pos[:, :1]  # [1, 1, d]
    grid_part = T.reshape(pos[:, 1:], (g * g, params.cfg.embed_dim))
    resampled = T.matmul(Tensor(w_mat), grid_part)  # [n_dst, d]
    resampled = T.reshape(resampled, (1, grid[0] * grid[1], params.cfg.embed_dim))
    return T.concat([cls_slot, resampled], axis=1)


# ---------------------------------------------------------------------------
# transformer forward
# ---------------------------------------------------------------------------


def _attention(params: ModelParams, i: int, x: Tensor) -> Tensor:
    cfg = params.cfg
    b, n, d = x.shape
    heads = cfg.num_heads
    dh = d // heads
    p = f"blocks.{i}.attn."

    qkv = T.add(T.matmul(x, params[p + "qkv.weight"]), params[p + "qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (b, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]  # each [b, heads, n, dh]

    scores = T.matmul(T.mul(q, dh ** -0.5), T.transpose(k, (0, 1, 3, 2)))
    attn = T.softmax(scores, temperature=1.0, axis=-1)
    ctx = T.matmul(attn, v)  # [b, heads, n, dh]
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return T.add(T.matmul(ctx, params[p + "proj.weight"]), params[p + "proj.bias"])


def _mlp(params: ModelParams, i: int, x: Tensor) -> Tensor:
    p = f"blocks.{i}.mlp."
    h = T.gelu(T.add(T.matmul(x, params[p + "fc1.weight"]), params[p + "fc1.bias"]))
    return T.add(T.matmul(h, params[p + "fc2.weight"]), params[p + "fc2.bias"])


def _block(params: ModelParams, i: int, x: Tensor) -> Tensor:
    cfg = params.cfg
    p = f"blocks.{i}."
    h = T.layer_norm(x, params[p + "norm1.gamma"], params[p + "norm1.beta"], eps=cfg.ln_eps)
    x = T.add(x, _attention(params, i, h))
    h = T.layer_norm(x, params[p + "norm2.gamma"], params[p + "norm2.beta"], eps=cfg.ln_eps)
    return T.add(x, _mlp(params, i, x=h))


def encoder_forward(
    params: ModelParams, tokens, grid: tuple[int, int]
) -> tuple[Tensor, Tensor]:
    """Run the transformer over projected tokens.

    ``tokens`` is [n, d] or [B, n, d] with n == grid_h * grid_w. Returns the
    CLS feature ([d] or [B, d]) and per-patch features ([n, d] or [B, n, d]).
    """
    cfg = params.cfg
    x = T.ensure_tensor(tokens)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise DimensionError(f"tokens must be [n,d] or [B,n,d], got {x.shape}")
    b, n, d = x.shape
    if n != grid[0] * grid[1]:
        raise DimensionError(f"{n} tokens do not tile grid {grid}")
    if d != cfg.embed_dim:
        raise DimensionError(f"token dim {d} != embed_dim {cfg.embed_dim}")

    cls = T.expand(params["cls_token"], (b, 1, d))
    x = T.concat([cls, x], axis=1)
    x = T.add(x, interpolate_pos_embed(params, grid))
    for i in range(cfg.depth):
        x = _block(params, i, x)
    x = T.layer_norm(x, params["norm.gamma"], params["norm.beta"], eps=cfg.ln_eps)
    T.check_finite(x, context=f"encoder output (grid {grid})")

    cls_out = x[:, 0]
    patch_out = x[:, 1:]
    if squeeze:
        cls_out = T.reshape(cls_out, (d,))
        patch_out = T.reshape(patch_out, (n, d))
    return cls_out, patch_out


def head_forward(params: ModelParams, feature) -> Tensor:
    """MLP -> gelu -> bottleneck -> l2_normalize -> prototype logits.

    Accepts [..., d]; returns [..., num_prototypes]. No bias and no activation
    after the prototype product, so |logit| <= max prototype row norm.
    """
    x = T.ensure_tensor(feature)
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    h = T.gelu(T.add(T.matmul(x, params["head.fc1.weight"]), params["head.fc1.bias"]))
    h = T.gelu(T.add(T.matmul(h, params["head.fc2.weight"]), params["head.fc2.bias"]))
    z = T.add(T.matmul(h, params["head.fc3.weight"]), params["head.fc3.bias"])
    z = T.l2_normalize(z)
    protos = params["head.prototypes"]
    logits = T.matmul(z, T.transpose(protos, (1, 0)))
    if squeeze:
        logits = T.reshape(logits, (logits.shape[-1],))
    return logits


def encode_images(
    params: ModelParams,
    images: np.ndarray,
    plan: MaskPlan | Sequence[MaskPlan] | None = None,
) -> tuple[Tensor, Tensor]:
    """Pixels to features: patchify, project, optionally mask, encode.

    ``images`` is [B, C, H, W]; all rows share ``plan`` when one is given.
    """
    cfg = params.cfg
    imgs = np.asarray(images)
    if imgs.dtype not in (np.float32, np.float64):
        imgs = imgs.astype(np.float32)
    patches = patchify_batch(imgs, cfg.patch_size)
    tokens = embed_patches(params, patches)
    if plan is not None:
        tokens = apply_mask_tokens(tokens, plan, params["mask_token"])
    side = images.shape[-1] // cfg.patch_size
    grid = (images.shape[-2] // cfg.patch_size, side)
    return encoder_forward(params, tokens, grid)
