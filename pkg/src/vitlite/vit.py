"""Vision Transformer encoder with activation tracing."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

LN_EPS = 1e-6


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    use_class_token: bool = False
    in_chans: int = 3
    num_classes: int = 0
    drop_path: float = 0.0

    def violations(self, prefix: str = "") -> list[tuple[str, str]]:
        out = []
        if self.patch_size < 1 or self.image_size < 1:
            out.append((prefix + "patch_size", "image and patch sizes must be positive"))
        elif self.image_size % self.patch_size:
            out.append((prefix + "image_size",
                        f"{self.image_size} not divisible by patch_size {self.patch_size}"))
        if self.heads < 1 or self.dim % self.heads:
            out.append((prefix + "heads", f"dim {self.dim} not divisible by heads {self.heads}"))
        if self.dim % 4:
            out.append((prefix + "dim", f"dim {self.dim} must be divisible by 4 for 2-D sin-cos embedding"))
        if self.depth < 1:
            out.append((prefix + "depth", "depth must be >= 1"))
        if self.mlp_ratio <= 0:
            out.append((prefix + "mlp_ratio", "mlp_ratio must be positive"))
        if self.num_classes < 0:
            out.append((prefix + "num_classes", "num_classes must be >= 0"))
        if self.drop_path != 0.0:
            out.append((prefix + "drop_path", "stochastic depth is not implemented; keep 0"))
        return out

    def validate(self) -> "ViTConfig":
        errs = self.violations()
        if errs:
            raise ConfigError(errs)
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def num_prefix(self) -> int:
        return 1 if self.use_class_token else 0

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.in_chans

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionRecord:
    """Pre-softmax scaled attention logits of one block, shape ``(b, H, l, l)``."""

    layer: int
    logits: Tensor


@dataclass
class ActivationTrace:
    """Per-layer records of one forward pass.

    ``representations[0]`` is the patch-embedding output and
    ``representations[i]`` the residual stream after block ``i``; the last
    one additionally went through the final norm.  ``normed[i]`` is
    ``representations[i]`` after the next LayerNorm in the network (block
    ``i+1``'s first norm, or the final norm for the last block).
    """

    representations: list[Tensor] = field(default_factory=list)
    attentions: list[AttentionRecord] = field(default_factory=list)
    normed: list[Tensor] = field(default_factory=list)
    num_prefix: int = 0

    @property
    def depth(self) -> int:
        return len(self.attentions)

    def attention(self, layer: int) -> Tensor:
        return self.attentions[layer - 1].logits


# ---------------------------------------------------------------- helpers


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they lie inside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(b, c, h, w)`` images to ``(b, l, patch*patch*c)`` row-major patches."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, patch: int, chans: int) -> np.ndarray:
    b, l, _ = patches.shape
    g = int(round(math.sqrt(l)))
    x = patches.reshape(b, g, g, patch, patch, chans)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(b, chans, g * patch, g * patch)


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def pos_embed_sincos2d(grid: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine-cosine position table of shape ``(grid*grid, dim)``.

    Half of the channels encode the row coordinate and half the column.
    """
    if dim % 4:
        raise ConfigError([("dim", f"sin-cos embedding needs dim divisible by 4, got {dim}")])
    gh, gw = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64),
                         indexing="ij")
    emb = np.concatenate([_sincos_1d(dim // 2, gh), _sincos_1d(dim // 2, gw)], axis=1)
    return emb.astype(np.float32)


def linear(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return T.add(T.matmul(x, params[name + ".weight"]), params[name + ".bias"])


def init_linear(params: dict, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, zero: bool = False) -> None:
    w = np.zeros((fan_in, fan_out), np.float32) if zero else trunc_normal(rng, (fan_in, fan_out))
    params[name + ".weight"] = Tensor(w, requires_grad=True)
    params[name + ".bias"] = Tensor(np.zeros(fan_out, np.float32), requires_grad=True)


def init_norm(params: dict, name: str, dim: int) -> None:
    params[name + ".weight"] = Tensor(np.ones(dim, np.float32), requires_grad=True)
    params[name + ".bias"] = Tensor(np.zeros(dim, np.float32), requires_grad=True)


def init_block(params: dict, prefix: str, dim: int, mlp_ratio: float,
               rng: np.random.Generator) -> None:
    hidden = int(dim * mlp_ratio)
    init_norm(params, prefix + "norm1", dim)
    for proj in ("q", "k", "v", "proj"):
        init_linear(params, f"{prefix}attn.{proj}", dim, dim, rng)
    init_norm(params, prefix + "norm2", dim)
    init_linear(params, prefix + "mlp.fc1", dim, hidden, rng)
    init_linear(params, prefix + "mlp.fc2", hidden, dim, rng)


def layer_norm(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return T.layernorm(x, params[name + ".weight"], params[name + ".bias"], LN_EPS)


# ---------------------------------------------------------------- attention


def mha_forward(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int,
                record: bool = False) -> tuple[Tensor, Tensor | None]:
    """Multi-head self-attention over ``(b, l, d)`` (or unbatched ``(l, d)``) tokens.

    Returns the projected output and, when ``record`` is set, the
    pre-softmax logits ``Q K^T / sqrt(d_head)`` of shape ``(b, H, l, l)``.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    b, l, d = x.shape
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, l, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, params, prefix + "q"))
    k = split(linear(x, params, prefix + "k"))
    v = split(linear(x, params, prefix + "v"))
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    mixed = T.matmul(T.softmax(logits, -1), v)
    merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, l, d))
    out = linear(merged, params, prefix + "proj")
    if squeeze:
        out = T.reshape(out, (l, d))
        if record:
            logits = T.reshape(logits, (heads, l, l))
    return out, (logits if record else None)


def block_forward(x: Tensor, params: dict[str, Tensor], prefix: str,
                  heads: int) -> tuple[Tensor, Tensor, Tensor]:
    """Pre-norm transformer block; returns (output, attention logits, norm1 output)."""
    h = layer_norm(x, params, prefix + "norm1")
    attn_out, logits = mha_forward(h, params, prefix + "attn.", heads, record=True)
    x = T.add(x, attn_out)
    m = layer_norm(x, params, prefix + "norm2")
    m = linear(T.gelu(linear(m, params, prefix + "mlp.fc1")), params, prefix + "mlp.fc2")
    return T.add(x, m), logits, h


def run_blocks(x: Tensor, params: dict[str, Tensor], prefix: str, depth: int, heads: int,
               final_norm: str, num_prefix: int = 0) -> tuple[Tensor, ActivationTrace]:
    trace = ActivationTrace(representations=[x], num_prefix=num_prefix)
    for i in range(depth):
        x, logits, normed = block_forward(x, params, f"{prefix}blocks.{i}.", heads)
        trace.attentions.append(AttentionRecord(i + 1, logits))
        trace.normed.append(normed)
        trace.representations.append(x)
    x = layer_norm(x, params, prefix + final_norm)
    trace.representations[-1] = x
    trace.normed.append(x)
    return x, trace


# ---------------------------------------------------------------- model


class ViT:
    """ViT encoder; parameters live in a flat ``name -> Tensor`` dict.

    Args:
        cfg: Architecture configuration (validated on construction).
        seed: Seed for parameter initialisation, or a ready generator.
    """

    def __init__(self, cfg: ViTConfig, seed: int | np.random.Generator = 0):
        self.cfg = cfg.validate()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.pos_embed = pos_embed_sincos2d(cfg.grid, cfg.dim)
        self.params: dict[str, Tensor] = {}
        init_linear(self.params, "patch_embed", cfg.patch_dim, cfg.dim, rng)
        if cfg.use_class_token:
            self.params["cls_token"] = Tensor(trunc_normal(rng, (cfg.dim,)), requires_grad=True)
        for i in range(cfg.depth):
            self.init_block(i, rng)
        init_norm(self.params, "norm", cfg.dim)
        if cfg.num_classes:
            self.init_head(cfg.num_classes)

    def init_block(self, i: int, rng: np.random.Generator) -> None:
        init_block(self.params, f"blocks.{i}.", self.cfg.dim, self.cfg.mlp_ratio, rng)

    def init_head(self, num_classes: int) -> None:
        self.cfg.num_classes = num_classes
        init_linear(self.params, "head", self.cfg.dim, num_classes, None, zero=True)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self, prefix: str = "") -> int:
        return int(np.sum([p.data.size for k, p in self.params.items() if k.startswith(prefix)]))

    # -- embedding

    def embed_patches(self, patches: np.ndarray, pos: np.ndarray) -> Tensor:
        """Linear patch projection plus position table, with optional class token."""
        x = T.add(linear(Tensor(patches), self.params, "patch_embed"), pos)
        if self.cfg.use_class_token:
            b = patches.shape[0]
            cls = T.add(Tensor(np.zeros((b, 1, self.cfg.dim), np.float32)), self.params["cls_token"])
            x = T.concat([cls, x], axis=1)
        return x

    def patch_embed(self, images: np.ndarray) -> Tensor:
        self._check_images(images)
        return self.embed_patches(patchify(images, self.cfg.patch_size), self.pos_embed)

    def _check_images(self, images: np.ndarray) -> None:
        c = self.cfg
        if images.ndim != 4 or images.shape[1:] != (c.in_chans, c.image_size, c.image_size):
            raise ConfigError([("images", f"expected (b, {c.in_chans}, {c.image_size}, "
                                          f"{c.image_size}), got {images.shape}")])

    # -- forward

    def encode_tokens(self, x: Tensor) -> tuple[Tensor, ActivationTrace]:
        return run_blocks(x, self.params, "", self.cfg.depth, self.cfg.heads, "norm",
                          self.cfg.num_prefix)

    def forward(self, images: np.ndarray, trace: bool = False):
        """Final-norm token features ``(b, l, d)`` and, if asked, the trace."""
        feats, tr = self.encode_tokens(self.patch_embed(images))
        return (feats, tr) if trace else feats

    __call__ = forward

    def head_gap(self, features: Tensor) -> Tensor:
        """Class logits from the mean of the patch tokens (class token skipped)."""
        k = self.cfg.num_prefix
        if k:
            b, l, _ = features.shape
            idx = np.broadcast_to(np.arange(k, l), (b, l - k))
            features = T.gather(features, idx, axis=1)
        return linear(T.mean(features, axis=1), self.params, "head")

    def head_cls(self, features: Tensor) -> Tensor:
        if not self.cfg.use_class_token:
            raise ConfigError([("model.use_class_token", "class-token head needs a class token")])
        b = features.shape[0]
        cls = T.reshape(T.gather(features, np.zeros((b, 1), np.int64), axis=1), (b, self.cfg.dim))
        return linear(cls, self.params, "head")

    def classify(self, images: np.ndarray, pool: str = "gap") -> Tensor:
        feats = self.forward(images)
        return self.head_gap(feats) if pool == "gap" else self.head_cls(feats)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def vit_forward(model: ViT, images: np.ndarray, trace: bool = False):
    return model.forward(images, trace=trace)
