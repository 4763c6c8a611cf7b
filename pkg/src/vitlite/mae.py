"""Masked-autoencoder pre-training: masking, visible-only encoding, light decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor
from .vit import (ActivationTrace, ViT, ViTConfig, init_block, init_linear, init_norm,
                  linear, patchify, pos_embed_sincos2d, run_blocks, trunc_normal)


@dataclass
class MaskPlan:
    """Per-sample token shuffle; the first ``len_keep`` shuffled tokens stay visible."""

    ids_shuffle: np.ndarray
    len_keep: int
    ratio: float

    @property
    def batch(self) -> int:
        return self.ids_shuffle.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.ids_shuffle.shape[1]

    @property
    def ids_keep(self) -> np.ndarray:
        return self.ids_shuffle[:, :self.len_keep]

    @property
    def ids_restore(self) -> np.ndarray:
        return np.argsort(self.ids_shuffle, axis=1, kind="stable")

    @property
    def mask(self) -> np.ndarray:
        """``(b, l)`` array, 1 where the patch is hidden from the encoder."""
        m = np.ones(self.ids_shuffle.shape, np.float32)
        np.put_along_axis(m, self.ids_keep, 0.0, axis=1)
        return m


def keep_count(num_tokens: int, ratio: float) -> int:
    # small slack so that e.g. 10 * (1 - 0.9) still floors to 1
    return int(math.floor(num_tokens * (1.0 - ratio) + 1e-9))


def generate_mask(batch: int, num_tokens: int, ratio: float,
                  rng: np.random.Generator) -> MaskPlan:
    """Draw an independent uniform permutation per sample.

    Raises:
        ConfigError: if ``ratio`` is outside ``[0, 1)`` or leaves no token visible.
    """
    if not 0.0 <= ratio < 1.0:
        raise ConfigError([("mask_ratio", f"must lie in [0, 1), got {ratio}")])
    len_keep = keep_count(num_tokens, ratio)
    if len_keep < 1:
        raise ConfigError([("mask_ratio", f"ratio {ratio} leaves no visible token of {num_tokens}")])
    noise = rng.random((batch, num_tokens))
    return MaskPlan(np.argsort(noise, axis=1, kind="stable"), len_keep, float(ratio))


@dataclass
class DecoderConfig:
    width: int = 32
    depth: int = 1
    heads: int = 2
    mlp_ratio: float = 4.0

    def violations(self, prefix: str = "") -> list[tuple[str, str]]:
        out = []
        if self.heads < 1 or self.width % self.heads:
            out.append((prefix + "heads", f"width {self.width} not divisible by heads {self.heads}"))
        if self.width % 4:
            out.append((prefix + "width", "width must be divisible by 4 for 2-D sin-cos embedding"))
        if self.depth < 1:
            out.append((prefix + "depth", "depth must be >= 1"))
        return out

    @classmethod
    def for_encoder(cls, enc: ViTConfig) -> "DecoderConfig":
        """Half the encoder width, one block, head size matched to the encoder's."""
        width = max(4, enc.dim // 2)
        heads = max(1, width // enc.head_dim)
        while width % heads:
            heads -= 1
        return cls(width=width, depth=1, heads=heads)

    def to_dict(self) -> dict:
        return asdict(self)


class MAEModel:
    """Encoder over visible patches plus a lightweight pixel decoder.

    Parameters are exposed as one flat dict with ``encoder.`` and
    ``decoder.`` prefixes (see :meth:`parameters`).
    """

    def __init__(self, cfg: ViTConfig, dec: DecoderConfig | None = None, seed: int = 0):
        dec = dec or DecoderConfig.for_encoder(cfg)
        errs = cfg.violations("model.") + dec.violations("decoder.")
        if errs:
            raise ConfigError(errs)
        rng = np.random.default_rng(seed)
        enc_cfg = ViTConfig(**{**cfg.to_dict(), "num_classes": 0})
        self.encoder = ViT(enc_cfg, rng)
        self.dec_cfg = dec
        self.dec_pos = pos_embed_sincos2d(enc_cfg.grid, dec.width)
        p: dict[str, Tensor] = {}
        init_linear(p, "embed", enc_cfg.dim, dec.width, rng)
        p["mask_token"] = Tensor(trunc_normal(rng, (dec.width,)), requires_grad=True)
        for i in range(dec.depth):
            init_block(p, f"blocks.{i}.", dec.width, dec.mlp_ratio, rng)
        init_norm(p, "norm", dec.width)
        init_linear(p, "pred", dec.width, enc_cfg.patch_dim, rng)
        self.dec_params = p

    @property
    def cfg(self) -> ViTConfig:
        return self.encoder.cfg

    def parameters(self) -> dict[str, Tensor]:
        out = {"encoder." + k: v for k, v in self.encoder.params.items()}
        out.update({"decoder." + k: v for k, v in self.dec_params.items()})
        return out

    def encode_visible(self, images: np.ndarray, plan: MaskPlan, trace: bool = False):
        return encode_visible(self.encoder, images, plan, trace)

    def decode_reconstruct(self, latent: Tensor, plan: MaskPlan) -> Tensor:
        """Predict pixels for every patch, ``(b, l, patch*patch*c)``, in original order."""
        p = self.dec_params
        b = latent.shape[0]
        k = self.cfg.num_prefix
        if k:
            idx = np.broadcast_to(np.arange(k, latent.shape[1]), (b, latent.shape[1] - k))
            latent = T.gather(latent, idx, axis=1)
        x = linear(latent, p, "embed")
        n_masked = plan.num_tokens - plan.len_keep
        if n_masked:
            fill = T.add(Tensor(np.zeros((b, n_masked, self.dec_cfg.width), np.float32)),
                         p["mask_token"])
            x = T.concat([x, fill], axis=1)
        x = T.gather(x, plan.ids_restore, axis=1)
        x = T.add(x, self.dec_pos)
        x, _ = run_blocks(x, p, "", self.dec_cfg.depth, self.dec_cfg.heads, "norm")
        return linear(x, p, "pred")

    def forward(self, images: np.ndarray, plan: MaskPlan, trace: bool = False):
        latent, tr = self.encode_visible(images, plan, trace=True)
        pred = self.decode_reconstruct(latent, plan)
        return (pred, tr) if trace else pred


def encode_visible(encoder: ViT, images: np.ndarray, plan: MaskPlan, trace: bool = False):
    """Run ``encoder`` on the plan's visible patches only.

    Masked pixels are dropped before the patch projection, so their values
    can never reach the latent.
    """
    encoder._check_images(images)
    if plan.num_tokens != encoder.cfg.num_patches:
        raise ConfigError([("mask", f"plan covers {plan.num_tokens} tokens, model has "
                                    f"{encoder.cfg.num_patches}")])
    keep = plan.ids_keep
    patches = np.take_along_axis(patchify(images, encoder.cfg.patch_size), keep[..., None], axis=1)
    latent, tr = encoder.encode_tokens(encoder.embed_patches(patches, encoder.pos_embed[keep]))
    return (latent, tr) if trace else latent


def patch_targets(images: np.ndarray, patch: int, normalize: bool) -> np.ndarray:
    target = patchify(images, patch)
    if normalize:
        mu = target.mean(axis=-1, keepdims=True)
        var = target.var(axis=-1, keepdims=True)
        target = (target - mu) / np.sqrt(var + 1e-6)
    return target.astype(np.float32)


def reconstruction_loss(pred: Tensor, images: np.ndarray, plan: MaskPlan,
                        normalize_targets: bool = True, patch: int | None = None) -> Tensor:
    """Mean squared pixel error over the masked patches only.

    Raises:
        ContractError: if the plan masks no patch at all.
    """
    mask = plan.mask
    n_masked = float(mask.sum())
    if n_masked == 0:
        raise ContractError("reconstruction loss is undefined when no patch is masked")
    if patch is None:
        patch = int(round(math.sqrt(pred.shape[-1] / images.shape[1])))
    target = patch_targets(images, patch, normalize_targets)
    diff = T.sub(pred, target)
    per_patch = T.mean(T.mul(diff, diff), axis=-1)
    return T.scale(T.sum(T.mul(per_patch, mask)), 1.0 / n_masked)


def mae_loss(model: MAEModel, images: np.ndarray, plan: MaskPlan,
             normalize_targets: bool = True) -> tuple[Tensor, ActivationTrace]:
    pred, tr = model.forward(images, plan, trace=True)
    loss = reconstruction_loss(pred, images, plan, normalize_targets, model.cfg.patch_size)
    return loss, tr


def pretrain_step(model: MAEModel, images: np.ndarray, plan: MaskPlan, optimizer,
                  lr: float, normalize_targets: bool = True) -> float:
    """One forward/backward/update; returns the loss measured before the update."""
    optimizer.zero_grad()
    loss, _ = mae_loss(model, images, plan, normalize_targets)
    T.backward(loss)
    optimizer.step(lr)
    return loss.item()
