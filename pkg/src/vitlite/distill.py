"""Layer-wise attention / hidden-state distillation during masked pre-training."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .mae import MAEModel, MaskPlan, encode_visible, mae_loss
from .tensor import Tensor
from .vit import ActivationTrace, ViT


@dataclass
class DistillConfig:
    """What to distil and how strongly.

    ``pairs`` lists ``(teacher_layer, student_layer)``; ``None`` pairs the
    last blocks.  Attention layers count from 1, hidden-state layers from 0.
    """

    kind: str = "attention"
    pairs: list[tuple[int, int]] | None = None
    weight: float = 1.0
    teacher: str | None = None
    post_softmax: bool = False
    drop_recon: bool = False

    def violations(self, prefix: str = "", teacher_depth: int | None = None,
                   student_depth: int | None = None) -> list[tuple[str, str]]:
        out = []
        if self.kind not in ("attention", "hidden"):
            out.append((prefix + "kind", f"must be 'attention' or 'hidden', got {self.kind!r}"))
        if self.weight < 0:
            out.append((prefix + "weight", "loss weight must be >= 0"))
        lo = 1 if self.kind == "attention" else 0
        for i, (t, s) in enumerate(self.pairs or []):
            if teacher_depth is not None and not lo <= t <= teacher_depth:
                out.append((f"{prefix}pairs[{i}]", f"teacher layer {t} outside [{lo}, {teacher_depth}]"))
            if student_depth is not None and not lo <= s <= student_depth:
                out.append((f"{prefix}pairs[{i}]", f"student layer {s} outside [{lo}, {student_depth}]"))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pairs"] = [list(p) for p in self.pairs] if self.pairs else None
        return d


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def attn_distill_loss(teacher_attn, student_attn: Tensor, head_map: Tensor,
                      post_softmax: bool = False) -> Tensor:
    """``MSE(A_T, M A_S)`` with ``M`` mixing the student's heads into the teacher's.

    Args:
        teacher_attn: ``(b, h, l, l)`` or ``(h, l, l)`` teacher logits (constant).
        student_attn: ``(b, h', l, l)`` or ``(h', l, l)`` student logits.
        head_map: ``(h, h')`` mixing matrix.
        post_softmax: compare attention probabilities instead of logits.
    """
    at = _data(teacher_attn)
    if student_attn.ndim == 3:
        student_attn = T.reshape(student_attn, (1,) + student_attn.shape)
        at = at[None]
    b, hs, l, l2 = student_attn.shape
    ht = at.shape[1]
    if at.shape[2:] != (l, l2) or at.shape[0] != b:
        raise ContractError(f"token counts differ: teacher {at.shape}, student {student_attn.shape}")
    if head_map.shape != (ht, hs):
        raise ContractError(f"head map {head_map.shape} != ({ht}, {hs})")
    if post_softmax:
        student_attn = T.softmax(student_attn, -1)
        at = T.softmax(Tensor(at), -1).data
    flat = T.transpose(T.reshape(student_attn, (b, hs, l * l2)), (0, 2, 1))
    mixed = T.matmul(flat, T.transpose(head_map))
    target = at.reshape(b, ht, l * l2).transpose(0, 2, 1)
    return T.mse(mixed, target.astype(mixed.dtype, copy=False))


def hidden_distill_loss(teacher_hidden, student_hidden: Tensor, hidden_map: Tensor) -> Tensor:
    """``MSE(X_T, X_S N)`` for ``(…, l, d)`` teacher and ``(…, l, d')`` student states."""
    xt = _data(teacher_hidden)
    if xt.shape[:-1] != student_hidden.shape[:-1]:
        raise ContractError(f"token counts differ: teacher {xt.shape}, student {student_hidden.shape}")
    if hidden_map.shape != (student_hidden.shape[-1], xt.shape[-1]):
        raise ContractError(f"hidden map {hidden_map.shape} does not fit "
                            f"{student_hidden.shape[-1]} -> {xt.shape[-1]}")
    return T.mse(T.matmul(student_hidden, hidden_map), xt.astype(student_hidden.dtype, copy=False))


def frozen_copy(encoder: ViT) -> ViT:
    """A copy whose parameters are constants (never receive gradients)."""
    import copy

    out = copy.copy(encoder)
    out.params = {k: Tensor(v.data.copy()) for k, v in encoder.params.items()}
    return out


def teacher_forward_masked(teacher: ViT, images: np.ndarray, plan: MaskPlan) -> ActivationTrace:
    """Teacher trace on exactly the student's visible patches, without a graph.

    Raises:
        ConfigError: if the teacher's patch grid does not match the plan.
    """
    if teacher.cfg.num_patches != plan.num_tokens:
        raise ConfigError([("distill.teacher", f"teacher has {teacher.cfg.num_patches} patches, "
                                               f"plan covers {plan.num_tokens}")])
    with T.no_grad():
        _, tr = encode_visible(teacher, images, plan, trace=True)
    return tr


@dataclass
class Distiller:
    """Frozen teacher plus the learnable head / hidden mapping matrices."""

    teacher: ViT
    student_cfg: object
    cfg: DistillConfig
    maps: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        tc, sc = self.teacher.cfg, self.student_cfg
        if self.cfg.pairs is None:
            self.cfg.pairs = [(tc.depth, sc.depth)]
        errs = self.cfg.violations("distill.", tc.depth, sc.depth)
        if errs:
            raise ConfigError(errs)
        if tc.use_class_token != sc.use_class_token:
            raise ConfigError([("distill.teacher", "teacher and student must agree on the class token")])
        self.teacher = frozen_copy(self.teacher)
        for i, _ in enumerate(self.cfg.pairs):
            if self.cfg.kind == "attention":
                # every teacher head starts as the mean of the student heads
                m = np.full((tc.heads, sc.heads), 1.0 / sc.heads, np.float32)
            else:
                m = np.eye(sc.dim, tc.dim, dtype=np.float32)
            self.maps[f"distill.{i}.map"] = Tensor(m, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return self.maps

    def loss(self, student: ActivationTrace, teacher: ActivationTrace) -> Tensor:
        total = None
        for i, (tl, sl) in enumerate(self.cfg.pairs):
            m = self.maps[f"distill.{i}.map"]
            if self.cfg.kind == "attention":
                term = attn_distill_loss(teacher.attention(tl), student.attention(sl), m,
                                         self.cfg.post_softmax)
            else:
                term = hidden_distill_loss(teacher.normed[tl], student.normed[sl], m)
            total = term if total is None else T.add(total, term)
        return T.scale(total, 1.0 / len(self.cfg.pairs))

    def step(self, model: MAEModel, images: np.ndarray, plan: MaskPlan, optimizer, lr: float,
             normalize_targets: bool = True) -> tuple[float, float]:
        return distill_pretrain_step(model, self, images, plan, optimizer, lr, normalize_targets)


def distill_pretrain_step(student: MAEModel, distiller: Distiller, images: np.ndarray,
                          plan: MaskPlan, optimizer, lr: float,
                          normalize_targets: bool = True) -> tuple[float, float]:
    """One update of ``recon + weight * distill``; returns both pre-update losses."""
    optimizer.zero_grad()
    teacher_trace = teacher_forward_masked(distiller.teacher, images, plan)
    recon, trace = mae_loss(student, images, plan, normalize_targets)
    if distiller.cfg.weight == 0 and not distiller.cfg.drop_recon:
        # keep the graph identical to plain pre-training; the term is only reported
        with T.no_grad():
            dist = distiller.loss(trace, teacher_trace)
        T.backward(recon)
        optimizer.step(lr)
        return recon.item(), dist.item()
    dist = distiller.loss(trace, teacher_trace)
    weighted = T.scale(dist, distiller.cfg.weight)
    total = weighted if distiller.cfg.drop_recon else T.add(recon, weighted)
    T.backward(total)
    optimizer.step(lr)
    return recon.item(), dist.item()
