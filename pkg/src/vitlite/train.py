"""Optimisation and evaluation: AdamW, schedules, fine-tuning, probing, surgery."""

from __future__ import annotations

import copy
import csv
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import ImageSet
from .errors import ConfigError
from .mae import MAEModel, generate_mask, pretrain_step
from .tensor import Tensor
from .vit import ViT

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "split", "lr", "loss", "top1", "top5")

_NO_DECAY = re.compile(r"(^|\.)(bias|mask_token|cls_token|pos_embed)$|(^|\.)norm\d*\.")


def decays(name: str, param: Tensor) -> bool:
    """Biases, norm gains/offsets, mask/class tokens and position tables skip decay."""
    return param.ndim >= 2 and not _NO_DECAY.search(name)


# ---------------------------------------------------------------- AdamW


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float, lr_multipliers: dict[str, float] | None = None,
               decay_mask: dict[str, bool] | None = None) -> None:
    """Apply one AdamW update in place (decoupled weight decay)."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        plr = lr * (lr_multipliers.get(name, 1.0) if lr_multipliers else 1.0)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        wd = state.weight_decay if decay_mask is None or decay_mask.get(name, True) else 0.0
        data = p.data
        if wd:
            data = data * (1.0 - plr * wd)
        denom = np.sqrt(v / bc2) + state.eps
        p.data = (data - (plr / bc1) * m / denom).astype(p.data.dtype, copy=False)


class AdamW:
    """AdamW over a named parameter dict, with optional per-parameter lr multipliers."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 lr_multipliers: dict[str, float] | None = None):
        self.params = params
        self.state = OptimizerState(betas[0], betas[1], weight_decay, eps)
        self.lr_multipliers = lr_multipliers or {}
        self.decay_mask = {k: decays(k, p) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state, lr, self.lr_multipliers, self.decay_mask)
        self.zero_grad()


# ---------------------------------------------------------------- schedules


@dataclass
class LRSchedule:
    """Linear warmup from 0 to ``base_lr * batch_size / 256``, then cosine to ``min_lr``."""

    base_lr: float
    batch_size: int
    warmup_epochs: float
    epochs: int
    steps_per_epoch: int
    min_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ConfigError([("warmup_epochs", "warmup longer than training")])

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_epochs * self.steps_per_epoch))

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


def lr_at(schedule: LRSchedule, step: int) -> float:
    """Learning rate at ``step``; step 0 gets 0 and ``total_steps`` gets ``min_lr``."""
    w, total = schedule.warmup_steps, schedule.total_steps
    if step < w:
        return schedule.peak_lr * step / w
    if total == w:
        return schedule.peak_lr
    progress = min(1.0, (step - w) / (total - w))
    return schedule.min_lr + (schedule.peak_lr - schedule.min_lr) * 0.5 * (1 + math.cos(math.pi * progress))


def layerwise_multipliers(decay: float, depth: int) -> list[float]:
    """``decay ** (L + 1 - i)`` for layer ids 0..L+1 (0 = patch embedding, L+1 = head)."""
    if not 0 < decay <= 1:
        raise ConfigError([("layer_decay", f"must lie in (0, 1], got {decay}")])
    return [decay ** (depth + 1 - i) for i in range(depth + 2)]


def layer_id(name: str, depth: int) -> int:
    name = name.removeprefix("encoder.")
    if name.startswith(("patch_embed", "cls_token", "pos_embed")):
        return 0
    m = re.match(r"blocks\.(\d+)\.", name)
    if m:
        return int(m.group(1)) + 1
    # final norm and head share the top group
    return depth + 1


def param_groups(params: dict[str, Tensor], depth: int, decay: float) -> dict[str, float]:
    mult = layerwise_multipliers(decay, depth)
    return {name: mult[layer_id(name, depth)] for name in params}


# ---------------------------------------------------------------- configs


@dataclass
class TrainConfig:
    """Knobs for a supervised or masked-image training loop.

    ``randaug``, ``mixup`` and ``cutmix`` mirror the full-scale recipe but are
    not implemented; validation rejects non-default values.
    """

    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1e-3
    min_lr: float = 0.0
    warmup_epochs: float = 5.0
    weight_decay: float = 0.05
    layer_decay: float = 1.0
    label_smoothing: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    crop_padding: int = 4
    flip: bool = True
    pool: str = "gap"
    randaug: str | None = None
    mixup: float = 0.0
    cutmix: float = 0.0

    def violations(self, prefix: str = "") -> list[tuple[str, str]]:
        out = []
        if self.epochs < 1:
            out.append((prefix + "epochs", "must be >= 1"))
        if self.batch_size < 1:
            out.append((prefix + "batch_size", "must be >= 1"))
        if self.base_lr <= 0:
            out.append((prefix + "base_lr", "must be positive"))
        if not 0 <= self.warmup_epochs <= self.epochs:
            out.append((prefix + "warmup_epochs", "must lie in [0, epochs]"))
        if not 0 < self.layer_decay <= 1:
            out.append((prefix + "layer_decay", "must lie in (0, 1]"))
        if not 0 <= self.label_smoothing < 1:
            out.append((prefix + "label_smoothing", "must lie in [0, 1)"))
        if self.pool not in ("gap", "cls"):
            out.append((prefix + "pool", "must be 'gap' or 'cls'"))
        if self.randaug is not None or self.mixup or self.cutmix:
            out.append((prefix + "randaug", "RandAug/mixup/cutmix are not implemented"))
        return out

    def schedule(self, steps_per_epoch: int) -> LRSchedule:
        return LRSchedule(self.base_lr, self.batch_size, self.warmup_epochs, self.epochs,
                          steps_per_epoch, self.min_lr)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProbeConfig:
    epochs: int = 90
    batch_size: int = 256
    base_lr: float = 0.1
    min_lr: float = 0.0
    warmup_epochs: float = 10.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    pool: str = "cls"
    bn_momentum: float = 0.1

    def violations(self, prefix: str = "") -> list[tuple[str, str]]:
        out = []
        if self.epochs < 1:
            out.append((prefix + "epochs", "must be >= 1"))
        if not 0 <= self.warmup_epochs <= self.epochs:
            out.append((prefix + "warmup_epochs", "must lie in [0, epochs]"))
        if self.pool not in ("gap", "cls"):
            out.append((prefix + "pool", "must be 'gap' or 'cls'"))
        if not 0 < self.bn_momentum <= 1:
            out.append((prefix + "bn_momentum", "must lie in (0, 1]"))
        return out

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- data helpers


def augment(images: np.ndarray, rng: np.random.Generator, padding: int, flip: bool) -> np.ndarray:
    """Random crop from a reflect-padded canvas plus random horizontal flip."""
    out = images
    if padding:
        b, _, h, w = images.shape
        canvas = np.pad(images, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                        mode="reflect")
        offs = rng.integers(0, 2 * padding + 1, size=(b, 2))
        out = np.empty_like(images)
        for i, (dy, dx) in enumerate(offs):
            out[i] = canvas[i, :, dy:dy + h, dx:dx + w]
    if flip:
        sel = rng.random(len(out)) < 0.5
        if sel.any():
            out = out.copy() if out is images else out
            out[sel] = out[sel][..., ::-1]
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def metrics_row(epoch: int, split: str, lr: float | None, loss: float | None,
                top1: float | None = None, top5: float | None = None) -> dict:
    return {"epoch": epoch, "split": split, "lr": lr, "loss": loss, "top1": top1, "top5": top5}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path: str | Path, rows: list[dict], append: bool = True) -> None:
    """Append rows to ``path`` with the fixed metrics header (written once)."""
    path = Path(path)
    new = not path.exists() or not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


# ---------------------------------------------------------------- pre-training loop


def pretrain(model: MAEModel, data: ImageSet, cfg: TrainConfig, mask_ratio: float = 0.75,
             normalize_targets: bool = True, seed: int = 0, distiller=None,
             on_epoch: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Masked-image pre-training; returns one metrics row per epoch.

    With a ``distiller`` (see :mod:`vitlite.distill`) each step also adds the
    weighted distillation loss; data order and masks are drawn from the same
    streams either way.
    """
    params = dict(model.parameters())
    if distiller is not None:
        params.update(distiller.parameters())
    opt = AdamW(params, cfg.weight_decay, (cfg.beta1, cfg.beta2))
    n = len(data)
    steps = math.ceil(n / cfg.batch_size)
    sched = cfg.schedule(steps)
    data_rng = np.random.default_rng([seed, 1])
    mask_rng = np.random.default_rng([seed, 2])
    l = model.cfg.num_patches
    rows, step = [], 0
    for epoch in range(1, cfg.epochs + 1):
        losses, dlosses, lr = [], [], 0.0
        for idx in batches(n, cfg.batch_size, data_rng):
            imgs = augment(data.images[idx], data_rng, cfg.crop_padding, cfg.flip)
            plan = generate_mask(len(idx), l, mask_ratio, mask_rng)
            lr = lr_at(sched, step)
            if distiller is None:
                losses.append(pretrain_step(model, imgs, plan, opt, lr, normalize_targets))
            else:
                rec, dist = distiller.step(model, imgs, plan, opt, lr, normalize_targets)
                losses.append(rec)
                dlosses.append(dist)
            step += 1
        row = metrics_row(epoch, "train", lr, float(np.mean(losses)))
        if dlosses:
            row["distill_loss"] = float(np.mean(dlosses))
        rows.append(row)
        log.info("pretrain epoch %d loss %.4f", epoch, row["loss"])
        if on_epoch:
            on_epoch(epoch, row)
    return rows


# ---------------------------------------------------------------- fine-tuning


def evaluate(model: ViT, data: ImageSet, pool: str = "gap",
             batch_size: int = 250) -> tuple[float, float]:
    """Top-1 / top-5 accuracy over a held-out split."""
    logits, loss = predict(model, data, pool, batch_size)
    return topk_accuracy(logits, data.labels, 1), topk_accuracy(logits, data.labels, 5)


def predict(model: ViT, data: ImageSet, pool: str = "gap",
            batch_size: int = 250) -> tuple[np.ndarray, float]:
    if len(data) == 0:
        raise ConfigError([("dataset", "evaluation split is empty")])
    out, total = [], 0.0
    with T.no_grad():
        for idx in batches(len(data), batch_size, None):
            lg = model.classify(data.images[idx], pool)
            total += T.cross_entropy(lg, data.labels[idx]).item() * len(idx)
            out.append(lg.data)
    return np.concatenate(out), total / len(data)


def copy_model(model: ViT) -> ViT:
    clone = copy.copy(model)
    clone.cfg = copy.deepcopy(model.cfg)
    clone.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.params.items()}
    return clone


def finetune(model: ViT, train: ImageSet, test: ImageSet, cfg: TrainConfig,
             seed: int = 0) -> tuple[ViT, list[dict]]:
    """Supervised training of every layer; logs train and test rows per epoch."""
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    if "head.weight" not in model.params:
        model.init_head(num_classes)
    mult = param_groups(model.params, model.cfg.depth, cfg.layer_decay)
    opt = AdamW(model.params, cfg.weight_decay, (cfg.beta1, cfg.beta2), lr_multipliers=mult)
    n = len(train)
    sched = cfg.schedule(math.ceil(n / cfg.batch_size))
    rng = np.random.default_rng([seed, 3])
    rows, step = [], 0
    for epoch in range(1, cfg.epochs + 1):
        losses, hits, lr = [], 0, 0.0
        for idx in batches(n, cfg.batch_size, rng):
            imgs = augment(train.images[idx], rng, cfg.crop_padding, cfg.flip)
            lr = lr_at(sched, step)
            logits = model.classify(imgs, cfg.pool)
            loss = T.cross_entropy(logits, train.labels[idx], cfg.label_smoothing)
            T.backward(loss)
            opt.step(lr)
            losses.append(loss.item() * len(idx))
            hits += int((logits.data.argmax(1) == train.labels[idx]).sum())
            step += 1
        rows.append(metrics_row(epoch, "train", lr, float(np.sum(losses) / n), hits / n))
        logits, test_loss = predict(model, test, cfg.pool)
        rows.append(metrics_row(epoch, "test", lr, test_loss,
                                topk_accuracy(logits, test.labels, 1),
                                topk_accuracy(logits, test.labels, 5)))
        log.info("finetune epoch %d test top1 %.4f", epoch, rows[-1]["top1"])
    return model, rows


# ---------------------------------------------------------------- linear probing


def extract_features(encoder: ViT, data: ImageSet, pool: str, batch_size: int = 250) -> np.ndarray:
    if pool == "cls" and not encoder.cfg.use_class_token:
        raise ConfigError([("probe.pool", "class-token probing needs a class token; use 'gap'")])
    k = encoder.cfg.num_prefix
    out = []
    with T.no_grad():
        for idx in batches(len(data), batch_size, None):
            f = encoder.forward(data.images[idx]).data
            out.append(f[:, 0] if pool == "cls" else f[:, k:].mean(axis=1))
    return np.concatenate(out).astype(np.float64)


class ProbeHead:
    """Affine-free batch norm followed by a linear classifier."""

    def __init__(self, dim: int, num_classes: int, momentum: float = 0.1, eps: float = 1e-6):
        self.weight = Tensor(np.zeros((dim, num_classes), np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes, np.float32), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum, self.eps = momentum, eps

    def params(self) -> dict[str, Tensor]:
        return {"probe.weight": self.weight, "probe.bias": self.bias}

    def normalize(self, feats: np.ndarray, train: bool) -> np.ndarray:
        if train and len(feats) > 1:
            mu, var = feats.mean(0), feats.var(0)
            n = len(feats)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var * n / (n - 1)
        else:
            mu, var = self.running_mean, self.running_var
        return ((feats - mu) / np.sqrt(var + self.eps)).astype(np.float32)

    def __call__(self, feats: np.ndarray, train: bool) -> Tensor:
        x = Tensor(self.normalize(feats, train))
        return T.add(T.matmul(x, self.weight), self.bias)


@dataclass
class ProbeResult:
    top1: float
    rows: list[dict]
    head: ProbeHead


def linear_probe(encoder: ViT, train: ImageSet, test: ImageSet, cfg: ProbeConfig,
                 seed: int = 0) -> ProbeResult:
    """Train only a normalisation + linear classifier on frozen features.

    Features are extracted once from un-augmented images; the result holds
    the final test top-1, per-epoch metrics rows and the trained head.
    """
    ftr = extract_features(encoder, train, cfg.pool)
    fte = extract_features(encoder, test, cfg.pool)
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    head = ProbeHead(ftr.shape[1], num_classes, cfg.bn_momentum)
    opt = AdamW(head.params(), cfg.weight_decay, (cfg.beta1, cfg.beta2))
    n = len(train)
    sched = LRSchedule(cfg.base_lr, cfg.batch_size, cfg.warmup_epochs, cfg.epochs,
                       math.ceil(n / cfg.batch_size), cfg.min_lr)
    rng = np.random.default_rng([seed, 4])
    rows, step = [], 0
    for epoch in range(1, cfg.epochs + 1):
        total, lr = 0.0, 0.0
        for idx in batches(n, cfg.batch_size, rng):
            lr = lr_at(sched, step)
            loss = T.cross_entropy(head(ftr[idx], train=True), train.labels[idx])
            T.backward(loss)
            opt.step(lr)
            total += loss.item() * len(idx)
            step += 1
        with T.no_grad():
            lg = head(fte, train=False)
            test_loss = T.cross_entropy(lg, test.labels).item()
        rows.append(metrics_row(epoch, "train", lr, total / n))
        rows.append(metrics_row(epoch, "test", lr, test_loss, topk_accuracy(lg.data, test.labels, 1),
                                topk_accuracy(lg.data, test.labels, 5)))
    return ProbeResult(rows[-1]["top1"], rows, head)


# ---------------------------------------------------------------- block surgery


@dataclass
class SurgerySpec:
    keep_k: int
    seed: int = 0


def reinit_tail(model: ViT, spec: SurgerySpec) -> ViT:
    """Keep the patch embedding and the first ``keep_k`` blocks; re-draw the rest.

    Raises:
        ConfigError: if ``keep_k`` is outside ``[0, depth]``.
    """
    depth = model.cfg.depth
    if not 0 <= spec.keep_k <= depth:
        raise ConfigError([("keep_k", f"must lie in [0, {depth}], got {spec.keep_k}")])
    out = copy_model(model)
    rng = np.random.default_rng([spec.seed, 5])
    for i in range(spec.keep_k, depth):
        out.init_block(i, rng)
    if out.cfg.num_classes:
        out.init_head(out.cfg.num_classes)
    return out
