"""Whole experiments built from an :class:`ExperimentConfig`.

Each ``run_*`` function returns in-memory results; writing files is left to
the caller (the command line front end, or a script).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import analysis as A
from .checkpoint import Checkpoint, encoder_tensors, load_state, state_dict
from .config import ExperimentConfig
from .data import DatasetSpec, ImageSet, load_split
from .distill import Distiller
from .errors import ConfigError
from .mae import DecoderConfig, MAEModel
from .tensor import no_grad
from .train import SurgerySpec, finetune, linear_probe, pretrain, reinit_tail
from .vit import ViT, ViTConfig

log = logging.getLogger(__name__)


@lru_cache(maxsize=8)
def _cached_split(spec_items: tuple, split: str) -> ImageSet:
    return load_split(DatasetSpec(*spec_items), split)


def dataset(spec: DatasetSpec, split: str) -> ImageSet:
    """Load a split; synthetic splits are rendered once per process."""
    data = _cached_split(dataclasses.astuple(spec), split)
    return ImageSet(data.images.copy(), data.labels.copy())


def model_config(cfg: ExperimentConfig, num_classes: int = 0) -> ViTConfig:
    return ViTConfig(**{**cfg.model.to_dict(), "num_classes": num_classes})


def encoder_from_checkpoint(ckpt: Checkpoint, strict: bool = True) -> ViT:
    """Rebuild a ViT from any checkpoint kind; non-encoder tensors are dropped."""
    if "model" not in ckpt.config:
        raise ConfigError([("checkpoint", f"{ckpt.kind} checkpoint carries no model config")])
    tensors = encoder_tensors(ckpt)
    mcfg = dict(ckpt.config["model"])
    mcfg["num_classes"] = int(tensors["head.weight"].shape[1]) if "head.weight" in tensors else 0
    model = ViT(ViTConfig(**mcfg), 0)
    load_state(model.params, tensors, strict=strict)
    return model


def mae_checkpoint(model: MAEModel, cfg: ExperimentConfig, kind: str, metadata: dict,
                   distiller: Distiller | None = None) -> Checkpoint:
    tensors = state_dict(model.parameters())
    conf = {"model": model.cfg.to_dict(), "decoder": model.dec_cfg.to_dict(),
            "mask_ratio": cfg.mask_ratio}
    if distiller is not None:
        tensors.update(state_dict(distiller.parameters()))
        conf["distill"] = distiller.cfg.to_dict()
        conf["teacher_model"] = distiller.teacher.cfg.to_dict()
    return Checkpoint(kind, {k: v.copy() for k, v in tensors.items()}, conf, metadata)


def mae_from_checkpoint(ckpt: Checkpoint) -> MAEModel:
    model = MAEModel(ViTConfig(**ckpt.config["model"]), DecoderConfig(**ckpt.config["decoder"]))
    tensors = {k: v for k, v in ckpt.tensors.items() if not k.startswith("distill.")}
    load_state(model.parameters(), tensors, strict=True)
    return model


def vit_checkpoint(model: ViT, kind: str, metadata: dict, extra: dict | None = None) -> Checkpoint:
    tensors = {k: v.copy() for k, v in state_dict(model.params).items()}
    tensors.update(extra or {})
    return Checkpoint(kind, tensors, {"model": model.cfg.to_dict()}, metadata)


# ---------------------------------------------------------------- runners


@dataclass
class PretrainResult:
    model: MAEModel
    rows: list[dict]
    checkpoint: Checkpoint
    distiller: Distiller | None = None


def run_pretrain(cfg: ExperimentConfig, teacher: ViT | None = None, on_epoch=None) -> PretrainResult:
    """Masked pre-training; distils from ``teacher`` when the config asks for it."""
    train = dataset(cfg.dataset, "train")
    model = MAEModel(model_config(cfg), cfg.decoder, seed=cfg.seed)
    distiller = None
    if cfg.distill is not None and cfg.command == "distill":
        if teacher is None:
            raise ConfigError([("distill.teacher", "a teacher checkpoint is required")])
        distiller = Distiller(teacher, model.cfg, dataclasses.replace(cfg.distill))
    kind = "distill" if distiller else "pretrain"

    def hook(epoch, row):
        if on_epoch:
            snap = None
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                snap = mae_checkpoint(model, cfg, kind, _meta(cfg, epoch, row), distiller)
            on_epoch(epoch, row, snap)

    rows = pretrain(model, train, cfg.train, cfg.mask_ratio, cfg.normalize_targets, cfg.seed,
                    distiller, hook)
    ckpt = mae_checkpoint(model, cfg, kind, _meta(cfg, cfg.train.epochs, rows[-1]), distiller)
    return PretrainResult(model, rows, ckpt, distiller)


def _meta(cfg: ExperimentConfig, epoch: int, row: dict) -> dict:
    return {"epoch": epoch, "seed": cfg.seed, "loss": row.get("loss"), "command": cfg.command}


def run_finetune(cfg: ExperimentConfig, init: Checkpoint | None = None) -> tuple[ViT, list[dict], Checkpoint]:
    """Fine-tune every layer from ``init`` (random when ``None``)."""
    train, test = dataset(cfg.dataset, "train"), dataset(cfg.dataset, "test")
    if init is None:
        model = ViT(model_config(cfg), np.random.default_rng([cfg.seed, 6]))
    else:
        model = encoder_from_checkpoint(init)
    model, rows = finetune(model, train, test, cfg.train, cfg.seed)
    best = max(r["top1"] for r in rows if r["split"] == "test")
    ckpt = vit_checkpoint(model, "finetune", {"epoch": cfg.train.epochs, "seed": cfg.seed,
                                              "loss": rows[-1]["loss"], "best_top1": best})
    return model, rows, ckpt


def run_linprobe(cfg: ExperimentConfig, init: Checkpoint | None) -> tuple[float, list[dict], Checkpoint]:
    train, test = dataset(cfg.dataset, "train"), dataset(cfg.dataset, "test")
    encoder = encoder_from_checkpoint(init) if init else ViT(model_config(cfg),
                                                             np.random.default_rng([cfg.seed, 6]))
    res = linear_probe(encoder, train, test, cfg.probe, cfg.seed)
    top1, rows, head = res.top1, res.rows, res.head
    extra = {"probe.weight": head.weight.data.copy(), "probe.bias": head.bias.data.copy(),
             "probe.running_mean": head.running_mean.copy(),
             "probe.running_var": head.running_var.copy()}
    ckpt = vit_checkpoint(encoder, "linprobe", {"epoch": cfg.probe.epochs, "seed": cfg.seed,
                                                "top1": top1}, extra)
    return top1, rows, ckpt


def run_surgery(cfg: ExperimentConfig, init: Checkpoint, keep_k: int | None = None) -> Checkpoint:
    keep = cfg.keep_k if keep_k is None else keep_k
    model = reinit_tail(encoder_from_checkpoint(init), SurgerySpec(keep, cfg.seed))
    return vit_checkpoint(model, "surgery", {"keep_k": keep, "seed": cfg.seed,
                                             "source": init.kind})


# ---------------------------------------------------------------- analysis


def traces(model: ViT, images: np.ndarray, batch_size: int):
    for s in range(0, len(images), batch_size):
        # never suspend inside no_grad: an abandoned generator would restore stale state
        with no_grad():
            tr = model.forward(images[s:s + batch_size], trace=True)[1]
        yield tr


def run_analyze(cfg: ExperimentConfig, kind: str, a: ViT, b: ViT | None = None):
    """Compute one analysis product over the configured evaluation images.

    Returns a :class:`SimilarityHeatmap` (``rep``/``attn``), an
    :class:`AttnStats` (``stats``) or a :class:`SpectrumProfile` (``fourier``).
    """
    ac = cfg.analysis
    images = dataset(cfg.dataset, ac.split).images[:ac.num_examples]
    if len(images) < 4:
        raise ConfigError([("analysis.num_examples", "fewer than 4 images available")])
    if kind in ("rep", "attn"):
        b = a if b is None else b
        builder = A.HeatmapBuilder("representation" if kind == "rep" else "attention")
        bs = ac.batch_size
        # keep the last batch large enough for the unbiased estimator
        if len(images) % bs and len(images) % bs < 4:
            bs = len(images)
        for ta, tb in zip(traces(a, images, bs), traces(b, images, bs)):
            builder.update(ta, tb)
        return builder.result()
    if kind == "stats":
        tr = [t for t in traces(a, images, ac.batch_size)]
        return _merge_stats(tr, a.cfg.grid)
    if kind == "fourier":
        with no_grad():
            _, tr = a.forward(images, trace=True)
        return A.fourier_delta_log_amp(tr)
    raise ConfigError([("kind", f"unknown analysis kind {kind!r}")])


def _merge_stats(trs, grid: int) -> A.AttnStats:
    from .vit import ActivationTrace, AttentionRecord

    depth = trs[0].depth
    recs = [AttentionRecord(i + 1, np.concatenate([t.attentions[i].logits.data for t in trs]))
            for i in range(depth)]
    merged = ActivationTrace([], recs, [], trs[0].num_prefix)
    return A.attention_stats(merged, grid)
