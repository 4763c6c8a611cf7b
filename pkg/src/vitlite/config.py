"""JSON experiment configuration with all-at-once validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .distill import DistillConfig
from .errors import ConfigError
from .mae import DecoderConfig
from .train import ProbeConfig, TrainConfig
from .vit import ViTConfig

COMMANDS = ("pretrain", "distill", "finetune", "linprobe", "surgery", "analyze")
ANALYSIS_KINDS = ("rep", "attn", "stats", "fourier")


@dataclass
class AnalysisConfig:
    num_examples: int = 256
    batch_size: int = 64
    split: str = "test"

    def violations(self, prefix: str = "") -> list[tuple[str, str]]:
        out = []
        if self.num_examples < 4:
            out.append((prefix + "num_examples", "need at least 4 examples for unbiased HSIC"))
        if self.batch_size < 4:
            out.append((prefix + "batch_size", "need at least 4 examples per batch"))
        if self.split not in ("train", "test"):
            out.append((prefix + "split", "must be 'train' or 'test'"))
        return out


@dataclass
class ExperimentConfig:
    command: str = "pretrain"
    seed: int = 0
    out: str = "runs/default"
    model: ViTConfig = field(default_factory=ViTConfig)
    decoder: DecoderConfig | None = None
    mask_ratio: float = 0.75
    normalize_targets: bool = True
    distill: DistillConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    keep_k: int = 0
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    checkpoint_every: int = 0

    def violations(self) -> list[tuple[str, str]]:
        out = []
        if self.command not in COMMANDS:
            out.append(("command", f"must be one of {', '.join(COMMANDS)}"))
        if not 0.0 <= self.mask_ratio < 1.0:
            out.append(("mask_ratio", f"must lie in [0, 1), got {self.mask_ratio}"))
        if self.checkpoint_every < 0:
            out.append(("checkpoint_every", "must be >= 0"))
        out += self.model.violations("model.")
        if self.decoder is not None:
            out += self.decoder.violations("decoder.")
        if self.distill is not None:
            out += self.distill.violations("distill.", None, self.model.depth)
        elif self.command == "distill":
            out.append(("distill", "the distill command needs a distill section"))
        out += self.train.violations("train.")
        out += self.probe.violations("probe.")
        out += self.dataset.violations("dataset.")
        out += self.analysis.violations("analysis.")
        if not 0 <= self.keep_k <= self.model.depth:
            out.append(("keep_k", f"must lie in [0, {self.model.depth}], got {self.keep_k}"))
        if self.dataset.image_size != self.model.image_size:
            out.append(("dataset.image_size", f"{self.dataset.image_size} != model.image_size "
                                              f"{self.model.image_size}"))
        if self.dataset.channels != self.model.in_chans:
            out.append(("dataset.channels", f"{self.dataset.channels} != model.in_chans "
                                            f"{self.model.in_chans}"))
        if self.probe.pool == "cls" and not self.model.use_class_token and self.command == "linprobe":
            out.append(("probe.pool", "class-token probing needs model.use_class_token"))
        if self.train.pool == "cls" and not self.model.use_class_token and self.command == "finetune":
            out.append(("train.pool", "class-token fine-tuning needs model.use_class_token"))
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"model": ViTConfig, "decoder": DecoderConfig, "distill": DistillConfig,
             "train": TrainConfig, "probe": ProbeConfig, "dataset": DatasetSpec,
             "analysis": AnalysisConfig}


def _type_ok(value, default) -> bool:
    if default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    return True


def _build(cls, data, path: str, errs: list) -> object:
    if not isinstance(data, dict):
        errs.append((path, "must be an object"))
        return cls()
    defaults = cls()
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            errs.append((where, "unknown field"))
            continue
        if key in _SECTIONS and cls is ExperimentConfig:
            kwargs[key] = None if value is None else _build(_SECTIONS[key], value, key, errs)
            continue
        if not _type_ok(value, getattr(defaults, key)):
            errs.append((where, f"expected {type(getattr(defaults, key)).__name__}, "
                                f"got {type(value).__name__}"))
            continue
        if key == "pairs" and value is not None:
            try:
                value = [(int(t), int(s)) for t, s in value]
            except (TypeError, ValueError):
                errs.append((where, "must be a list of [teacher_layer, student_layer] pairs"))
                continue
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build and validate; every violation is reported at once.

    Raises:
        ConfigError: listing each violation with its field path.
    """
    errs: list[tuple[str, str]] = []
    cfg = _build(ExperimentConfig, data, "", errs)
    errs += cfg.violations()
    if errs:
        raise ConfigError(errs)
    return cfg


def parse_config(source: str | Path | dict) -> ExperimentConfig:
    """Parse a JSON file (or an already-loaded mapping) into a validated config."""
    if isinstance(source, dict):
        return config_from_dict(source)
    try:
        data = json.loads(Path(source).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"{source}: invalid JSON ({exc})")]) from exc
    return config_from_dict(data)
