import json

import pytest

from vitlite.config import parse_config
from vitlite.errors import ConfigError

from conftest import tiny_config


def _paths(exc):
    return {p for p, _ in exc.value.violations}


def test_defaults_are_valid():
    cfg = parse_config({})
    assert cfg.model.depth == 4 and cfg.model.dim == 64 and cfg.mask_ratio == 0.75
    assert cfg.dataset.train_size == 2000 and cfg.normalize_targets


def test_file_round_trip(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(tiny_config(command="distill", distill={"pairs": [[2, 1]]})))
    cfg = parse_config(path)
    assert cfg.distill.pairs == [(2, 1)]
    again = parse_config(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_all_violations_reported_together():
    with pytest.raises(ConfigError) as exc:
        parse_config({"mask_ratio": 1.0, "model": {"heads": 7}, "bogus": 1,
                      "train": {"epochs": "ten"}})
    assert _paths(exc) >= {"mask_ratio", "model.heads", "bogus", "train.epochs"}
    assert "model.heads" in str(exc.value)


def test_cross_field_checks():
    with pytest.raises(ConfigError) as exc:
        parse_config({"dataset": {"image_size": 16}, "keep_k": 9,
                      "command": "linprobe", "probe": {"pool": "cls"}})
    assert _paths(exc) == {"dataset.image_size", "keep_k", "probe.pool"}


def test_distill_command_needs_section():
    with pytest.raises(ConfigError) as exc:
        parse_config({"command": "distill"})
    assert _paths(exc) == {"distill"}
    with pytest.raises(ConfigError) as exc:
        parse_config({"distill": {"pairs": [[1, 9]], "kind": "logits"}})
    assert _paths(exc) >= {"distill.kind", "distill.pairs[0]"}


def test_unimplemented_augmentations_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config({"train": {"randaug": "rand-m9-mstd0.5"}})
    assert _paths(exc) == {"train.randaug"}


def test_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        parse_config(path)


def test_bool_is_not_an_int():
    with pytest.raises(ConfigError) as exc:
        parse_config({"seed": True, "normalize_targets": 1})
    assert _paths(exc) == {"seed", "normalize_targets"}
