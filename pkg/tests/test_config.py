"""Strict config parsing: unknown keys name their path, sections validate,
and the resolved dict round-trips."""

import json

import pytest

from pden.config import (ConfigError, build_datasets, load_config, parse_config,
                         resolved_dict)
from pden.datasets import ShiftSpec


def _minimal(**extra) -> dict:
    # arch default num_classes is 10, toy default is 4: one side must be set
    base = {"arch": {"num_classes": 4}}
    base.update(extra)
    return base


def test_minimal_config_parses_with_defaults():
    rc = parse_config(_minimal())
    assert rc.data.kind == "toy"
    assert rc.arch.num_classes == rc.data.num_classes == 4
    assert rc.train.k_domains >= 1
    assert rc.few_shot is None and rc.sweep is None


def test_unknown_root_key_names_path():
    with pytest.raises(ConfigError, match="<root>"):
        parse_config(_minimal(trian={}))


def test_unknown_nested_key_names_path():
    with pytest.raises(ConfigError, match="data.toy"):
        parse_config(_minimal(data={"toy": {"num_classe": 4}}))
    with pytest.raises(ConfigError, match="'train'"):
        parse_config(_minimal(train={"k_domain": 3}))
    with pytest.raises(ConfigError, match="train.weights"):
        parse_config(_minimal(train={"weights": {"w_advv": 1.0}}))


def test_non_dict_root_rejected():
    with pytest.raises(ConfigError, match="object"):
        parse_config([1, 2])


def test_class_count_mismatch_rejected():
    with pytest.raises(ConfigError, match="num_classes"):
        parse_config({"arch": {"num_classes": 7},
                      "data": {"toy": {"num_classes": 4}}})


def test_channel_mismatch_rejected():
    with pytest.raises(ConfigError, match="in_channels"):
        parse_config(_minimal(arch={"num_classes": 4, "in_channels": 3}))


def test_idx_kind_requires_section():
    with pytest.raises(ConfigError, match="idx"):
        parse_config(_minimal(data={"kind": "idx"}))


def test_idx_section_requires_all_paths():
    with pytest.raises(ConfigError, match="test_labels"):
        parse_config(_minimal(data={"kind": "idx",
                                    "idx": {"train_images": "a", "train_labels": "b",
                                            "test_images": "c"}}))


def test_benchmark_override_parses():
    rc = parse_config(_minimal(
        data={"benchmark": [{"kind": "blur", "severity": 2},
                            {"kind": "invert", "severity": 5, "seed": 9}]}))
    assert rc.data.benchmark == (ShiftSpec("blur", 2, 0), ShiftSpec("invert", 5, 9))


def test_benchmark_bad_entry_names_index():
    with pytest.raises(ConfigError, match=r"benchmark\[1\]"):
        parse_config(_minimal(data={"benchmark": [{"kind": "blur", "severity": 2},
                                                  {"kind": "blur", "severity": 99}]}))


def test_few_shot_section():
    rc = parse_config(_minimal(few_shot={"shots": 5, "steps": 10,
                                         "shift": {"kind": "gaussian_noise",
                                                   "severity": 3}}))
    assert rc.few_shot.shots == 5
    assert rc.few_shot.shift == ShiftSpec("gaussian_noise", 3, 0)
    with pytest.raises(ConfigError, match="few_shot"):
        parse_config(_minimal(few_shot={"shots": 0}))


def test_sweep_section():
    rc = parse_config(_minimal(sweep={"param": "w_adv", "values": [0.0, 0.1]}))
    assert rc.sweep.values == (0.0, 0.1)
    with pytest.raises(ConfigError, match="sweep"):
        parse_config(_minimal(sweep={"param": "lr", "values": [1]}))
    with pytest.raises(ConfigError, match="sweep"):
        parse_config(_minimal(sweep={"param": "K", "values": []}))


def test_out_dir_must_be_string():
    with pytest.raises(ConfigError, match="out_dir"):
        parse_config(_minimal(out_dir=7))


def test_resolved_dict_round_trips():
    payload = _minimal(
        train={"k_domains": 2, "weights": {"w_adv": 0.5}},
        few_shot={"shots": 3},
        sweep={"param": "K", "values": [1, 2]},
        out_dir="runs/x")
    rc = parse_config(payload)
    resolved = resolved_dict(rc)
    rc2 = parse_config(json.loads(json.dumps(resolved)))
    assert rc2 == rc
    assert resolved_dict(rc2) == resolved
    assert resolved["train"]["weights"]["w_adv"] == 0.5
    assert resolved["train"]["k_domains"] == 2


def test_load_config_missing_and_malformed(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps(_minimal()))
    assert load_config(good).arch.num_classes == 4


def test_build_datasets_toy():
    rc = parse_config(_minimal(data={"toy": {"num_classes": 4, "train_count": 16,
                                             "test_count": 8, "image_hw": [8, 8]}}))
    train, test, shifts = build_datasets(rc)
    assert len(train) == 16 and len(test) == 8
    assert train.images.shape[2:] == (8, 8)
    assert len(shifts) == 31  # default suite
    rc2 = parse_config(_minimal(data={"toy": {"num_classes": 4, "train_count": 16,
                                              "test_count": 8, "image_hw": [8, 8]},
                                      "benchmark": [{"kind": "blur", "severity": 1}]}))
    assert len(build_datasets(rc2)[2]) == 1
