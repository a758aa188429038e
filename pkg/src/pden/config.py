"""JSON run configuration with strict parsing.

A config file mirrors the dataclasses below one-to-one.  Parsing is strict:
an unknown key anywhere raises :class:`ConfigError` naming the full key path
(typos must never silently fall back to defaults), and every value is
validated by the owning dataclass.  ``data.kind`` switches between the
procedural toy recipe and IDX files on disk; the optional ``benchmark`` list
overrides the default shift suite.

The resolved config dict (defaults filled in) is what gets hashed into run
ids, so two configs that resolve identically share artifacts and reruns are
reproducible from the stored `config.json` alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .datasets import (DomainDataset, ShiftSpec, ToySpec, benchmark_suite,
                       load_idx, make_toy_dataset)
from .losses import LossWeights
from .nets import ArchConfig
from .pipeline import TrainConfig
from .rng import Rng


class ConfigError(ValueError):
    """The config file is missing, malformed, or contains unknown/invalid keys."""


@dataclass(frozen=True)
class ToyDataConfig:
    num_classes: int = 4
    train_count: int = 256
    test_count: int = 256
    image_hw: tuple = (16, 16)
    noise: float = 0.02
    seed: int = 0

    def specs(self) -> tuple[ToySpec, ToySpec]:
        base = dict(num_classes=self.num_classes, image_hw=tuple(self.image_hw),
                    noise=self.noise)
        return (ToySpec(count=self.train_count, **base),
                ToySpec(count=self.test_count, **base))


@dataclass(frozen=True)
class IdxDataConfig:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit: Optional[int] = None
    test_limit: Optional[int] = None
    num_classes: int = 10

    def __post_init__(self):
        for f in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(self, f):
                raise ValueError(f"idx data config needs {f}")


@dataclass(frozen=True)
class FewShotConfig:
    shift: ShiftSpec = field(default_factory=lambda: ShiftSpec("invert", 5, 0))
    shots: int = 10
    steps: int = 40
    lr: float = 1e-3
    heads_only: bool = False
    shot_seed: int = 0

    def __post_init__(self):
        if self.shots < 1 or self.steps < 0 or self.lr <= 0:
            raise ValueError("few_shot needs shots >= 1, steps >= 0, lr > 0")


@dataclass(frozen=True)
class SweepConfig:
    param: str = "K"
    values: tuple = ()

    def __post_init__(self):
        if self.param not in ("K", "w_adv", "w_cyc", "w_div"):
            raise ValueError(f"sweep param must be K|w_adv|w_cyc|w_div, got {self.param!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        object.__setattr__(self, "values", tuple(self.values))


@dataclass(frozen=True)
class DataConfig:
    kind: str = "toy"
    toy: ToyDataConfig = field(default_factory=ToyDataConfig)
    idx: Optional[IdxDataConfig] = None
    benchmark: Optional[tuple] = None   # tuple of ShiftSpec, None = default suite

    def __post_init__(self):
        if self.kind not in ("toy", "idx"):
            raise ValueError(f"data.kind must be toy|idx, got {self.kind!r}")
        if self.kind == "idx" and self.idx is None:
            raise ValueError("data.kind is idx but no idx section given")

    @property
    def num_classes(self) -> int:
        return self.toy.num_classes if self.kind == "toy" else self.idx.num_classes


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    few_shot: Optional[FewShotConfig] = None
    sweep: Optional[SweepConfig] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.arch.num_classes != self.data.num_classes:
            raise ValueError(
                f"arch.num_classes ({self.arch.num_classes}) != data num_classes "
                f"({self.data.num_classes}); set both explicitly")
        if self.data.kind in ("toy", "idx") and self.arch.in_channels != 1:
            raise ValueError(
                f"{self.data.kind} data is single-channel, arch.in_channels is "
                f"{self.arch.in_channels}")


# -- strict dict -> dataclass parsing ----------------------------------------------------


def _take(d: dict, path: str, allowed: set) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} under {path!r}; "
                          f"allowed: {sorted(allowed)}")


def _build(cls, d: dict, path: str):
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {path!r} section: {e}") from None


def parse_config(payload: dict) -> RunConfig:
    """Strictly parse a config dict; unknown keys raise with their path."""
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be an object, got {type(payload).__name__}")
    _take(payload, "<root>", {"data", "arch", "train", "few_shot", "sweep", "out_dir"})

    data_d = dict(payload.get("data", {}))
    _take(data_d, "data", {"kind", "toy", "idx", "benchmark"})
    toy_d = dict(data_d.pop("toy", {}))
    _take(toy_d, "data.toy", {"num_classes", "train_count", "test_count",
                              "image_hw", "noise", "seed"})
    if "image_hw" in toy_d:
        toy_d["image_hw"] = tuple(toy_d["image_hw"])
    toy = _build(ToyDataConfig, toy_d, "data.toy")
    idx_d = data_d.pop("idx", None)
    idx = None
    if idx_d is not None:
        idx_d = dict(idx_d)
        _take(idx_d, "data.idx", {"train_images", "train_labels", "test_images",
                                  "test_labels", "limit", "test_limit", "num_classes"})
        idx = _build(IdxDataConfig, idx_d, "data.idx")
    bench_d = data_d.pop("benchmark", None)
    bench = None
    if bench_d is not None:
        bench = []
        for i, entry in enumerate(bench_d):
            entry = dict(entry)
            _take(entry, f"data.benchmark[{i}]", {"kind", "severity", "seed"})
            try:
                bench.append(ShiftSpec.from_dict(entry))
            except (KeyError, ValueError) as e:
                raise ConfigError(f"invalid data.benchmark[{i}]: {e}") from None
        bench = tuple(bench)
    data = _build(DataConfig, {**data_d, "toy": toy, "idx": idx, "benchmark": bench},
                  "data")

    arch_d = dict(payload.get("arch", {}))
    _take(arch_d, "arch", {"in_channels", "num_classes", "feat_channels",
                           "clf_hidden", "embed_dim", "noise_dim", "gen_channels"})
    for key in ("feat_channels", "gen_channels"):
        if key in arch_d:
            arch_d[key] = tuple(arch_d[key])
    arch = _build(ArchConfig, arch_d, "arch")

    train_d = dict(payload.get("train", {}))
    _take(train_d, "train", {"k_domains", "t_gen", "t_task", "pretrain_steps",
                             "n_pairs", "lr", "seed", "weights", "div_clamp",
                             "pool_mode", "materialize_count", "log_every",
                             "eval_cap"})
    weights_d = dict(train_d.pop("weights", {}))
    _take(weights_d, "train.weights", {"w_cyc", "w_adv", "w_div"})
    weights = _build(LossWeights, weights_d, "train.weights")
    train = _build(TrainConfig, {**train_d, "weights": weights}, "train")

    few_shot = None
    if payload.get("few_shot") is not None:
        fs_d = dict(payload["few_shot"])
        _take(fs_d, "few_shot", {"shift", "shots", "steps", "lr", "heads_only",
                                 "shot_seed"})
        shift_d = dict(fs_d.pop("shift", {}))
        _take(shift_d, "few_shot.shift", {"kind", "severity", "seed"})
        try:
            shift = ShiftSpec.from_dict(shift_d) if shift_d else ShiftSpec("invert", 5, 0)
        except (KeyError, ValueError) as e:
            raise ConfigError(f"invalid few_shot.shift: {e}") from None
        few_shot = _build(FewShotConfig, {**fs_d, "shift": shift}, "few_shot")

    sweep_cfg = None
    if payload.get("sweep") is not None:
        sw_d = dict(payload["sweep"])
        _take(sw_d, "sweep", {"param", "values"})
        sweep_cfg = _build(SweepConfig, sw_d, "sweep")

    out_dir = payload.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string path")

    try:
        return RunConfig(data=data, arch=arch, train=train, few_shot=few_shot,
                         sweep=sweep_cfg, out_dir=out_dir)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    return parse_config(payload)


def resolved_dict(rc: RunConfig) -> dict:
    """Round-trippable dict of the fully resolved config (defaults filled)."""
    data = {"kind": rc.data.kind,
            "toy": {"num_classes": rc.data.toy.num_classes,
                    "train_count": rc.data.toy.train_count,
                    "test_count": rc.data.toy.test_count,
                    "image_hw": list(rc.data.toy.image_hw),
                    "noise": rc.data.toy.noise,
                    "seed": rc.data.toy.seed}}
    if rc.data.idx is not None:
        data["idx"] = {"train_images": rc.data.idx.train_images,
                       "train_labels": rc.data.idx.train_labels,
                       "test_images": rc.data.idx.test_images,
                       "test_labels": rc.data.idx.test_labels,
                       "limit": rc.data.idx.limit,
                       "test_limit": rc.data.idx.test_limit,
                       "num_classes": rc.data.idx.num_classes}
    if rc.data.benchmark is not None:
        data["benchmark"] = [s.to_dict() for s in rc.data.benchmark]
    out = {"data": data, "arch": rc.arch.to_dict(), "train": rc.train.to_dict()}
    if rc.few_shot is not None:
        out["few_shot"] = {"shift": rc.few_shot.shift.to_dict(),
                           "shots": rc.few_shot.shots, "steps": rc.few_shot.steps,
                           "lr": rc.few_shot.lr, "heads_only": rc.few_shot.heads_only,
                           "shot_seed": rc.few_shot.shot_seed}
    if rc.sweep is not None:
        out["sweep"] = {"param": rc.sweep.param, "values": list(rc.sweep.values)}
    if rc.out_dir is not None:
        out["out_dir"] = rc.out_dir
    return out


def build_datasets(rc: RunConfig) -> tuple[DomainDataset, DomainDataset, list]:
    """Materialize (train, test, benchmark shifts) from a config."""
    if rc.data.kind == "toy":
        train_spec, test_spec = rc.data.toy.specs()
        seed = rc.data.toy.seed
        train = make_toy_dataset(train_spec, Rng(seed).derive("train"), name="toy_train")
        test = make_toy_dataset(test_spec, Rng(seed).derive("test"), name="toy_test")
    else:
        idx = rc.data.idx
        train = load_idx(idx.train_images, idx.train_labels, limit=idx.limit,
                         num_classes=idx.num_classes, name="train")
        test = load_idx(idx.test_images, idx.test_labels, limit=idx.test_limit,
                        num_classes=idx.num_classes, name="test")
    shifts = list(rc.data.benchmark) if rc.data.benchmark is not None \
        else benchmark_suite(seed=rc.train.seed)
    return train, test, shifts
