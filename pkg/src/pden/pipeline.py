"""Progressive domain expansion: the training loop.

One run is a pretrain phase followed by ``k_domains`` expansion rounds.
Round k:

1. ``train_generator`` -- initialize a *fresh* synthesizer pair (G_k and its
   cycle partner) and jointly optimize them against the current task model
   under the synthesis objective (the task model keeps learning from the
   adversarial game at the same time).
2. ``materialize_domain`` -- freeze G_k and decode one noise draw per source
   image into a new synthetic domain, index-aligned with the source.
3. pool update -- append the new domain (or replace the previous one, a
   config switch), then ``retrain_task`` the task model on source/synthetic
   pairs with the supervised-plus-contrastive source objective.

Every stochastic choice draws from a child stream derived as
``Rng(seed).derive(phase, k)`` and each phase gets a fresh optimizer, so a
run with a smaller ``k_domains`` is a step-exact prefix of a longer run and
any (config, seed) pair replays bit-identically on one platform.

Metrics go to an in-memory log with a fixed column set and deterministic
formatting; wall-clock timings are kept apart from the metrics so the CSV is
byte-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .datasets import DomainDataset, Provenance, save_pgm_grid
from .losses import LossWeights, PairedBatch, loss_src, loss_unseen
from .nets import ArchConfig, CycleGenerator, Generator, TaskModel
from .optim import Adam
from .rng import Rng


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; partial metrics are flushed before raising."""


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one progressive-expansion run.

    ``k_domains=0`` degenerates to pretraining only (the no-expansion arm).
    ``pretrain_steps`` defaults to ``t_task``; ``materialize_count`` defaults
    to the source size so synthetic domains stay index-aligned with it.
    """

    k_domains: int = 3
    t_gen: int = 300
    t_task: int = 500
    pretrain_steps: Optional[int] = None
    n_pairs: int = 32
    lr: float = 1e-3
    seed: int = 0
    weights: LossWeights = dc_field(default_factory=LossWeights)
    div_clamp: Optional[float] = 1.0
    pool_mode: str = "accumulate"
    materialize_count: Optional[int] = None
    log_every: int = 25
    eval_cap: int = 1024

    def __post_init__(self):
        if self.k_domains < 0:
            raise ValueError(f"k_domains must be >= 0, got {self.k_domains}")
        if self.t_gen < 1 or self.t_task < 1:
            raise ValueError("t_gen and t_task must be >= 1")
        if self.pretrain_steps is not None and self.pretrain_steps < 1:
            raise ValueError("pretrain_steps must be >= 1 when given")
        if self.n_pairs < 2:
            raise ValueError(f"n_pairs must be >= 2, got {self.n_pairs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.pool_mode not in ("accumulate", "replace"):
            raise ValueError(f"pool_mode must be accumulate|replace, got {self.pool_mode!r}")
        if self.div_clamp is not None and self.div_clamp < 0:
            raise ValueError("div_clamp must be >= 0 or None")
        if self.materialize_count is not None and self.materialize_count < 2:
            raise ValueError("materialize_count must be >= 2 when given")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.eval_cap < 1:
            raise ValueError("eval_cap must be >= 1")

    @property
    def pretrain_steps_resolved(self) -> int:
        return self.pretrain_steps if self.pretrain_steps is not None else self.t_task

    def to_dict(self) -> dict:
        return {
            "k_domains": self.k_domains, "t_gen": self.t_gen, "t_task": self.t_task,
            "pretrain_steps": self.pretrain_steps, "n_pairs": self.n_pairs,
            "lr": self.lr, "seed": self.seed, "weights": self.weights.to_dict(),
            "div_clamp": self.div_clamp, "pool_mode": self.pool_mode,
            "materialize_count": self.materialize_count,
            "log_every": self.log_every, "eval_cap": self.eval_cap,
        }


@dataclass
class SyntheticDomain:
    dataset: DomainDataset
    k: int
    seed_tag: tuple


@dataclass
class DomainPool:
    """The source domain plus every synthetic domain materialized so far."""

    source: DomainDataset
    synthetic: list = dc_field(default_factory=list)
    _class_index: Optional[list] = dc_field(default=None, repr=False)

    def domains(self) -> list:
        return [self.source] + [s.dataset for s in self.synthetic]

    def size(self) -> int:
        return 1 + len(self.synthetic)

    def add(self, dom: SyntheticDomain, mode: str) -> None:
        if mode == "replace":
            self.synthetic = [dom]
        else:
            self.synthetic.append(dom)

    def class_indices(self) -> list:
        if self._class_index is None:
            self._class_index = [np.flatnonzero(self.source.labels == c)
                                 for c in range(self.source.num_classes)]
        return self._class_index


_COLUMNS = ("step", "phase", "k", "loss", "ce", "nce", "cls", "cyc",
            "adv_gen", "adv_task", "div", "acc_source", "acc_new",
            "pixel_rms", "div_rms")


class MetricsLog:
    """Fixed-schema metric rows with deterministic CSV rendering."""

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, **kw) -> None:
        unknown = set(kw) - set(_COLUMNS)
        if unknown:
            raise KeyError(f"unknown metric columns {sorted(unknown)}")
        self.rows.append(kw)

    @staticmethod
    def _fmt(v) -> str:
        if v is None:
            return ""
        if isinstance(v, str):
            return v
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        return format(float(v), ".12g")

    def to_csv(self) -> str:
        lines = [",".join(_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(self._fmt(row.get(c)) for c in _COLUMNS))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv())


# -- batch sampling ------------------------------------------------------------------


def sample_plain_batch(source: DomainDataset, n: int, rng: Rng) -> PairedBatch:
    """n source images with labels, no counterparts (synthesis phases)."""
    idx = rng.integers(0, len(source), (n,))
    return PairedBatch(x=ad.constant(source.images[idx]), y=source.labels[idx])


def sample_paired_batch(pool: DomainPool, n: int, rng: Rng) -> PairedBatch:
    """n (source, counterpart) pairs for the supervised-contrastive objective.

    With synthetic domains present, the counterpart of item i is the
    index-aligned image from a uniformly drawn synthetic domain, so the pair
    shows the same content under a different domain.  Before any expansion
    the counterpart is another source image of the same class.

    Draw order (indices, then domain/counterpart choices) is fixed, so a call
    consumes the same stream prefix either way.
    """
    src = pool.source
    idx = rng.integers(0, len(src), (n,))
    u = rng.uniform((n,))
    x = src.images[idx]
    y = src.labels[idx]
    if pool.synthetic:
        doms = np.floor(u * len(pool.synthetic)).astype(np.int64)
        doms = np.minimum(doms, len(pool.synthetic) - 1)
        xp = np.empty_like(x)
        for d in np.unique(doms):
            mask = doms == d
            ds = pool.synthetic[int(d)].dataset
            xp[mask] = ds.images[idx[mask] % len(ds)]
    else:
        ci = pool.class_indices()
        xp_idx = np.empty(n, dtype=np.int64)
        for i in range(n):
            bucket = ci[y[i]]
            xp_idx[i] = bucket[min(int(u[i] * bucket.size), bucket.size - 1)]
        xp = src.images[xp_idx]
    return PairedBatch(x=ad.constant(x), y=y, x_plus=ad.constant(xp))


# -- evaluation helpers (graph-free) ----------------------------------------------------


def predict_batched(model: TaskModel, images: np.ndarray, batch: int = 256) -> np.ndarray:
    frozen = model.frozen()
    out = []
    for lo in range(0, images.shape[0], batch):
        xb = ad.constant(images[lo:lo + batch])
        out.append(np.argmax(nets.forward_task(frozen, xb).yhat.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy_on(model: TaskModel, images: np.ndarray, labels: np.ndarray,
                cap: Optional[int] = None) -> float:
    if cap is not None:
        images, labels = images[:cap], labels[:cap]
    if images.shape[0] == 0:
        raise ValueError("accuracy over an empty set")
    return float(np.mean(predict_batched(model, images) == labels))


# -- phases -----------------------------------------------------------------------------


def pretrain(source: DomainDataset, config: TrainConfig, arch: ArchConfig,
             log: Optional[MetricsLog] = None) -> TaskModel:
    """Source-only supervised-contrastive training of a fresh task model."""
    log = log if log is not None else MetricsLog()
    root = Rng(config.seed)
    model = nets.init_task_model(arch, root.derive("model_init"))
    pool = DomainPool(source=source)
    rng = root.derive("pretrain")
    opt = Adam(model.parameters(), lr=config.lr)
    steps = config.pretrain_steps_resolved
    for step in range(steps):
        batch = sample_paired_batch(pool, config.n_pairs, rng)
        total, parts = loss_src(batch, model)
        _check_finite(total, "pretrain", step, log)
        opt.zero_grad()
        total.backward()
        opt.step()
        if step % config.log_every == 0 or step == steps - 1:
            log.add(step=step, phase="pretrain", k=0, loss=total.item(),
                    ce=parts["ce"], nce=parts["nce"])
    acc = accuracy_on(model, source.images, source.labels, cap=config.eval_cap)
    log.add(step=steps, phase="pretrain_eval", k=0, acc_source=acc)
    return model


def train_generator(model: TaskModel, source: DomainDataset, config: TrainConfig,
                    arch: ArchConfig, k: int,
                    log: Optional[MetricsLog] = None) -> tuple[Generator, CycleGenerator]:
    """Round k's adversarial game: fresh G_k + cycle partner vs the task model.

    Both synthesizers are initialized from this round's derived stream, so
    every round starts from a different fresh draw.  The task model's
    parameters update too (the game is joint); all four objective terms are
    logged per ``log_every`` steps.
    """
    log = log if log is not None else MetricsLog()
    root = Rng(config.seed)
    init_rng = root.derive("gen_init", k)
    gen = nets.init_generator(arch, init_rng.derive("g"))
    cyc = nets.init_cycle_generator(arch, init_rng.derive("c"))
    rng = root.derive("gen_train", k)
    opt = Adam(gen.parameters() + cyc.parameters() + model.parameters(), lr=config.lr)
    for step in range(config.t_gen):
        batch = sample_plain_batch(source, config.n_pairs, rng)
        total, parts = loss_unseen(batch, model, gen, cyc, config.weights, rng,
                                   div_clamp=config.div_clamp)
        _check_finite(total, "generator", step, log)
        opt.zero_grad()
        total.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.t_gen - 1:
            log.add(step=step, phase="generator", k=k, loss=total.item(),
                    cls=parts["cls"], cyc=parts["cyc"], adv_gen=parts["adv_gen"],
                    adv_task=parts["adv_task"], div=parts["div"])
    return gen, cyc


def materialize_domain(gen: Generator, source: DomainDataset, rng: Rng,
                       name: str, count: Optional[int] = None,
                       batch: int = 256) -> DomainDataset:
    """Decode one noise draw per source image through a frozen G.

    Pure function of (generator parameters, source, rng seed): labels carry
    over index-aligned, pixels land in [0, 1] via the decoder's sigmoid.
    """
    frozen = gen.frozen()
    n = count if count is not None else len(source)
    idx = np.arange(n, dtype=np.int64) % len(source)
    noise = rng.normal((n, gen.arch.noise_dim))
    chunks = []
    for lo in range(0, n, batch):
        sel = idx[lo:lo + batch]
        xb = ad.constant(source.images[sel])
        nb = ad.constant(noise[lo:lo + batch])
        chunks.append(nets.generate(frozen, xb, nb).data)
    images = np.concatenate(chunks) if chunks else np.zeros((0,) + source.image_shape)
    prov = Provenance("synthetic", {"base": source.name, "name": name})
    return DomainDataset(images, source.labels[idx].copy(), name,
                         source.num_classes, prov)


def retrain_task(model: TaskModel, pool: DomainPool, config: TrainConfig,
                 k: int, log: Optional[MetricsLog] = None) -> TaskModel:
    """Supervised-contrastive training over source/synthetic pairs."""
    log = log if log is not None else MetricsLog()
    rng = Rng(config.seed).derive("retrain", k)
    opt = Adam(model.parameters(), lr=config.lr)
    for step in range(config.t_task):
        batch = sample_paired_batch(pool, config.n_pairs, rng)
        total, parts = loss_src(batch, model)
        _check_finite(total, "retrain", step, log)
        opt.zero_grad()
        total.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.t_task - 1:
            log.add(step=step, phase="retrain", k=k, loss=total.item(),
                    ce=parts["ce"], nce=parts["nce"])
    return model


def _check_finite(total: Tensor, phase: str, step: int, log: MetricsLog) -> None:
    if not np.isfinite(total.data):
        log.add(step=step, phase=f"{phase}_diverged", k=-1, loss=float(total.data))
        raise TrainingDivergedError(f"non-finite loss in {phase} at step {step}")


# -- full run ------------------------------------------------------------------------


@dataclass
class RunResult:
    model: TaskModel
    pool: DomainPool
    log: MetricsLog
    config: TrainConfig
    arch: ArchConfig
    generators: list = dc_field(default_factory=list)   # (k, Generator, CycleGenerator)
    round_stats: list = dc_field(default_factory=list)  # per-k dict of safety metrics
    timings: dict = dc_field(default_factory=dict)
    snapshots: dict = dc_field(default_factory=dict)    # k -> TaskModel clone (optional)


def _pixel_rms(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over samples of per-pixel RMS distance ||a_i - b_i|| / sqrt(D)."""
    d = a.reshape(a.shape[0], -1) - b.reshape(b.shape[0], -1)
    return float(np.mean(np.linalg.norm(d, axis=1) / np.sqrt(d.shape[1])))


def run_pden(source: DomainDataset, config: TrainConfig, arch: ArchConfig,
             pretrained: Optional[TaskModel] = None,
             out_dir: Optional[Path] = None,
             snapshot_rounds: bool = False) -> RunResult:
    """The full progressive loop; see the module docstring.

    ``pretrained`` (cloned, not mutated) skips the pretrain phase, letting a
    caller share one pretrain trajectory across arms.  ``snapshot_rounds``
    keeps a task-model clone after every round (k=0 is post-pretrain), which
    the evaluation harness uses to study accuracy as a function of k.  On
    divergence, partial metrics are flushed to ``out_dir`` before the error
    propagates.
    """
    log = MetricsLog()
    result = RunResult(model=None, pool=DomainPool(source=source), log=log,
                       config=config, arch=arch)
    out = Path(out_dir) if out_dir is not None else None
    try:
        t0 = time.perf_counter()
        if pretrained is None:
            model = pretrain(source, config, arch, log=log)
        else:
            model = pretrained.clone()
            acc = accuracy_on(model, source.images, source.labels, cap=config.eval_cap)
            log.add(step=0, phase="pretrain_eval", k=0, acc_source=acc)
        result.model = model
        result.timings["pretrain"] = time.perf_counter() - t0
        if snapshot_rounds:
            result.snapshots[0] = model.clone()
        if out is not None:
            save_checkpoint(out / "checkpoints" / "task_k0.ckpt", model,
                            seed=config.seed, step=0,
                            loss_weights=config.weights.to_dict())

        mat_count = config.materialize_count
        for k in range(1, config.k_domains + 1):
            tg = time.perf_counter()
            gen, cyc = train_generator(model, source, config, arch, k, log=log)
            result.timings[f"generator_{k}"] = time.perf_counter() - tg

            synth = materialize_domain(
                gen, source, Rng(config.seed).derive("materialize", k),
                name=f"synthetic_{k}", count=mat_count)

            # safety / effectiveness at materialization time
            acc_src = accuracy_on(model, source.images, source.labels,
                                  cap=config.eval_cap)
            acc_new = accuracy_on(model, synth.images, synth.labels,
                                  cap=config.eval_cap)
            base = source.images[np.arange(len(synth)) % len(source)]
            pix = _pixel_rms(synth.images, base)
            probe = source.images[:min(64, len(source))]
            div_rng = Rng(config.seed).derive("div_probe", k)
            s1 = nets.generate(gen.frozen(), ad.constant(probe),
                               ad.constant(div_rng.normal((probe.shape[0], arch.noise_dim)))).data
            s2 = nets.generate(gen.frozen(), ad.constant(probe),
                               ad.constant(div_rng.normal((probe.shape[0], arch.noise_dim)))).data
            diversity = _pixel_rms(s1, s2)
            log.add(step=0, phase="materialize", k=k, acc_source=acc_src,
                    acc_new=acc_new, pixel_rms=pix, div_rms=diversity)
            result.round_stats.append({
                "k": k, "acc_source": acc_src, "acc_new": acc_new,
                "pixel_rms": pix, "div_rms": diversity,
            })

            result.pool.add(SyntheticDomain(dataset=synth, k=k,
                                            seed_tag=("materialize", k)),
                            mode=config.pool_mode)
            result.generators.append((k, gen, cyc))

            tr = time.perf_counter()
            retrain_task(model, result.pool, config, k, log=log)
            result.timings[f"retrain_{k}"] = time.perf_counter() - tr
            acc_post = accuracy_on(model, source.images, source.labels,
                                   cap=config.eval_cap)
            log.add(step=config.t_task, phase="retrain_eval", k=k, acc_source=acc_post)
            if snapshot_rounds:
                result.snapshots[k] = model.clone()

            if out is not None:
                save_checkpoint(out / "checkpoints" / f"gen_k{k}.ckpt", gen,
                                seed=config.seed, step=config.t_gen,
                                loss_weights=config.weights.to_dict())
                save_checkpoint(out / "checkpoints" / f"task_k{k}.ckpt", model,
                                seed=config.seed, step=config.t_task,
                                loss_weights=config.weights.to_dict())
                save_pgm_grid(synth.images[:32], out / "grids" / f"synthetic_k{k}.pgm")
    finally:
        if out is not None:
            _write_artifacts(result, out)
    return result


def _write_artifacts(result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    result.log.write(out / "metrics.csv")
    (out / "timings.json").write_text(
        json.dumps({k: round(v, 3) for k, v in result.timings.items()},
                   indent=2, sort_keys=True))
    manifest = {
        "config": result.config.to_dict(),
        "arch": result.arch.to_dict(),
        "domains": [d.name for d in result.pool.domains()],
        "rounds": result.round_stats,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if len(result.pool.source) > 0:
        save_pgm_grid(result.pool.source.images[:32], out / "grids" / "source.pgm")
    if result.model is not None:
        save_checkpoint(out / "checkpoints" / "task_final.ckpt", result.model,
                        seed=result.config.seed,
                        loss_weights=result.config.weights.to_dict())
