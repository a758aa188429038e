"""Evaluation harness: accuracy records, arm comparisons, sweeps, features.

The benchmark question is always the same: train on one clean source domain,
then measure accuracy on shifted versions of a held-out test set.  The
harness compares two arms sharing one pretrain trajectory and one seed:

* ``erm`` -- the task model right after pretraining (no expansion), and
* ``pden`` -- the same model after k rounds of progressive expansion.

Rows go to a fixed-schema CSV so sweep results from different runs
concatenate cleanly.  Feature exports project pooled features to 2-d with a
PCA basis fitted on the source domain and reused for every other domain, so
scatter plots of different domains share axes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nets
from .datasets import DomainDataset, ShiftSpec, apply_shift, benchmark_suite, few_shot_index
from .losses import cross_entropy
from .nets import ArchConfig, TaskModel, param_digest
from .optim import Adam
from .pipeline import (DomainPool, MetricsLog, TrainConfig, accuracy_on,
                       predict_batched, pretrain, run_pden)
from .rng import Rng


@dataclass(frozen=True)
class MetricsRecord:
    """One accuracy measurement of one model on one domain."""

    domain: str
    accuracy: float
    n: int
    model_id: str
    config_hash: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0, 1], got {self.accuracy}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")


def evaluate(model: TaskModel, ds: DomainDataset, config_hash: str = "",
             batch: int = 256) -> MetricsRecord:
    """Graph-free accuracy of ``model`` on every item of ``ds``."""
    if len(ds) == 0:
        raise ValueError(f"evaluate on empty dataset {ds.name!r}")
    preds = predict_batched(model, ds.images, batch=batch)
    acc = float(np.mean(preds == ds.labels))
    return MetricsRecord(domain=ds.name, accuracy=acc, n=len(ds),
                         model_id=param_digest(model)[:16], config_hash=config_hash)


# -- benchmark table --------------------------------------------------------------------

EVAL_COLUMNS = ("run_id", "arm", "domain", "shift_kind", "severity",
                "accuracy", "n", "seed", "k_domains", "w_adv", "w_cyc", "w_div")


@dataclass
class EvalTable:
    """Fixed-schema benchmark rows; deterministic CSV rendering."""

    rows: list = field(default_factory=list)

    def add(self, run_id: str, arm: str, record: MetricsRecord,
            shift: Optional[ShiftSpec], config: TrainConfig) -> None:
        self.rows.append({
            "run_id": run_id, "arm": arm, "domain": record.domain,
            "shift_kind": shift.kind if shift else "none",
            "severity": shift.severity if shift else 0,
            "accuracy": format(record.accuracy, ".12g"), "n": record.n,
            "seed": config.seed, "k_domains": config.k_domains,
            "w_adv": format(config.weights.w_adv, ".12g"),
            "w_cyc": format(config.weights.w_cyc, ".12g"),
            "w_div": format(config.weights.w_div, ".12g"),
        })

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=EVAL_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv())

    def mean_accuracy(self, arm: str, shifted_only: bool = True) -> float:
        vals = [float(r["accuracy"]) for r in self.rows
                if r["arm"] == arm and (not shifted_only or r["shift_kind"] != "none")]
        if not vals:
            raise ValueError(f"no rows for arm {arm!r}")
        return float(np.mean(vals))


def benchmark_model(model: TaskModel, test: DomainDataset,
                    shifts: list, run_id: str, arm: str,
                    config: TrainConfig, table: EvalTable,
                    config_hash: str = "") -> None:
    """Evaluate on the clean test set plus every shifted variant."""
    table.add(run_id, arm, evaluate(model, test, config_hash), None, config)
    for spec in shifts:
        shifted = apply_shift(test, spec)
        table.add(run_id, arm, evaluate(model, shifted, config_hash), spec, config)


# -- arm comparison ----------------------------------------------------------------------


@dataclass
class ArmsReport:
    """Outcome of one erm-vs-pden comparison on one (config, seed)."""

    table: EvalTable
    erm_mean_shifted: float
    pden_mean_shifted: float
    erm_source_acc: float
    pden_source_acc: float
    erm_model: Optional[TaskModel] = None
    pden_model: Optional[TaskModel] = None
    snapshots: dict = field(default_factory=dict)
    round_stats: list = field(default_factory=list)
    log: Optional[MetricsLog] = None

    @property
    def shifted_gain(self) -> float:
        return self.pden_mean_shifted - self.erm_mean_shifted

    @property
    def source_drop(self) -> float:
        return self.erm_source_acc - self.pden_source_acc


def compare_arms(train: DomainDataset, test: DomainDataset, config: TrainConfig,
                 arch: ArchConfig, shifts: Optional[list] = None,
                 run_id: str = "run", config_hash: str = "",
                 out_dir: Optional[Path] = None,
                 snapshot_rounds: bool = False) -> ArmsReport:
    """Train both arms from one shared pretrain and benchmark them.

    The expansion arm starts from a clone of the pretrained model, so the
    two arms share seeds and their pretrain trajectories are identical by
    construction; any benchmark difference is attributable to expansion.
    """
    shifts = benchmark_suite(seed=config.seed) if shifts is None else shifts
    log = MetricsLog()
    base = pretrain(train, config, arch, log=log)

    result = run_pden(train, config, arch, pretrained=base,
                      out_dir=out_dir, snapshot_rounds=snapshot_rounds)
    result.log.rows[:0] = log.rows  # keep the shared pretrain rows in front

    table = EvalTable()
    benchmark_model(base, test, shifts, run_id, "erm", config, table, config_hash)
    benchmark_model(result.model, test, shifts, run_id, "pden", config, table, config_hash)

    report = ArmsReport(
        table=table,
        erm_mean_shifted=table.mean_accuracy("erm"),
        pden_mean_shifted=table.mean_accuracy("pden"),
        erm_source_acc=accuracy_on(base, test.images, test.labels),
        pden_source_acc=accuracy_on(result.model, test.images, test.labels),
        erm_model=base,
        pden_model=result.model,
        snapshots=result.snapshots,
        round_stats=result.round_stats,
        log=result.log,
    )
    if out_dir is not None:
        table.write(Path(out_dir) / "eval.csv")
        summary = {
            "erm_mean_shifted": report.erm_mean_shifted,
            "pden_mean_shifted": report.pden_mean_shifted,
            "shifted_gain": report.shifted_gain,
            "erm_source_acc": report.erm_source_acc,
            "pden_source_acc": report.pden_source_acc,
        }
        (Path(out_dir) / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True))
    return report


SWEEPABLE = {
    "K": lambda cfg, v: replace(cfg, k_domains=int(v)),
    "w_adv": lambda cfg, v: replace(cfg, weights=replace(cfg.weights, w_adv=float(v))),
    "w_cyc": lambda cfg, v: replace(cfg, weights=replace(cfg.weights, w_cyc=float(v))),
    "w_div": lambda cfg, v: replace(cfg, weights=replace(cfg.weights, w_div=float(v))),
}


def sweep(train: DomainDataset, test: DomainDataset, config: TrainConfig,
          arch: ArchConfig, param: str, values: list,
          shifts: Optional[list] = None, run_id: str = "sweep",
          out_dir: Optional[Path] = None) -> EvalTable:
    """Re-run compare_arms for each value of one hyperparameter.

    Rows from every setting land in one table (the swept value is readable
    off the k_domains / w_* columns), so a single CSV holds the whole curve.
    """
    if param not in SWEEPABLE:
        raise ValueError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    if not values:
        raise ValueError("sweep needs at least one value")
    combined = EvalTable()
    for v in values:
        cfg_v = SWEEPABLE[param](config, v)
        sub_id = f"{run_id}-{param}{v}"
        report = compare_arms(train, test, cfg_v, arch, shifts=shifts, run_id=sub_id)
        combined.rows.extend(report.table.rows)
    if out_dir is not None:
        combined.write(Path(out_dir) / "sweep.csv")
    return combined


# -- few-shot adaptation -------------------------------------------------------------------


def few_shot_adapt(model: TaskModel, shots: DomainDataset, steps: int = 40,
                   lr: float = 1e-3, heads_only: bool = False) -> TaskModel:
    """Fine-tune a clone of ``model`` on a small labeled target sample.

    Full-batch cross-entropy for ``steps`` Adam steps (the shot set is tiny,
    so batching would only add noise); deterministic, no sampling involved.
    ``heads_only`` freezes the conv features and adapts the classifier only.
    ``steps=0`` returns an untouched clone.  Classes absent from the shot
    set raise: silently adapting on a partial label space invalidates
    cross-domain comparisons.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    present = np.unique(shots.labels)
    if present.size < shots.num_classes:
        missing = sorted(set(range(shots.num_classes)) - set(present.tolist()))
        raise ValueError(f"shot set is missing classes {missing}")
    adapted = model.clone()
    if steps == 0:
        return adapted
    if heads_only:
        params = [adapted.clf_hidden.w, adapted.clf_hidden.b,
                  adapted.clf_out.w, adapted.clf_out.b]
    else:
        params = adapted.parameters()
    opt = Adam(params, lr=lr)
    x = ad.constant(shots.images)
    for _ in range(steps):
        out = nets.forward_task(adapted, x)
        loss = cross_entropy(out.yhat, shots.labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return adapted


def few_shot_report(model: TaskModel, target: DomainDataset, shift: ShiftSpec,
                    shots: int = 10, steps: int = 40, lr: float = 1e-3,
                    heads_only: bool = False, shot_seed: int = 0) -> dict:
    """Adapt on ``shots``/class of the shifted target, report before/after.

    The shot set is drawn from the shifted *training-side* view of the
    target dataset and excluded from the evaluation split.
    """
    shifted = apply_shift(target, shift)
    shot_rng = Rng(shot_seed).derive("few_shot", shift.kind, shift.severity)
    shot_idx = few_shot_index(shifted, shots, shot_rng)
    shot_set = shifted.subset(shot_idx, name=f"{shifted.name}:{shots}shot")
    eval_mask = np.ones(len(shifted), dtype=bool)
    eval_mask[shot_idx] = False
    eval_set = shifted.subset(np.flatnonzero(eval_mask), name=f"{shifted.name}:heldout")

    before = evaluate(model, eval_set)
    adapted = few_shot_adapt(model, shot_set, steps=steps, lr=lr, heads_only=heads_only)
    after = evaluate(adapted, eval_set)
    return {
        "domain": shifted.name, "shots": shots, "steps": steps,
        "accuracy_before": before.accuracy, "accuracy_after": after.accuracy,
        "gain": after.accuracy - before.accuracy, "n_eval": before.n,
    }


# -- feature export ---------------------------------------------------------------------


def export_features(model: TaskModel, domains, out_path,
                    basis_index: int = 0) -> int:
    """Write 2-d PCA projections of pooled features to a CSV.

    ``domains`` is one dataset or a list; the PCA basis (top-2 principal
    directions, deterministic sign) is fitted on ``domains[basis_index]``
    and reused for every other domain so all rows share axes.  Columns:
    x1, x2, label, domain.  Returns the number of data rows written.
    """
    if isinstance(domains, DomainDataset):
        domains = [domains]
    if not domains:
        raise ValueError("export_features needs at least one dataset")
    if not 0 <= basis_index < len(domains):
        raise IndexError(f"basis_index {basis_index} out of range")
    frozen = model.frozen()

    def pooled(ds: DomainDataset) -> np.ndarray:
        feats = []
        for lo in range(0, len(ds), 256):
            xb = ad.constant(ds.images[lo:lo + 256])
            feats.append(nets.features(frozen, xb).data)
        return np.concatenate(feats)

    base = pooled(domains[basis_index])
    mean = base.mean(axis=0)
    centered = base - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:2]
    for i in range(2):
        j = int(np.argmax(np.abs(basis[i])))
        if basis[i, j] < 0:
            basis[i] = -basis[i]
    if svals.size >= 2 and svals[1] > svals[0] + 1e-12:  # pragma: no cover
        raise AssertionError("principal axes out of order")

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n_rows = 0
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["x1", "x2", "label", "domain"])
        for i, ds in enumerate(domains):
            feats = base if i == basis_index else pooled(ds)
            proj = (feats - mean) @ basis.T
            for row, label in zip(proj, ds.labels):
                writer.writerow([format(row[0], ".8g"), format(row[1], ".8g"),
                                 int(label), ds.name])
                n_rows += 1
    return n_rows


def config_hash_of(payload: dict) -> str:
    """Stable short hash of a JSON-serializable config payload."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
