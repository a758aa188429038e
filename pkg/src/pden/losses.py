"""Training objectives for the task model and the domain synthesizer.

Two loss families:

* Source-side: cross-entropy plus an InfoNCE term that pulls unit embeddings
  of same-label pairs together against the rest of the batch.  Inner products
  are used bare (no temperature), the positive stays in the denominator, and
  the denominator runs over all other batch entries.
* Synthesis-side: a weighted sum of (a) cross-entropy on synthesized images
  so labels survive translation, (b) a cycle reconstruction norm so content
  survives, (c) an adversarial contrastive term that pushes synthesized
  embeddings away from their sources while the task model pulls them back,
  and (d) a divergence bonus for making two noise draws produce visibly
  different images.

The adversarial term is split structurally: the task-side half sees detached
synthesized images (generator gets exactly zero gradient from it) and the
generator-side half runs through a frozen parameter view of the task model
(task parameters get exactly zero gradient from it).  One backward pass over
the summed objective then trains both players in opposite directions.

The generator-side half uses the saturation-free form
``sum_i log(1 - frac_i)`` where ``frac_i`` is the positive's share of row
``i``'s denominator.  The naive form (minimize ``-InfoNCE`` directly) is kept
as :func:`loss_adv_reference` because its gradient does not vanish as the
generator wins, which destabilizes joint training; a regression test pins
that comparison down.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Tensor
from .rng import Rng


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights of the synthesis objective."""

    w_cyc: float = 20.0
    w_adv: float = 0.1
    w_div: float = 0.1

    def __post_init__(self):
        for name in ("w_cyc", "w_adv", "w_div"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict:
        return {"w_cyc": self.w_cyc, "w_adv": self.w_adv, "w_div": self.w_div}


@dataclass
class PairedBatch:
    """A batch of source images with optional same-label counterparts.

    ``x`` and ``x_plus`` are index-aligned: ``x_plus[i]`` shows the same
    class as ``x[i]`` (typically from another domain).  Synthesis phases use
    plain batches (``x_plus=None``); the paired form feeds the source loss.
    """

    x: Tensor
    y: np.ndarray
    x_plus: Optional[Tensor] = None

    def __post_init__(self):
        if self.x.ndim != 4:
            raise ad.ShapeError(f"batch images must be (N, C, H, W), got {self.x.shape}")
        n = self.x.shape[0]
        if n < 2:
            raise ValueError(f"batch needs at least 2 items, got {n}")
        self.y = np.asarray(self.y)
        if not np.issubdtype(self.y.dtype, np.integer):
            raise TypeError("labels must be integer-typed")
        if self.y.shape != (n,):
            raise ad.ShapeError(f"labels shape {self.y.shape} != ({n},)")
        if self.x_plus is not None and self.x_plus.shape != self.x.shape:
            raise ad.ShapeError(
                f"counterpart shape {self.x_plus.shape} != {self.x.shape}")

    @property
    def n(self) -> int:
        return self.x.shape[0]


# -- elementary terms ---------------------------------------------------------------


def cross_entropy(yhat: Tensor, y: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of labels under distribution rows.

    ``yhat`` rows are expected to be probability distributions (softmax
    output).  Picked probabilities are floored at 1e-12 so a confidently
    wrong model yields a large finite loss, never an infinity.
    """
    if yhat.ndim != 2:
        raise ad.ShapeError(f"cross_entropy needs 2-d predictions, got {yhat.shape}")
    y = np.asarray(y)
    if y.shape != (yhat.shape[0],):
        raise ad.ShapeError(f"labels shape {y.shape} != ({yhat.shape[0]},)")
    if y.min(initial=0) < 0 or y.max(initial=0) >= yhat.shape[1]:
        raise IndexError(f"labels out of range for {yhat.shape[1]} classes")
    picked = ad.gather_rows(yhat, y)
    return ad.neg(ad.tmean(ad.log(ad.clamp_min(picked, 1e-12))))


def _pair_index(two_n: int) -> np.ndarray:
    """Positive-pair permutation: i <-> i + N."""
    n = two_n // 2
    return np.concatenate([np.arange(n, two_n), np.arange(0, n)])


def _nce_parts(z: Tensor) -> tuple[Tensor, Tensor]:
    """Shared InfoNCE plumbing on unit embeddings z (2N, d).

    Returns ``(pos, logdenom)`` where ``pos[i]`` is the inner product with
    row i's positive and ``logdenom[i] = log sum_{j != i} exp(<z_i, z_j>)``.
    The row max over j != i is subtracted as a detached constant inside the
    exp; algebraically a no-op, so gradients stay exact.
    """
    if z.ndim != 2:
        raise ad.ShapeError(f"contrastive terms need 2-d embeddings, got {z.shape}")
    two_n = z.shape[0]
    if two_n < 2 or two_n % 2:
        raise ad.ShapeError(f"contrastive terms need an even batch >= 2, got {two_n}")
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ad.DomainError("contrastive terms need unit-norm embeddings (off by > 1e-6)")

    sims = ad.matmul(z, ad.transpose2d(z))  # (2N, 2N)

    offdiag = np.ones((two_n, two_n)) - np.eye(two_n)
    masked = sims.data + np.where(offdiag > 0, 0.0, -np.inf)
    row_max = masked.max(axis=1)  # detached constant

    shifted = ad.sub(sims, ad.constant(np.broadcast_to(row_max[:, None], sims.shape).copy()))
    expd = ad.mul(ad.exp(shifted), ad.constant(offdiag))
    row_sum = ad.sum_axes(expd, (1,))
    logdenom = ad.add(ad.log(row_sum), ad.constant(row_max))

    pos = ad.gather_rows(sims, _pair_index(two_n))
    return pos, logdenom


def info_nce(z: Tensor) -> Tensor:
    """Mean contrastive loss over 2N unit embeddings, pairs (i, i+N).

    Per row: -log( exp(<z_i, z_pair(i)>) / sum_{j != i} exp(<z_i, z_j>) ).
    The positive is itself one of the denominator terms, so the ratio is at
    most 1 and every row's loss is >= 0; a batch with a single pair whose
    embeddings coincide reaches exactly 0.
    """
    pos, logdenom = _nce_parts(z)
    return ad.tmean(ad.sub(logdenom, pos))


def info_nce_complement(z: Tensor) -> Tensor:
    """Saturation-free adversarial form: sum_i log(1 - frac_i) <= 0.

    ``frac_i = exp(pos_i - logdenom_i)`` is the positive's share of the
    denominator; it is clamped just below 1 so the log stays finite when a
    row's positive dominates completely.  Summed (not averaged) over rows.
    """
    pos, logdenom = _nce_parts(z)
    frac = ad.exp(ad.sub(pos, logdenom))
    frac = ad.clamp_max(frac, 1.0 - 1e-12)
    one_minus = ad.sub(1.0, frac)
    return ad.tsum(ad.log(one_minus))


# -- task-model objectives -------------------------------------------------------------


def loss_src(batch: PairedBatch, model: nets.TaskModel) -> tuple[Tensor, dict]:
    """Supervised-plus-contrastive objective on a paired batch.

    Runs the task model on the 2N combined images, applies cross-entropy on
    all rows and InfoNCE on the unit embeddings with (i, i+N) positives.
    Returns the scalar total and a float breakdown for logging.
    """
    if batch.x_plus is None:
        raise ValueError("loss_src needs a paired batch (x_plus is None)")
    x_all = ad.concat([batch.x, batch.x_plus], axis=0)
    y_all = np.concatenate([batch.y, batch.y])
    out = nets.forward_task(model, x_all)
    ce = cross_entropy(out.yhat, y_all)
    nce = info_nce(out.z)
    total = ad.add(ce, nce)
    return total, {"ce": ce.item(), "nce": nce.item()}


def loss_cls(batch: PairedBatch, model: nets.TaskModel, gen: nets.Generator,
             rng: Rng) -> Tensor:
    """Cross-entropy on synthesized images; trains both G and the task model.

    Draws one fresh noise vector per sample, synthesizes, classifies.
    Gradients flow into the generator (labels must survive synthesis) and
    into the task model (it must classify what the generator makes).
    """
    noise = ad.constant(rng.normal((batch.n, gen.arch.noise_dim)))
    xhat = nets.generate(gen, batch.x, noise)
    out = nets.forward_task(model, xhat)
    return cross_entropy(out.yhat, batch.y)


def loss_cyc(x: Tensor, gen: nets.Generator, cyc: nets.CycleGenerator,
             rng: Rng) -> Tensor:
    """Cycle reconstruction: mean over samples of ||x - C(G(x, n))||_2.

    The norm is the plain Euclidean norm over each sample's pixels (not
    normalized by dimension), matching the batch-mean-of-norms convention of
    the other distance terms.
    """
    noise = ad.constant(rng.normal((x.shape[0], gen.arch.noise_dim)))
    xhat = nets.generate(gen, x, noise)
    rec = nets.cycle(cyc, xhat)
    diff = ad.sub(x, rec)
    sq = ad.sum_axes(ad.mul(diff, diff), (1, 2, 3))
    norms = ad.tsqrt(ad.clamp_min(sq, 1e-24))
    return ad.tmean(norms)


def _combined_embeddings(model: nets.TaskModel, x: Tensor, xhat: Tensor) -> Tensor:
    """Unit embeddings of [x; xhat] stacked so pairs are (i, i+N)."""
    out = nets.forward_task(model, ad.concat([x, xhat], axis=0))
    return out.z


def loss_adv(batch: PairedBatch, model: nets.TaskModel, gen: nets.Generator,
             rng: Rng) -> tuple[Tensor, Tensor]:
    """Adversarial contrastive pair (generator_term, task_term).

    * ``generator_term = -sum_i log(1 - frac_i) >= 0``: computed through a
      frozen view of the task model, so minimizing it moves only G, pushing
      synthesized embeddings away from their sources.
    * ``task_term``: plain InfoNCE on embeddings of sources and *detached*
      synthesized images, so minimizing it moves only the task model,
      pulling the pairs back together.

    Both terms see the same noise draw (one synthesis per call).
    """
    noise = ad.constant(rng.normal((batch.n, gen.arch.noise_dim)))
    xhat = nets.generate(gen, batch.x, noise)

    z_gen = _combined_embeddings(model.frozen(), batch.x, xhat)
    generator_term = ad.neg(info_nce_complement(z_gen))

    z_task = _combined_embeddings(model, batch.x, xhat.detach())
    task_term = info_nce(z_task)
    return generator_term, task_term


def loss_adv_reference(batch: PairedBatch, model: nets.TaskModel,
                       gen: nets.Generator, rng: Rng) -> tuple[Tensor, Tensor]:
    """Naive adversarial pair: generator directly maximizes InfoNCE.

    Reference implementation only (never used in training): as the generator
    wins, each row's gradient scale is proportional to ``1 - frac_i`` for the
    stable form but stays O(1) here, so this form keeps shoving embeddings
    after separation is achieved and destabilizes the joint game.
    """
    noise = ad.constant(rng.normal((batch.n, gen.arch.noise_dim)))
    xhat = nets.generate(gen, batch.x, noise)

    z_gen = _combined_embeddings(model.frozen(), batch.x, xhat)
    generator_term = ad.neg(info_nce(z_gen))

    z_task = _combined_embeddings(model, batch.x, xhat.detach())
    task_term = info_nce(z_task)
    return generator_term, task_term


def loss_div(x: Tensor, gen: nets.Generator, rng: Rng,
             clamp: Optional[float] = 1.0) -> Tensor:
    """Divergence bonus: minus the mean distance between two noise draws.

    Synthesizes the batch twice with independent noise and returns
    ``-mean_i min(||xhat1_i - xhat2_i||_2, ceiling)``.  The optional clamp is
    a per-pixel-RMS ceiling: ``ceiling = clamp * sqrt(D)`` for D pixels, so
    the term stops rewarding difference once images differ by ``clamp`` per
    pixel on average.  ``clamp=None`` disables the ceiling.
    """
    n1 = ad.constant(rng.normal((x.shape[0], gen.arch.noise_dim)))
    n2 = ad.constant(rng.normal((x.shape[0], gen.arch.noise_dim)))
    x1 = nets.generate(gen, x, n1)
    x2 = nets.generate(gen, x, n2)
    diff = ad.sub(x1, x2)
    sq = ad.sum_axes(ad.mul(diff, diff), (1, 2, 3))
    norms = ad.tsqrt(ad.clamp_min(sq, 1e-24))
    if clamp is not None:
        if clamp < 0:
            raise ValueError(f"divergence clamp must be >= 0 or None, got {clamp}")
        d = int(np.prod(x.shape[1:]))
        norms = ad.clamp_max(norms, float(clamp) * float(np.sqrt(d)))
    return ad.neg(ad.tmean(norms))


def loss_unseen(batch: PairedBatch, model: nets.TaskModel, gen: nets.Generator,
                cyc: nets.CycleGenerator, weights: LossWeights, rng: Rng,
                div_clamp: Optional[float] = 1.0) -> tuple[Tensor, dict]:
    """Full synthesis objective: cls + w_cyc*cyc + w_adv*(gen + task) + w_div*div.

    Each term draws its own fresh noise from ``rng`` (four independent
    syntheses per step).  Returns the scalar total plus a per-term float
    breakdown; the weighted recombination of the breakdown reproduces the
    total to within accumulation rounding.
    """
    l_cls = loss_cls(batch, model, gen, rng)
    l_cyc = loss_cyc(batch.x, gen, cyc, rng)
    adv_gen, adv_task = loss_adv(batch, model, gen, rng)
    l_div = loss_div(batch.x, gen, rng, clamp=div_clamp)

    total = ad.add(
        ad.add(l_cls, ad.mul(ad.add(adv_gen, adv_task), weights.w_adv)),
        ad.add(ad.mul(l_cyc, weights.w_cyc), ad.mul(l_div, weights.w_div)),
    )
    parts = {
        "cls": l_cls.item(),
        "cyc": l_cyc.item(),
        "adv_gen": adv_gen.item(),
        "adv_task": adv_task.item(),
        "div": l_div.item(),
    }
    return total, parts


def recombine(parts: dict, weights: LossWeights) -> float:
    """Weighted sum of a loss_unseen breakdown; mirrors its arithmetic order."""
    return (parts["cls"] + (parts["adv_gen"] + parts["adv_task"]) * weights.w_adv) + (
        parts["cyc"] * weights.w_cyc + parts["div"] * weights.w_div)
