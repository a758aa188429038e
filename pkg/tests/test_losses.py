"""Loss-level oracles: exact closed-form values, gradient partition of the
adversarial game, and distribution-free invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import pden.autodiff as ad
from pden import nets
from pden.losses import (LossWeights, PairedBatch, cross_entropy, info_nce,
                         info_nce_complement, loss_adv, loss_adv_reference,
                         loss_cls, loss_cyc, loss_div, loss_src, loss_unseen,
                         recombine)
from pden.rng import Rng

from conftest import unit_rows


# -- exact value oracles -----------------------------------------------------------


def _identical_unit_embeddings(two_n: int, d: int = 6) -> ad.Tensor:
    row = np.zeros(d)
    row[0] = 1.0
    return ad.constant(np.tile(row, (two_n, 1)))


@pytest.mark.parametrize("two_n", [4, 8, 16])
def test_info_nce_identical_embeddings_oracle(two_n):
    # all similarities equal: every ratio is 1/(2N-1), so the loss is ln(2N-1)
    val = info_nce(_identical_unit_embeddings(two_n)).item()
    assert abs(val - np.log(two_n - 1)) < 1e-9


@pytest.mark.parametrize("two_n", [4, 8, 16])
def test_info_nce_complement_identical_embeddings_oracle(two_n):
    # sum over rows of log(1 - 1/(2N-1)) = 2N * ln((2N-2)/(2N-1))
    val = info_nce_complement(_identical_unit_embeddings(two_n)).item()
    assert abs(val - two_n * np.log((two_n - 2) / (two_n - 1))) < 1e-9


def test_single_pair_info_nce_is_exactly_zero():
    z = ad.constant(unit_rows(Rng(3), 2, 5))
    assert info_nce(z).item() == 0.0  # the only negative IS the positive


def test_cross_entropy_uniform_oracle():
    yhat = ad.constant(np.full((7, 10), 0.1))
    y = np.arange(7) % 10
    assert abs(cross_entropy(yhat, y).item() - np.log(10.0)) < 1e-12


def test_cross_entropy_perfect_prediction_is_near_zero():
    yhat = np.full((4, 3), 1e-9)
    y = np.array([0, 1, 2, 0])
    yhat[np.arange(4), y] = 1.0 - 2e-9
    assert cross_entropy(ad.constant(yhat), y).item() < 1e-8


def test_cross_entropy_rejects_bad_labels():
    yhat = ad.constant(np.full((2, 3), 1 / 3))
    with pytest.raises(Exception):
        cross_entropy(yhat, np.array([0, 3]))


# -- InfoNCE structure -------------------------------------------------------------


def test_info_nce_requires_unit_norm():
    z = Rng(5).normal((4, 6)) * 3.0
    with pytest.raises(ad.DomainError):
        info_nce(ad.constant(z))


def test_info_nce_requires_even_batch():
    with pytest.raises(ad.ShapeError):
        info_nce(ad.constant(unit_rows(Rng(5), 3, 4)))


def test_info_nce_decreases_as_pairs_align():
    rng = Rng(11)
    base = unit_rows(rng, 3, 8)
    jitter = unit_rows(rng.derive("j"), 3, 8)
    # aligned pairs: z_{i+N} == z_i; mixed pairs: unrelated rows
    aligned = ad.constant(np.vstack([base, base]))
    mixed = ad.constant(np.vstack([base, jitter]))
    assert info_nce(aligned).item() < info_nce(mixed).item()


@given(n=st.integers(2, 6), seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_info_nce_nonnegative_property(n, seed):
    z = ad.constant(unit_rows(Rng(seed), 2 * n, 7))
    assert info_nce(z).item() >= 0.0


@given(n=st.integers(2, 6), seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_info_nce_complement_nonpositive_property(n, seed):
    # each frac lies in (0, 1), so every log(1 - frac) is negative
    z = ad.constant(unit_rows(Rng(seed), 2 * n, 7))
    assert info_nce_complement(z).item() < 0.0


@given(seed=st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_info_nce_row_max_shift_matches_naive_formula(seed):
    z = unit_rows(Rng(seed), 6, 5)
    got = info_nce(ad.constant(z)).item()
    sims = z @ z.T
    n = 3
    pair = np.array([3, 4, 5, 0, 1, 2])
    total = 0.0
    for i in range(6):
        neg = np.exp([sims[i, j] for j in range(6) if j != i]).sum()
        total += np.log(neg) - sims[i, pair[i]]
    assert abs(got - total / 6) < 1e-9


# -- batch container ---------------------------------------------------------------


def test_paired_batch_validation():
    x = ad.constant(np.zeros((4, 1, 8, 8)))
    y = np.array([0, 1, 0, 1])
    assert PairedBatch(x=x, y=y).n == 4
    with pytest.raises(ValueError):
        PairedBatch(x=ad.constant(np.zeros((1, 1, 8, 8))), y=np.array([0]))
    with pytest.raises(TypeError):
        PairedBatch(x=x, y=y.astype(np.float64))
    with pytest.raises(ad.ShapeError):
        PairedBatch(x=x, y=y, x_plus=ad.constant(np.zeros((3, 1, 8, 8))))
    with pytest.raises(ValueError):
        PairedBatch(x=x, y=np.array([0, 1, 0]))


def test_loss_src_requires_pair_half(tiny_arch):
    model = nets.init_task_model(tiny_arch, Rng(2))
    batch = PairedBatch(x=ad.constant(np.zeros((2, 1, 8, 8)) + 0.5),
                        y=np.array([0, 1]))
    with pytest.raises(ValueError):
        loss_src(batch, model)


# -- composite losses on a tiny setup ----------------------------------------------


def _setup(seed: int, tiny_arch, tiny_train, n: int = 4):
    rng = Rng(seed)
    model = nets.init_task_model(tiny_arch, rng.derive("m"))
    gen = nets.init_generator(tiny_arch, rng.derive("g"))
    cyc = nets.init_cycle_generator(tiny_arch, rng.derive("c"))
    x = ad.constant(tiny_train.images[:n])
    x_plus = ad.constant(np.clip(tiny_train.images[:n] + 0.01, 0.0, 1.0))
    y = tiny_train.labels[:n]
    return model, gen, cyc, PairedBatch(x=x, y=y, x_plus=x_plus)


def test_loss_src_parts_sum(tiny_arch, tiny_train):
    model, _, _, batch = _setup(1, tiny_arch, tiny_train)
    total, parts = loss_src(batch, model)
    assert set(parts) == {"ce", "nce"}
    assert abs(total.item() - (parts["ce"] + parts["nce"])) < 1e-12


def test_loss_cyc_zero_for_perfect_reconstruction(tiny_arch, tiny_train):
    # distance of a batch to itself, bypassing the nets: direct formula check
    x = ad.constant(tiny_train.images[:3])
    diff = ad.sub(x, x)
    sq = ad.sum_axes(ad.mul(diff, diff), (1, 2, 3))
    norms = ad.tsqrt(ad.clamp_min(sq, 1e-24))
    assert ad.tmean(norms).item() <= 1e-9


def test_loss_unseen_breakdown_recombines_exactly(tiny_arch, tiny_train):
    model, gen, cyc, batch = _setup(5, tiny_arch, tiny_train)
    weights = LossWeights()
    total, parts = loss_unseen(batch, model, gen, cyc, weights, Rng(55))
    assert set(parts) == {"cls", "cyc", "adv_gen", "adv_task", "div"}
    assert recombine(parts, weights) == total.item()


def test_loss_div_ceiling_engages():
    # two constant batches at distance 0.8 per pixel, ceiling at 0.5 per pixel
    d = 1 * 4 * 4

    x1 = ad.constant(np.zeros((2, 1, 4, 4)))
    x2 = ad.constant(np.full((2, 1, 4, 4), 0.8))
    diff = ad.sub(x1, x2)
    sq = ad.sum_axes(ad.mul(diff, diff), (1, 2, 3))
    norms = ad.tsqrt(ad.clamp_min(sq, 1e-24))
    capped = ad.clamp_max(norms, 0.5 * np.sqrt(d))
    val = ad.neg(ad.tmean(capped)).item()
    assert val == -0.5 * np.sqrt(d)


def test_loss_div_negative_and_clamp_validation(tiny_arch, tiny_train):
    _, gen, _, batch = _setup(6, tiny_arch, tiny_train)
    val = loss_div(batch.x, gen, Rng(9), clamp=1.0).item()
    assert val < 0.0  # fresh generator with distinct noises differs somewhere
    unclamped = loss_div(batch.x, gen, Rng(9), clamp=None).item()
    assert unclamped <= val + 1e-15  # ceiling can only shrink the distance
    with pytest.raises(ValueError):
        loss_div(batch.x, gen, Rng(9), clamp=-0.1)


# -- adversarial gradient partition ------------------------------------------------


def test_adversarial_cross_gradients_are_exactly_zero(tiny_arch, tiny_train):
    model, gen, cyc, batch = _setup(1, tiny_arch, tiny_train)

    gen_term, task_term = loss_adv(batch, model, gen, Rng(77))
    for p in model.parameters() + gen.parameters():
        p.zero_grad()
    gen_term.backward()
    assert all(p.grad is None or not p.grad.any() for p in model.parameters())
    assert any(p.grad is not None and p.grad.any() for p in gen.parameters())

    for p in model.parameters() + gen.parameters():
        p.zero_grad()
    task_term.backward()
    assert all(p.grad is None or not p.grad.any() for p in gen.parameters())
    assert any(p.grad is not None and p.grad.any() for p in model.parameters())


def test_one_backward_trains_both_players(tiny_arch, tiny_train):
    model, gen, cyc, batch = _setup(1, tiny_arch, tiny_train)
    gen_term, task_term = loss_adv(batch, model, gen, Rng(78))
    ad.add(gen_term, task_term).backward()
    assert any(p.grad is not None and p.grad.any() for p in gen.parameters())
    assert any(p.grad is not None and p.grad.any() for p in model.parameters())


def test_stable_and_reference_generator_terms_agree_in_direction(tiny_arch, tiny_train):
    # both push synthesized embeddings away from sources; the stable form's
    # per-row gradient scale decays as separation is achieved
    model, gen, cyc, batch = _setup(1, tiny_arch, tiny_train)
    stable, _ = loss_adv(batch, model, gen, Rng(80))
    reference, _ = loss_adv_reference(batch, model, gen, Rng(80))
    stable.backward()
    g_stable = np.concatenate([p.grad.ravel().copy() for p in gen.parameters()
                               if p.grad is not None])
    for p in gen.parameters():
        p.zero_grad()
    reference.backward()
    g_ref = np.concatenate([p.grad.ravel().copy() for p in gen.parameters()
                            if p.grad is not None])
    cosine = g_stable @ g_ref / (np.linalg.norm(g_stable) * np.linalg.norm(g_ref))
    assert cosine > 0.9


def test_reference_generator_term_value_relationship(tiny_arch, tiny_train):
    # stable term = -sum log(1 - frac) > 0; reference = -info_nce < 0
    model, gen, cyc, batch = _setup(1, tiny_arch, tiny_train)
    stable, _ = loss_adv(batch, model, gen, Rng(81))
    reference, _ = loss_adv_reference(batch, model, gen, Rng(81))
    assert stable.item() > 0.0
    assert reference.item() < 0.0


def test_loss_cls_uses_synthesized_images(tiny_arch, tiny_train):
    model, gen, cyc, batch = _setup(1, tiny_arch, tiny_train)
    val = loss_cls(batch, model, gen, Rng(82))
    val.backward()
    assert any(p.grad is not None and p.grad.any() for p in gen.parameters())


def test_loss_weights_validation():
    w = LossWeights()
    assert (w.w_cyc, w.w_adv, w.w_div) == (20.0, 0.1, 0.1)
    with pytest.raises(ValueError):
        LossWeights(w_cyc=-1.0)
    with pytest.raises(ValueError):
        LossWeights(w_adv=float("nan"))
    assert set(w.to_dict()) == {"w_cyc", "w_adv", "w_div"}
