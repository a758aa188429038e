"""Finite-difference verification of every differentiable op and loss.

Central differences with step ``h`` approximate each partial derivative; the
relative error against the analytic gradient is
``|a - n| / max(|a|, |n|, 1)`` and must stay below ``rel_tol``.

Elementary ops are checked coordinate-exhaustively on batches of small random
instances.  Composite losses run on a tiny architecture with randomized
coordinate probing so the whole suite stays inside a one-minute budget.

Losses with stop-gradient structure (the adversarial pair and the full
synthesis objective) are checked per player: the generator-side objective is
differenced against generator/cycle parameters and the task-side objective
against task parameters, plus exact-zero assertions on the two blocked
directions.  Differencing the *joint* objective would be wrong by design:
its value depends on parameters its gradient deliberately ignores.

Optimizers are covered by closed-form single-step checks (SGD: p -= lr*g;
Adam from zero state: |update| ~= lr for |g| >> eps).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import losses, nets
from .autodiff import Tensor
from .optim import SGD, Adam
from .rng import Rng


@dataclass
class CheckResult:
    name: str
    worst_rel_err: float
    n_instances: int
    n_coords: int
    passed: bool
    note: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        detail = self.note or (
            f"worst rel err {self.worst_rel_err:.3e} over "
            f"{self.n_instances} instances / {self.n_coords} coords")
        return f"{status:4s}  {self.name:34s} {detail}"


def finite_diff_check(build: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5, rel_tol: float = 1e-4,
                      probes: Optional[int] = None,
                      probe_rng: Optional[Rng] = None) -> tuple[float, int]:
    """Compare analytic grads of ``build()`` against central differences.

    ``build`` must rebuild the scalar loss from the params' current data on
    every call.  With ``probes`` set, that many random coordinates per tensor
    are differenced (deduplicated); otherwise every coordinate is.  Returns
    ``(worst_rel_err, n_coords_checked)``.
    """
    for p in params:
        p.grad = None
    build().backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    checked = 0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        if probes is None:
            coords = range(flat.size)
        else:
            draw = probe_rng.integers(0, flat.size, (min(probes, flat.size),))
            coords = sorted(set(int(c) for c in draw))
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            f_plus = build().item()
            flat[i] = old - h
            f_minus = build().item()
            flat[i] = old
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = an.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, rel)
            checked += 1
    return worst, checked


# -- elementary op checks -----------------------------------------------------------


def _weighted(out: Tensor, rng: Rng) -> Tensor:
    """Scalarize an op output with a fixed random weighting (full Jacobian probe).

    Weights come from a derived child stream, never from ``rng`` itself:
    derive() is pure, so repeated calls inside an FD loop see identical
    weights even though ``rng`` would advance if sampled directly.
    """
    w = ad.constant(rng.derive("weights").normal(out.shape))
    return ad.tsum(ad.mul(out, w))


def _op_cases(rng: Rng):
    """(name, instance builder) pairs; builder(r) -> (build_fn, params)."""

    def binary(op):
        def make(r):
            a = ad.parameter(r.normal((3, 4)))
            b = ad.parameter(r.normal((3, 4)) + (3.0 if op is ad.div else 0.0))
            s = ad.parameter(r.normal(()) + (3.0 if op is ad.div else 0.0))
            wr = r.derive("w")
            def build():
                return ad.add(_weighted(op(a, b), wr.derive("ab")),
                              _weighted(op(a, s), wr.derive("as")))
            return build, [a, b, s]
        return make

    def unary(op, transform=None, shift=0.0):
        def make(r):
            raw = r.normal((2, 5))
            if transform is not None:
                raw = transform(raw)
            a = ad.parameter(raw + shift)
            wr = r.derive("w")
            def build():
                return _weighted(op(a), wr)
            return build, [a]
        return make

    def clamp_case(which):
        def make(r):
            # keep coordinates clear of the clamp boundary: FD straddles kinks
            vals = r.normal((3, 4))
            vals = np.where(np.abs(vals) < 0.2, vals + 0.5, vals)
            a = ad.parameter(vals)
            wr = r.derive("w")
            op = ad.clamp_min if which == "min" else ad.clamp_max
            def build():
                return _weighted(op(a, 0.0), wr)
            return build, [a]
        return make

    def matmul_case(r):
        a = ad.parameter(r.normal((3, 4)))
        b = ad.parameter(r.normal((4, 2)))
        wr = r.derive("w")
        def build():
            return _weighted(ad.matmul(a, b), wr)
        return build, [a, b]

    def conv_case(stride, padding):
        def make(r):
            x = ad.parameter(r.normal((2, 3, 5, 6)))
            w = ad.parameter(r.normal((4, 3, 3, 3)))
            wr = r.derive("w")
            def build():
                return _weighted(ad.conv2d(x, w, stride, padding), wr)
            return build, [x, w]
        return make

    def softmax_case(r):
        x = ad.parameter(r.normal((4, 5)))
        wr = r.derive("w")
        def build():
            return _weighted(ad.softmax(x), wr)
        return build, [x]

    def l2norm_case(r):
        x = ad.parameter(r.normal((4, 5)) + 0.1)
        wr = r.derive("w")
        def build():
            return _weighted(ad.l2_normalize(x), wr)
        return build, [x]

    def instance_stats_case(r):
        z = ad.parameter(r.normal((2, 3, 4, 4)))
        wr = r.derive("w")
        def build():
            mu, sigma = ad.instance_stats(z)
            return ad.add(_weighted(mu, wr.derive("mu")), _weighted(sigma, wr.derive("sig")))
        return build, [z]

    def instance_norm_case(r):
        z = ad.parameter(r.normal((2, 3, 4, 4)))
        wr = r.derive("w")
        def build():
            return _weighted(ad.instance_norm(z), wr)
        return build, [z]

    def adain_case(r):
        z = ad.parameter(r.normal((2, 3, 4, 4)))
        noise = ad.parameter(r.normal((2, 5)))
        fc_s = nets.kaiming_dense(r.derive("s"), 5, 3)
        fc_t = nets.kaiming_dense(r.derive("t"), 5, 3)
        wr = r.derive("w")
        def build():
            return _weighted(nets.adain(z, noise, fc_s, fc_t), wr)
        return build, [z, noise, fc_s.w, fc_s.b, fc_t.w, fc_t.b]

    def reductions_case(r):
        a = ad.parameter(r.normal((3, 4)))
        b = ad.parameter(r.normal((2, 3, 2, 2)))
        wr = r.derive("w")
        def build():
            return ad.add(
                ad.add(ad.tsum(a), ad.tmean(b)),
                ad.add(_weighted(ad.sum_axes(b, (1, 3)), wr.derive("sa")),
                       _weighted(ad.mean_axes(b, (0,)), wr.derive("ma"))))
        return build, [a, b]

    def shapes_case(r):
        a = ad.parameter(r.normal((2, 6)))
        b = ad.parameter(r.normal((3, 2)))
        wr = r.derive("w")
        def build():
            return ad.add(
                _weighted(ad.reshape(a, (3, 4)), wr.derive("rs")),
                ad.add(_weighted(ad.transpose2d(b), wr.derive("tp")),
                       _weighted(ad.concat([a, ad.transpose2d(ad.reshape(a, (6, 2)))], axis=0),
                                 wr.derive("cc"))))
        return build, [a, b]

    def gather_case(r):
        a = ad.parameter(r.normal((5, 4)))
        idx = r.integers(0, 4, (5,))
        wr = r.derive("w")
        def build():
            return _weighted(ad.gather_rows(a, idx), wr)
        return build, [a]

    def pool_expand_case(r):
        x = ad.parameter(r.normal((2, 3, 4, 4)))
        a = ad.parameter(r.normal((2, 3)))
        wr = r.derive("w")
        def build():
            return ad.add(
                ad.add(_weighted(ad.global_avg_pool(x), wr.derive("gap")),
                       _weighted(ad.expand_spatial(a, 3, 5), wr.derive("ex"))),
                _weighted(ad.upsample2x(x), wr.derive("up")))
        return build, [x, a]

    def bias_case(r):
        x2 = ad.parameter(r.normal((3, 4)))
        b2 = ad.parameter(r.normal((4,)))
        x4 = ad.parameter(r.normal((2, 3, 2, 2)))
        b4 = ad.parameter(r.normal((3,)))
        wr = r.derive("w")
        def build():
            return ad.add(_weighted(ad.add_row_bias(x2, b2), wr.derive("r")),
                          _weighted(ad.add_channel_bias(x4, b4), wr.derive("c")))
        return build, [x2, b2, x4, b4]

    def sqrt_case(r):
        a = ad.parameter(np.abs(r.normal((3, 4))) + 0.5)
        wr = r.derive("w")
        def build():
            return _weighted(ad.tsqrt(a), wr)
        return build, [a]

    def log_case(r):
        a = ad.parameter(np.abs(r.normal((3, 4))) + 0.5)
        wr = r.derive("w")
        def build():
            return _weighted(ad.log(a), wr)
        return build, [a]

    def relu_case(r):
        # keep coordinates away from the kink at 0
        vals = r.normal((3, 4))
        vals = np.where(np.abs(vals) < 0.2, vals + np.sign(vals + 1e-9) * 0.5, vals)
        a = ad.parameter(vals)
        wr = r.derive("w")
        def build():
            return _weighted(ad.relu(a), wr)
        return build, [a]

    return [
        ("add", binary(ad.add)),
        ("sub", binary(ad.sub)),
        ("mul", binary(ad.mul)),
        ("div", binary(ad.div)),
        ("neg", unary(ad.neg)),
        ("exp", unary(ad.exp)),
        ("log", log_case),
        ("sqrt", sqrt_case),
        ("relu", relu_case),
        ("tanh", unary(ad.tanh)),
        ("sigmoid", unary(ad.sigmoid)),
        ("clamp_min", clamp_case("min")),
        ("clamp_max", clamp_case("max")),
        ("matmul", matmul_case),
        ("conv2d_s1p0", conv_case(1, 0)),
        ("conv2d_s2p1", conv_case(2, 1)),
        ("softmax", softmax_case),
        ("l2_normalize", l2norm_case),
        ("instance_stats", instance_stats_case),
        ("instance_norm", instance_norm_case),
        ("adain", adain_case),
        ("sum_mean_axes", reductions_case),
        ("reshape_transpose_concat", shapes_case),
        ("gather_rows", gather_case),
        ("pool_expand_upsample", pool_expand_case),
        ("row_channel_bias", bias_case),
    ]


def check_ops(n_instances: int = 20, h: float = 1e-5, rel_tol: float = 1e-4,
              seed: int = 2024) -> list[CheckResult]:
    """Exhaustive-coordinate FD checks for every elementary op."""
    root = Rng(seed)
    results = []
    for name, make in _op_cases(root):
        worst = 0.0
        coords = 0
        for k in range(n_instances):
            build, params = make(root.derive("op", name, k))
            w, c = finite_diff_check(build, params, h=h, rel_tol=rel_tol)
            worst = max(worst, w)
            coords += c
        results.append(CheckResult(name, worst, n_instances, coords, worst < rel_tol))
    return results


# -- loss checks on a tiny architecture ------------------------------------------------


_TINY = nets.ArchConfig(in_channels=1, num_classes=3, feat_channels=(4, 5, 6),
                        clf_hidden=8, embed_dim=4, noise_dim=3, gen_channels=(4, 5))


def _tiny_setup(seed: int):
    r = Rng(seed)
    model = nets.init_task_model(_TINY, r.derive("m"))
    gen = nets.init_generator(_TINY, r.derive("g"))
    cyc = nets.init_cycle_generator(_TINY, r.derive("c"))
    x = ad.constant(r.derive("x").uniform((2, 1, 8, 8)))
    x_plus = ad.constant(r.derive("xp").uniform((2, 1, 8, 8)))
    y = np.array([0, 1])
    batch = losses.PairedBatch(x=x, y=y, x_plus=x_plus)
    return model, gen, cyc, batch


def check_losses(n_instances: int = 3, probes: int = 40, h: float = 1e-5,
                 rel_tol: float = 1e-4, seed: int = 515) -> list[CheckResult]:
    """FD checks for every loss; adversarial terms are checked per player."""
    wts = losses.LossWeights(w_cyc=5.0, w_adv=0.1, w_div=0.1)
    cases = []

    def ce_nce(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            return losses.loss_src(batch, model)[0]
        return build, model.parameters()

    def ce_only(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            out = nets.forward_task(model, batch.x)
            return losses.cross_entropy(out.yhat, batch.y)
        return build, model.parameters()

    def nce_only(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            x_all = ad.concat([batch.x, batch.x_plus], axis=0)
            return losses.info_nce(nets.forward_task(model, x_all).z)
        return build, model.parameters()

    def nce_complement(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            x_all = ad.concat([batch.x, batch.x_plus], axis=0)
            return losses.info_nce_complement(nets.forward_task(model, x_all).z)
        return build, model.parameters()

    def cls_term(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            return losses.loss_cls(batch, model, gen, Rng(91))
        return build, gen.parameters() + model.parameters()

    def cyc_term(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            return losses.loss_cyc(batch.x, gen, cyc, Rng(92))
        return build, gen.parameters() + cyc.parameters()

    def adv_generator_player(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            return losses.loss_adv(batch, model, gen, Rng(93))[0]
        return build, gen.parameters()

    def adv_task_player(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            return losses.loss_adv(batch, model, gen, Rng(93))[1]
        return build, model.parameters()

    def adv_reference_generator(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            return losses.loss_adv_reference(batch, model, gen, Rng(94))[0]
        return build, gen.parameters()

    def div_term(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            return losses.loss_div(batch.x, gen, Rng(95), clamp=1.0)
        return build, gen.parameters()

    def unseen_generator_player(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            l_cls = losses.loss_cls(batch, model, gen, Rng(96))
            l_cyc = losses.loss_cyc(batch.x, gen, cyc, Rng(97))
            gen_t, _ = losses.loss_adv(batch, model, gen, Rng(98))
            l_div = losses.loss_div(batch.x, gen, Rng(99), clamp=1.0)
            return ad.add(ad.add(l_cls, ad.mul(l_cyc, wts.w_cyc)),
                          ad.add(ad.mul(gen_t, wts.w_adv), ad.mul(l_div, wts.w_div)))
        return build, gen.parameters() + cyc.parameters()

    def unseen_task_player(inst):
        model, gen, cyc, batch = _tiny_setup(seed + inst)
        def build():
            l_cls = losses.loss_cls(batch, model, gen, Rng(96))
            _, task_t = losses.loss_adv(batch, model, gen, Rng(98))
            return ad.add(l_cls, ad.mul(task_t, wts.w_adv))
        return build, model.parameters()

    cases = [
        ("cross_entropy", ce_only),
        ("info_nce", nce_only),
        ("info_nce_complement", nce_complement),
        ("loss_src", ce_nce),
        ("loss_cls", cls_term),
        ("loss_cyc", cyc_term),
        ("loss_adv[generator_player]", adv_generator_player),
        ("loss_adv[task_player]", adv_task_player),
        ("loss_adv_reference[generator]", adv_reference_generator),
        ("loss_div", div_term),
        ("loss_unseen[generator_player]", unseen_generator_player),
        ("loss_unseen[task_player]", unseen_task_player),
    ]

    results = []
    probe_rng = Rng(seed).derive("probes")
    for name, make in cases:
        worst = 0.0
        coords = 0
        for k in range(n_instances):
            build, params = make(k)
            w, c = finite_diff_check(build, params, h=h, rel_tol=rel_tol,
                                     probes=probes, probe_rng=probe_rng.derive(name, k))
            worst = max(worst, w)
            coords += c
        results.append(CheckResult(name, worst, n_instances, coords, worst < rel_tol))
    results.append(_stop_gradient_check())
    return results


def _stop_gradient_check() -> CheckResult:
    """Exact-zero gradients across the adversarial stop-gradient boundary."""
    model, gen, cyc, batch = _tiny_setup(8080)
    every = model.parameters() + gen.parameters()
    for p in every:
        p.grad = None
    gen_t, task_t = losses.loss_adv(batch, model, gen, Rng(7))
    gen_t.backward()
    task_leak = any(p.grad is not None and np.any(p.grad) for p in model.parameters())
    for p in every:
        p.grad = None
    task_t.backward()
    gen_leak = any(p.grad is not None and np.any(p.grad) for p in gen.parameters())
    ok = not task_leak and not gen_leak
    note = "generator/task blocks exactly zero" if ok else \
        f"LEAK: task={task_leak} gen={gen_leak}"
    return CheckResult("loss_adv[stop_gradient]", 0.0, 1, len(every), ok, note)


# -- optimizer closed-form checks -------------------------------------------------------


def check_optimizers(seed: int = 99) -> list[CheckResult]:
    r = Rng(seed)
    results = []

    p = ad.parameter(r.normal((4, 3)))
    before = p.data.copy()
    g = r.normal((4, 3))
    p.grad = g.copy()
    SGD([p], lr=0.05).step()
    err = float(np.abs(p.data - (before - 0.05 * g)).max())
    results.append(CheckResult("sgd_step", err, 1, p.size, err < 1e-15,
                               f"max |p - (p0 - lr*g)| = {err:.3e}"))

    p2 = ad.parameter(r.normal((4, 3)))
    before2 = p2.data.copy()
    g2 = r.normal((4, 3)) * 10.0  # |g| >> eps so the eps term is negligible
    p2.grad = g2.copy()
    Adam([p2], lr=0.01).step()
    # first step from zero state moves by lr * sign(g) up to the eps term
    step = p2.data - before2
    err2 = float(np.abs(step + 0.01 * np.sign(g2)).max())
    results.append(CheckResult("adam_step", err2, 1, p2.size, err2 < 1e-5,
                               f"first-step update within {err2:.2e} of -lr*sign(g)"))
    return results


def run_all(op_instances: int = 20, loss_instances: int = 3,
            loss_probes: int = 40) -> list[CheckResult]:
    """Full verification suite: ops, losses, optimizers."""
    results = check_ops(n_instances=op_instances)
    results.append(CheckResult(
        "backward_engine", 0.0, 0, 0, True,
        "exercised by every FD comparison above"))
    results += check_losses(n_instances=loss_instances, probes=loss_probes)
    results += check_optimizers()
    return results


def report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
