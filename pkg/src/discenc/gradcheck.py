"""Finite-difference verification of every analytic gradient in the package.

Central differences with h=1e-6 in float64; each check reports its worst
relative error against a 1e-4 tolerance.  Dropout checks re-seed the mask
stream per forward call so the objective stays deterministic under
perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from discenc import nn
from discenc.core import (
    BatchEncodings,
    UniformCategorical,
    confusion_loss,
    encoder_loss_categorical,
    encoder_loss_gaussian,
    supervised_loss,
)
from discenc.regularize import feature_matching_loss, generator_loss_class_conditioned

H = 1e-6
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float

    @property
    def passed(self):
        return self.max_rel_err < TOL


def _rel_err(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _numeric_grad(f, x):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + H
        hi = f(x)
        x[idx] = old - H
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2.0 * H)
    return g


def _check_network_params(net, x, c, rng_seed=None):
    """Compare backward() parameter grads against FD of sum(c * head_out)."""

    def objective():
        rng = np.random.default_rng(rng_seed) if rng_seed is not None else None
        out, _ = net.forward(x, training=True, rng=rng)
        return float((c * out).sum())

    objective()
    grads, _ = net.backward(c)
    worst = 0.0
    for gi, p in enumerate(net.parameters()):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + H
            hi = objective()
            p[idx] = old - H
            lo = objective()
            p[idx] = old
            fd = (hi - lo) / (2.0 * H)
            worst = max(worst, _rel_err(grads[gi][idx], fd))
    return worst


def run_gradient_checks(seed: int = 0) -> list:
    """The full suite; returns one CheckResult per gradient family."""
    rng = np.random.default_rng(seed)
    results = []

    # Layer stacks (gaussian head = identity, so an FD on the head input
    # exercises every dense/activation backward rule).
    archs = [
        ("dense_tanh", nn.feedforward(4, [7], 3, head="gaussian", activation="tanh")),
        ("dense_relu_sigmoid", nn.feedforward(5, [9, 6], 2, head="gaussian",
                                              activation="relu", output_activation="sigmoid")),
        ("dense_leaky", nn.feedforward(3, [8], 4, head="gaussian", activation="leaky_relu")),
    ]
    for name, net in archs:
        nn.init_params(net, rng.integers(1 << 30))
        x = rng.normal(size=(6, net.in_dim))
        c = rng.normal(size=(6, net.out_dim))
        results.append(CheckResult(f"network/{name}", _check_network_params(net, x, c)))

    drop = nn.feedforward(4, [10], 3, head="gaussian", activation="tanh", dropout=0.3)
    nn.init_params(drop, rng.integers(1 << 30))
    x = rng.normal(size=(5, 4))
    c = rng.normal(size=(5, 3))
    results.append(CheckResult("network/dropout_fixed_mask",
                               _check_network_params(drop, x, c, rng_seed=int(seed) + 17)))

    # Loss gradients w.r.t. head inputs (softmax chain fused in each loss).
    logits = rng.normal(size=(8, 5))
    assigns = rng.integers(0, 5, size=8)
    _, g = encoder_loss_categorical(BatchEncodings.from_logits(logits), assigns)
    fd = _numeric_grad(
        lambda l: encoder_loss_categorical(BatchEncodings.from_logits(l), assigns)[0], logits)
    results.append(CheckResult("loss/joint_categorical", _rel_err(g, fd)))

    means = rng.normal(size=(7, 3))
    targets = rng.normal(size=(7, 3))
    lam = 0.7
    _, g = encoder_loss_gaussian(means, targets, lam)
    fd = _numeric_grad(lambda m: encoder_loss_gaussian(m, targets, lam)[0], means)
    results.append(CheckResult("loss/joint_gaussian", _rel_err(g, fd)))

    prior = UniformCategorical(5)
    _, g = confusion_loss(BatchEncodings.from_logits(logits), prior)
    fd = _numeric_grad(lambda l: confusion_loss(BatchEncodings.from_logits(l), prior)[0], logits)
    results.append(CheckResult("loss/confusion", _rel_err(g, fd)))

    labels = rng.integers(0, 5, size=8)
    _, g = supervised_loss(BatchEncodings.from_logits(logits), labels)
    fd = _numeric_grad(lambda l: supervised_loss(BatchEncodings.from_logits(l), labels)[0], logits)
    results.append(CheckResult("loss/supervised", _rel_err(g, fd)))

    _, g = generator_loss_class_conditioned(BatchEncodings.from_logits(logits), labels)
    fd = _numeric_grad(
        lambda l: generator_loss_class_conditioned(BatchEncodings.from_logits(l), labels)[0],
        logits)
    results.append(CheckResult("loss/generator_class_conditioned", _rel_err(g, fd)))

    real = rng.normal(size=(6, 4))
    fake = rng.normal(size=(5, 4))
    _, g = feature_matching_loss(real, fake)
    fd = _numeric_grad(lambda f: feature_matching_loss(real, f)[0], fake)
    results.append(CheckResult("loss/feature_matching", _rel_err(g, fd)))

    # End to end: confusion loss through encoder into generator parameters.
    enc = nn.feedforward(6, [8], 4, head="softmax", activation="tanh")
    gen = nn.feedforward(3, [7], 6, head="gaussian", activation="tanh",
                         output_activation="sigmoid")
    nn.init_params(enc, rng.integers(1 << 30))
    nn.init_params(gen, rng.integers(1 << 30))
    noise = rng.normal(size=(5, 3))

    def gen_objective():
        fakes, _ = gen.forward(noise, training=True)
        _, penult = enc.forward(fakes, training=True)
        return confusion_loss(BatchEncodings.from_logits(penult), UniformCategorical(4))[0]

    gen_objective()
    fakes, _ = gen.forward(noise, training=True)
    _, penult = enc.forward(fakes, training=True)
    _, gl = confusion_loss(BatchEncodings.from_logits(penult), UniformCategorical(4))
    _, g_in = enc.backward(gl)
    gen_grads, _ = gen.backward(g_in)
    worst = 0.0
    for gi, p in enumerate(gen.parameters()):
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + H
            hi = gen_objective()
            p[idx] = old - H
            lo = gen_objective()
            p[idx] = old
            worst = max(worst, _rel_err(gen_grads[gi][idx], (hi - lo) / (2.0 * H)))
    results.append(CheckResult("chain/generator_through_encoder", worst))
    return results


def report(seed: int = 0, log=print) -> bool:
    """Print one pass/fail line per check; True when everything passes."""
    results = run_gradient_checks(seed)
    ok = True
    for r in results:
        log(f"{'PASS' if r.passed else 'FAIL'}  {r.name:40s} max rel err {r.max_rel_err:.3e}")
        ok = ok and r.passed
    return ok
