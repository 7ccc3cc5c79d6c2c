"""Finite-difference verification of every hand-written gradient."""

from __future__ import annotations

import time
from typing import Callable, NamedTuple

import numpy as np

from . import concept
from . import model as mdl
from . import numerics as nx
from .train import TrainConfig, total_loss

DEFAULT_TOL = 1e-4


class CheckResult(NamedTuple):
    name: str
    max_error: float
    points: int
    passed: bool


def _fd_error(f: Callable[[dict], float], inputs: dict[str, np.ndarray], analytic: dict[str, np.ndarray], h: float) -> float:
    """Max relative error over every input array of ``f``."""
    worst = 0.0
    for name in analytic:
        def partial(v, name=name):
            return f({**inputs, name: v})

        worst = max(worst, nx.finite_diff_check(partial, inputs[name], analytic[name], h))
    return worst


def _untied(rng, shape, k, gap=1e-3):
    """Random values whose pooling windows have a clear maximum."""
    while True:
        x = rng.normal(size=shape)
        w = np.sort(np.lib.stride_tricks.sliding_window_view(x, k, axis=-1)[..., ::k, :], axis=-1)
        if np.all(w[..., -1] - w[..., -2] > gap):
            return x


def check_conv(rng, h):
    x, k = rng.normal(size=(2, 2, 1, 10)), rng.normal(size=(3, 2, 1, 3))
    R = rng.normal(size=(2, 3, 1, 8))
    gx, gk = nx.conv2d_backward(R, x, k)
    return _fd_error(lambda a: float(np.sum(nx.conv2d_forward(a["x"], a["k"]) * R)), {"x": x, "k": k}, {"x": gx, "k": gk}, h)


def check_pool(rng, h):
    x = _untied(rng, (2, 3, 1, 8), 2)
    out, idx = nx.maxpool2d(x)
    R = rng.normal(size=out.shape)
    gx = nx.maxpool2d_backward(R, idx, 8)
    return _fd_error(lambda a: float(np.sum(nx.maxpool2d(a["x"])[0] * R)), {"x": x}, {"x": gx}, h)


def _check_bn(rng, h, mode):
    x = rng.normal(size=(3, 2, 1, 5)) * 2 + 0.5
    g, b = rng.normal(size=2), rng.normal(size=2)
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2.0, size=2)
    out, cache, _ = nx.batchnorm_forward(x, g, b, rm, rv, mode)
    R = rng.normal(size=out.shape)
    gx, gg, gb = nx.batchnorm_backward(R, cache)

    def f(a):
        return float(np.sum(nx.batchnorm_forward(a["x"], a["g"], a["b"], rm, rv, mode)[0] * R))

    return _fd_error(f, {"x": x, "g": g, "b": b}, {"x": gx, "g": gg, "b": gb}, h)


def check_bn_train(rng, h):
    return _check_bn(rng, h, "train")


def check_bn_eval(rng, h):
    return _check_bn(rng, h, "eval")


def check_relu(rng, h):
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5
    R = rng.normal(size=x.shape)
    return _fd_error(lambda a: float(np.sum(nx.relu_forward(a["x"]) * R)), {"x": x}, {"x": nx.relu_backward(R, x)}, h)


def check_linear(rng, h):
    z, W = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
    R = rng.normal(size=(4, 3))
    gz, gW = nx.linear_backward(R, z, W)
    return _fd_error(lambda a: float(np.sum(nx.linear_forward(a["z"], a["W"]) * R)), {"z": z, "W": W}, {"z": gz, "W": gW}, h)


def check_softmax_ce(rng, h):
    logits = rng.normal(size=(5, 3)) * 2
    y = rng.integers(0, 3, size=5)
    _, g = nx.softmax_cross_entropy(logits, y)
    return _fd_error(lambda a: nx.softmax_cross_entropy(a["o"], y)[0], {"o": logits}, {"o": g}, h)


def _random_bank(rng, c, shape, partial=True):
    bank = concept.MeanBank(rng.normal(size=(c, *shape)), np.ones(c, dtype=bool), 0.9)
    if partial:
        bank.initialized[rng.integers(0, c)] = False
    return bank


def check_cms(rng, h):
    z, W = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    y = rng.integers(0, 2, size=4)
    bank = _random_bank(rng, 2, (3, 2), partial=rng.random() < 0.3)
    r = concept.cms_loss(z, W, y, bank)
    f = lambda a: concept.cms_loss(a["z"], a["W"], y, bank).loss  # noqa: E731
    return _fd_error(f, {"z": z, "W": W}, {"z": r.grad_z, "W": r.grad_W}, h)


def check_feature_loss(rng, h):
    z, y = rng.normal(size=(5, 4)), rng.integers(0, 3, size=5)
    bank = _random_bank(rng, 3, (4,))
    r = concept.feature_invariance_loss(z, y, bank)
    return _fd_error(lambda a: concept.feature_invariance_loss(a["z"], y, bank).loss, {"z": z}, {"z": r.grad_z}, h)


def check_logit_loss(rng, h):
    o, y = rng.normal(size=(5, 3)), rng.integers(0, 3, size=5)
    bank = _random_bank(rng, 3, (3,))
    r = concept.logit_invariance_loss(o, y, bank)
    return _fd_error(lambda a: concept.logit_invariance_loss(a["o"], y, bank).loss, {"o": o}, {"o": r.grad_o}, h)


def check_layer_stack(rng, h):
    """conv -> pool -> batchnorm -> linear -> cross-entropy, assembled by hand."""
    x = rng.normal(size=(3, 2, 1, 9))
    k = rng.normal(size=(2, 2, 1, 2)) * 0.5
    g, b = rng.uniform(0.5, 1.5, size=2), rng.normal(size=2)
    W = rng.normal(size=(8, 3)) * 0.5
    y = rng.integers(0, 3, size=3)
    rm, rv = np.zeros(2), np.ones(2)

    def run(a):
        c = nx.conv2d_forward(a["x"], a["k"])
        p, idx = nx.maxpool2d(c)
        n, bnc, _ = nx.batchnorm_forward(p, a["g"], a["b"], rm, rv, "train")
        z = n.reshape(3, -1)
        loss, go = nx.softmax_cross_entropy(nx.linear_forward(z, a["W"]), y)
        return loss, (c, p, idx, bnc, z, go)

    inputs = {"x": x, "k": k, "g": g, "b": b, "W": W}
    _, (c, p, idx, bnc, z, go) = run(inputs)
    gz, gW = nx.linear_backward(go, z, W)
    gn, gg, gb = nx.batchnorm_backward(gz.reshape(p.shape), bnc)
    gc = nx.maxpool2d_backward(gn, idx, c.shape[3])
    gx, gk = nx.conv2d_backward(gc, x, k)
    return _fd_error(lambda a: run(a)[0], inputs, {"x": gx, "k": gk, "g": gg, "b": gb, "W": gW}, h)


TINY_MODEL = mdl.ModelConfig(in_channels=2, window_len=16, kernel_len=3, num_classes=3, channels_block1=3, channels_block2=4)


def _total_loss_check(rng, h, kind: concept.RegularizerKind, alpha: float = 1.0):
    params = mdl.build_model(TINY_MODEL, int(rng.integers(0, 2**31)))
    params.params = {k: v + rng.normal(scale=0.1, size=v.shape) for k, v in params.params.items()}
    x = rng.normal(size=(6, 2, 1, 16))
    y = np.array([0, 1, 2, 0, 1, 2])
    cfg = TrainConfig(alpha=alpha, regularizer=kind)
    bank = None
    if kind is not concept.RegularizerKind.NONE:
        shape = concept.bank_shape(kind, TINY_MODEL.feature_dim, 3)
        bank = _random_bank(rng, 3, shape)
        bank.means *= 0.3
    res = total_loss(params, x, y, bank, cfg)

    def f(a):
        p = params.copy()
        p.params = a
        return total_loss(p, x, y, bank, cfg).loss

    return _fd_error(f, dict(params.params), res.grads, h)


def check_total_cms(rng, h):
    return _total_loss_check(rng, h, concept.RegularizerKind.CONCEPT_MATRIX)


def check_total_feature(rng, h):
    return _total_loss_check(rng, h, concept.RegularizerKind.FEATURE)


def check_total_logit(rng, h):
    return _total_loss_check(rng, h, concept.RegularizerKind.LOGIT)


def check_total_erm(rng, h):
    return _total_loss_check(rng, h, concept.RegularizerKind.NONE, alpha=0.0)


CHECKS: dict[str, Callable] = {
    "conv2d": check_conv,
    "maxpool2d": check_pool,
    "batchnorm_train": check_bn_train,
    "batchnorm_eval": check_bn_eval,
    "relu": check_relu,
    "linear": check_linear,
    "softmax_cross_entropy": check_softmax_ce,
    "cms_loss": check_cms,
    "feature_invariance_loss": check_feature_loss,
    "logit_invariance_loss": check_logit_loss,
    "layer_stack": check_layer_stack,
    "total_loss_cms": check_total_cms,
    "total_loss_feature": check_total_feature,
    "total_loss_logit": check_total_logit,
    "total_loss_erm": check_total_erm,
}


def run_gradient_suite(points: int = 20, seed: int = 0, h: float = 1e-5, tol: float = DEFAULT_TOL,
                       names: list[str] | None = None) -> list[CheckResult]:  # fmt: skip
    results = []
    for i, name in enumerate(names or CHECKS):
        rng = np.random.default_rng([seed, i])
        worst = max(CHECKS[name](rng, h) for _ in range(points))
        results.append(CheckResult(name, worst, points, worst < tol))
    return results


def format_results(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} max_rel_err={r.max_error:.3e}  points={r.points}" for r in results]
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f}s")
    return "\n".join(lines)


def main(points: int = 20, seed: int = 0) -> int:
    t0 = time.perf_counter()
    results = run_gradient_suite(points, seed)
    print(format_results(results, time.perf_counter() - t0))
    return 0 if all(r.passed for r in results) else 1
