"""Finite-difference suites for every layer type and the composed networks.

Each suite returns its worst relative error; ``run_all`` is what the
``gradcheck`` CLI command and the acceptance tests execute.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .imaging import make_bands
from .model import build_simple_convnet, build_streaming_net, forward, init_state

TOLERANCE = 1e-4
EPSILON = 1e-5


@dataclass(frozen=True)
class SuiteResult:
    name: str
    max_rel_error: float
    seconds: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _away_from_zero(rng, shape, low=0.05):
    """Random values with |v| >= low so no ReLU sits on its kink."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _projected(out: T.Tensor, proj: np.ndarray) -> T.Tensor:
    return T.mul(out, proj).sum()


def _check_all(loss_fn: Callable[[], T.Tensor], leaves, epsilon, indices=None) -> float:
    return max(T.finite_difference_check(loss_fn, p, epsilon, indices(p) if indices else None) for p in leaves)


def conv2d_suite(rng, epsilon=EPSILON, padding="same") -> float:
    x = T.Tensor(rng.normal(size=(2, 3, 6, 7)), requires_grad=True)
    k = T.Tensor(rng.normal(size=(4, 3, 3, 2)), requires_grad=True)
    b = T.Tensor(rng.normal(size=4), requires_grad=True)
    out_shape = T.conv2d(x, k, b, padding).shape
    proj = rng.normal(size=out_shape)
    return _check_all(lambda: _projected(T.conv2d(x, k, b, padding), proj), [x, k, b], epsilon)


def maxpool_suite(rng, epsilon=EPSILON) -> float:
    # distinct values spaced far beyond epsilon, so no window has a near-tie
    x = T.Tensor(rng.permutation(2 * 3 * 5 * 5).reshape(2, 3, 5, 5) * 0.01, requires_grad=True)
    proj = rng.normal(size=T.maxpool2x2(x).shape)
    return _check_all(lambda: _projected(T.maxpool2x2(x), proj), [x], epsilon)


def relu_suite(rng, epsilon=EPSILON) -> float:
    x = T.Tensor(_away_from_zero(rng, (3, 7)), requires_grad=True)
    proj = rng.normal(size=(3, 7))
    return _check_all(lambda: _projected(T.relu(x), proj), [x], epsilon)


def dense_suite(rng, epsilon=EPSILON) -> float:
    x = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    b = T.Tensor(rng.normal(size=3), requires_grad=True)
    proj = rng.normal(size=(4, 3))
    return _check_all(lambda: _projected(T.dense(x, w, b), proj), [x, w, b], epsilon)


def softmax_ce_suite(rng, epsilon=EPSILON) -> float:
    logits = T.Tensor(rng.normal(size=(5, 4)) * 2, requires_grad=True)
    labels = rng.integers(0, 4, size=5)
    return _check_all(lambda: T.softmax_cross_entropy(logits, labels)[0], [logits], epsilon)


def _kink_aware(loss_fn, param: T.Tensor, rng, want: int, epsilon: float) -> tuple[float, int]:
    """Central-difference check at ``want`` random coordinates of ``param``.

    A coordinate whose forward and backward one-sided slopes disagree has a
    ReLU or max-pool switch inside [x - eps, x + eps]; the loss is not
    differentiable there, so it is skipped and another one drawn. A wrong
    backward rule still shows up: it disagrees with both slopes.
    Coordinates where both gradients are zero (dead units) say nothing and
    do not count towards ``want``; at most ``20 * want`` coordinates are tried.
    Returns (worst relative error, coordinates skipped).
    """
    param.grad = None
    loss_fn().backward()
    analytic = param.grad.copy()
    worst, skipped, checked = 0.0, 0, 0
    with T.no_grad():
        f0 = loss_fn().item()
        for attempt, flat in enumerate(rng.permutation(param.size)):
            if checked == want or attempt == 20 * want:
                break
            idx = np.unravel_index(flat, param.shape)
            orig = param.data[idx]
            param.data[idx] = orig + epsilon
            f_plus = loss_fn().item()
            param.data[idx] = orig - epsilon
            f_minus = loss_fn().item()
            param.data[idx] = orig
            fwd, bwd = (f_plus - f0) / epsilon, (f0 - f_minus) / epsilon
            if abs(fwd - bwd) > 2e-5 * max(abs(fwd), abs(bwd)) + 1e-8:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * epsilon)
            if analytic[idx] == 0.0 and abs(numeric) < 1e-12:
                continue
            worst = max(worst, float(T.relative_error(analytic[idx], numeric)))
            checked += 1
    return worst, skipped


def network_suite(spec, rng, epsilon=EPSILON, batch=2, per_tensor=12, seed=0) -> tuple[float, int]:
    """Cross-entropy of a full model on a small random batch.

    Every parameter tensor is checked at ``per_tensor`` random coordinates
    (all of them for small tensors). Biases are drawn small and nonzero:
    sliced inputs are mostly exact zeros, and with zero biases those units
    sit on the ReLU kink where a central difference is meaningless. The
    zero-initialized logit layer is redrawn too, otherwise every gradient
    below it is exactly zero and the check proves nothing.
    """
    state = init_state(spec, seed)
    for key, value in state.items():
        if key.endswith("bias"):
            state[key] = rng.uniform(-0.1, 0.1, size=value.shape)
        elif key.startswith("head."):
            state[key] = rng.uniform(-1.0, 1.0, size=value.shape) / np.sqrt(value.shape[0])
    params = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in state.items()}
    x = rng.uniform(0.0, 1.0, size=(batch, *spec.input_shape))
    labels = rng.integers(0, spec.num_classes, size=batch)

    def loss_fn():
        return T.softmax_cross_entropy(forward(spec, params, x, n_threads=1), labels)[0]

    worst, skipped = 0.0, 0
    for p in params.values():
        err, skip = _kink_aware(loss_fn, p, rng, min(per_tensor, p.size), epsilon)
        worst, skipped = max(worst, err), skipped + skip
    return worst, skipped


def run_all(seed: int = 0, epsilon: float = EPSILON) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    suites: list[tuple[str, Callable[[], float]]] = [
        ("conv2d_same", lambda: conv2d_suite(rng, epsilon, "same")),
        ("conv2d_valid", lambda: conv2d_suite(rng, epsilon, "valid")),
        ("maxpool2x2", lambda: maxpool_suite(rng, epsilon)),
        ("relu", lambda: relu_suite(rng, epsilon)),
        ("dense", lambda: dense_suite(rng, epsilon)),
        ("softmax_cross_entropy", lambda: softmax_ce_suite(rng, epsilon)),
        ("simple_convnet", lambda: network_suite(build_simple_convnet((3, 32, 32), 4), rng, epsilon)),
        ("streaming_net_2", lambda: network_suite(
            build_streaming_net((3, 32, 32), 3, make_bands(2), hidden_dense=(5,)), rng, epsilon, per_tensor=6)),
    ]
    results = []
    for name, fn in suites:
        start = time.perf_counter()
        out = fn()
        err, skipped = out if isinstance(out, tuple) else (out, 0)
        results.append(SuiteResult(name, err, time.perf_counter() - start, skipped))
    return results
