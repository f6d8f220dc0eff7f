"""Finite-difference battery for every differentiable operator.

Each case builds a small random problem (inputs in [-1, 1]) for one seed
and returns the max relative error between the taped gradient and central
differences at step 1e-5, 64-bit. Kink-prone inputs (sampling coordinates,
L1 differences) are nudged away from their non-smooth sets.
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from .autodiff import Tensor, check_gradients, ops

FD_STEP = 1e-5
TOLERANCE = 1e-4


def _proj_loss(out, rng):
    p = Tensor(rng.uniform(-1, 1, out.shape))
    return ops.sum_(ops.mul(out, p))


def _safe_coords(rng, H, W, shape):
    """Coordinates at least 0.1 from every integer grid line and the border."""
    cx = rng.integers(0, W - 1, shape) + rng.uniform(0.1, 0.9, shape)
    cy = rng.integers(0, H - 1, shape) + rng.uniform(0.1, 0.9, shape)
    return np.stack([cx, cy])


def _case_add(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4))
    return check_gradients(lambda ts: _proj_loss(ops.add(ts[0], ts[1]), np.random.default_rng(seed + 1)), [a, b], FD_STEP)


def _case_mul(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4,))
    return check_gradients(lambda ts: _proj_loss(ops.mul(ts[0], ts[1]), np.random.default_rng(seed + 1)), [a, b], FD_STEP)


def _case_div(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (3, 4))
    b = rng.uniform(0.5, 1.0, (3, 4)) * np.where(rng.uniform(size=(3, 4)) < 0.5, -1, 1)
    return check_gradients(lambda ts: _proj_loss(ops.div(ts[0], ts[1]), np.random.default_rng(seed + 1)), [a, b], FD_STEP)


def _case_exp_log_sqrt(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.2, 1.0, (3, 4))

    def build(ts):
        out = ops.add(ops.exp(ts[0]), ops.add(ops.log(ts[0]), ops.sqrt(ts[0])))
        return _proj_loss(out, np.random.default_rng(seed + 1))

    return check_gradients(build, [a], FD_STEP)


def _case_tanh(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (5, 3))
    return check_gradients(lambda ts: _proj_loss(ops.tanh(ts[0]), np.random.default_rng(seed + 1)), [a], FD_STEP)


def _case_leaky_relu(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (5, 3))
    a[np.abs(a) < 1e-3] = 0.1
    return check_gradients(lambda ts: _proj_loss(ops.leaky_relu(ts[0]), np.random.default_rng(seed + 1)), [a], FD_STEP)


def _case_abs(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (5, 3))
    a[np.abs(a) < 1e-3] = 0.2
    return check_gradients(lambda ts: _proj_loss(ops.abs_(ts[0]), np.random.default_rng(seed + 1)), [a], FD_STEP)


def _case_reductions(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (4, 5))

    def build(ts):
        out = ops.add(ops.sum_(ops.mean(ts[0], axis=0)), ops.sum_(ops.reduce_max(ts[0], axis=1)))
        out = ops.add(out, ops.sum_(ops.reduce_min(ts[0], axis=0)))
        return ops.add(out, ops.mul(ops.sum_(ts[0]), 0.25))

    return check_gradients(build, [a], FD_STEP)


def _case_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (3, 5))
    return check_gradients(lambda ts: _proj_loss(ops.matmul(ts[0], ts[1]), np.random.default_rng(seed + 1)), [a, b], FD_STEP)


def _case_conv2d(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 6, 6))
    w = rng.uniform(-1, 1, (3, 2, 3, 3))
    return check_gradients(
        lambda ts: _proj_loss(ops.conv2d(ts[0], ts[1], stride=1, padding=1), np.random.default_rng(seed + 1)),
        [x, w],
        FD_STEP,
    )


def _case_conv2d_strided(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 7, 7))
    w = rng.uniform(-1, 1, (2, 2, 3, 3))
    return check_gradients(
        lambda ts: _proj_loss(ops.conv2d(ts[0], ts[1], stride=2, padding=1), np.random.default_rng(seed + 1)),
        [x, w],
        FD_STEP,
    )


def _case_maxpool2d(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 8, 8))
    return check_gradients(
        lambda ts: _proj_loss(ops.maxpool2d(ts[0], k=4, stride=4), np.random.default_rng(seed + 1)),
        [x],
        FD_STEP,
    )


def _case_bilinear_sample(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 6, 6))
    coords = _safe_coords(rng, 6, 6, (4, 4))
    return check_gradients(
        lambda ts: _proj_loss(ops.bilinear_sample(ts[0], ts[1]), np.random.default_rng(seed + 1)),
        [x, coords],
        FD_STEP,
    )


def _case_softmax(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (3, 6))
    return check_gradients(
        lambda ts: _proj_loss(ops.softmax(ts[0], axis=1), np.random.default_rng(seed + 1)), [a], FD_STEP
    )


def _case_cosine_vector(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6)
    return check_gradients(
        lambda ts: ops.cosine_similarity(ts[0], ts[1]), [a, b], FD_STEP
    )


def _case_cosine_axis(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (3, 4, 5)), rng.uniform(-1, 1, (3, 4, 5))
    return check_gradients(
        lambda ts: _proj_loss(ops.cosine_similarity(ts[0], ts[1], axis=1), np.random.default_rng(seed + 1)),
        [a, b],
        FD_STEP,
    )


def _case_composed_graph(seed):
    """conv -> bilinear sample -> softmax chain, as one composite check."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 6, 6))
    w = rng.uniform(-1, 1, (2, 2, 3, 3))
    coords = _safe_coords(rng, 6, 6, (3, 3))

    def build(ts):
        feat = ops.conv2d(ts[0], ts[1], stride=1, padding=1)
        sampled = ops.bilinear_sample(feat, ts[2])
        att = ops.softmax(ops.reshape(sampled, (2, 9)), axis=1)
        return _proj_loss(att, np.random.default_rng(seed + 1))

    return check_gradients(build, [x, w, coords], FD_STEP)


PRIMITIVE_CASES: Dict[str, Callable[[int], float]] = {
    "add": _case_add,
    "mul": _case_mul,
    "div": _case_div,
    "exp_log_sqrt": _case_exp_log_sqrt,
    "tanh": _case_tanh,
    "leaky_relu": _case_leaky_relu,
    "abs": _case_abs,
    "reductions": _case_reductions,
    "matmul": _case_matmul,
    "conv2d": _case_conv2d,
    "conv2d_strided": _case_conv2d_strided,
    "maxpool2d": _case_maxpool2d,
    "bilinear_sample": _case_bilinear_sample,
    "softmax": _case_softmax,
    "cosine_similarity": _case_cosine_vector,
    "cosine_similarity_axis": _case_cosine_axis,
    "composed_conv_sample_softmax": _case_composed_graph,
}


def all_cases() -> Dict[str, Callable[[int], float]]:
    """Primitive cases plus the composite network/loss cases."""
    from . import gradsuite_model

    cases = dict(PRIMITIVE_CASES)
    cases.update(gradsuite_model.MODEL_CASES)
    return cases


def run_case(case: Callable[[int], float], seeds: int = 20, seed0: int = 100) -> float:
    return max(case(seed0 + i) for i in range(seeds))


def run_suite(seeds: int = 20, cases: Dict[str, Callable[[int], float]] | None = None) -> Dict[str, float]:
    cases = all_cases() if cases is None else cases
    return {name: run_case(fn, seeds=seeds) for name, fn in cases.items()}
