"""Central finite-difference verification of taped gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def finite_difference(f: Callable[[Sequence[np.ndarray]], float],
                      arrays: Sequence[np.ndarray],
                      step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of a scalar function w.r.t. each input array."""
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.ravel()
        work = [a.copy() for a in arrays]
        for j in range(base.size):
            orig = work[i].ravel()[j]
            work[i].ravel()[j] = orig + step
            fp = f(work)
            work[i].ravel()[j] = orig - step
            fm = f(work)
            work[i].ravel()[j] = orig
            flat[j] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(build: Callable[[Sequence[Tensor]], Tensor],
                    arrays: Sequence[np.ndarray],
                    step: float = 1e-5) -> float:
    """Compare taped gradients of ``build`` against central differences.

    ``build`` maps a list of input Tensors to a scalar loss Tensor. Returns
    the max relative error over all inputs and elements.
    """
    tensors = [Tensor(a.astype(np.float64)) for a in arrays]
    with Tape() as tape:
        loss = build(tensors)
    tape.backward(loss)
    analytic = []
    for t in tensors:
        g = tape.grad(t)
        analytic.append(np.zeros_like(t.data) if g is None else g)

    def f(arrs):
        return build([Tensor(a) for a in arrs]).item()

    numeric = finite_difference(f, [t.data for t in tensors], step=step)
    return max(max_relative_error(a, n) for a, n in zip(analytic, numeric))


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1e-6, abs(a), abs(b))


def check_gradients_sampled(build: Callable[[Sequence[Tensor]], Tensor],
                            arrays: Sequence[np.ndarray],
                            coords_per_input: int = 8,
                            step: float = 1e-5,
                            seed: int = 0,
                            kink_nudge: float = 5e-4) -> float:
    """Spot-check taped gradients at randomly sampled coordinates.

    For composite graphs whose full elementwise sweep would be too slow;
    each input contributes ``coords_per_input`` sampled elements (all of
    them when the input is that small). A coordinate whose comparison fails
    is re-verified at a nudged input: random points occasionally straddle a
    piecewise kink (relu/max/interpolation cell) within the FD step, where
    central differences are meaningless. A genuine VJP bug also fails at
    the nudged points and is still reported.
    """
    tensors = [Tensor(a.astype(np.float64)) for a in arrays]
    with Tape() as tape:
        loss = build(tensors)
    tape.backward(loss)

    def f(arrs):
        return build([Tensor(a) for a in arrs]).item()

    def fd_at(work, i, j):
        flat = work[i].ravel()
        orig = flat[j]
        flat[j] = orig + step
        fp = f(work)
        flat[j] = orig - step
        fm = f(work)
        flat[j] = orig
        return (fp - fm) / (2 * step)

    def analytic_at(work, i, j):
        ts = [Tensor(a.copy()) for a in work]
        with Tape() as t2:
            l2 = build(ts)
        t2.backward(l2)
        g = t2.grad(ts[i])
        return 0.0 if g is None else float(g.ravel()[j])

    rng = np.random.default_rng(seed)
    work = [t.data.copy() for t in tensors]
    worst = 0.0
    for i, t in enumerate(tensors):
        g = tape.grad(t)
        analytic = np.zeros_like(t.data) if g is None else g
        size = t.data.size
        if size <= coords_per_input:
            idx = np.arange(size)
        else:
            idx = rng.choice(size, size=coords_per_input, replace=False)
        for j in idx:
            err = _rel_err(float(analytic.ravel()[j]), fd_at(work, i, j))
            if err >= 1e-4:
                retries = []
                for nudge in (kink_nudge, -kink_nudge):
                    w2 = [a.copy() for a in work]
                    w2[i].ravel()[j] += nudge
                    retries.append(_rel_err(analytic_at(w2, i, j), fd_at(w2, i, j)))
                err = min(err, max(retries))
            worst = max(worst, err)
    return worst
