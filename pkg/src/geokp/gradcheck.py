"""Finite-difference tools for verifying the hand-written gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_STEP = 1e-5


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries that are zero up to round-off from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_STEP, index=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; all entries, or only ``index`` (flat indices)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(flat.size) if index is None else np.zeros(len(index))
    for slot, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[i if index is None else slot] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape) if index is None else out


def min_gap(d: np.ndarray, axis: int) -> np.ndarray:
    """Gap between the smallest and second-smallest entry along ``axis``."""
    part = np.partition(d, 1, axis=axis)
    return np.take(part, 1, axis=axis) - np.take(part, 0, axis=axis)


def pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))


def loss_selections(window, ws, reconstructions) -> tuple:
    """Every nearest-neighbour choice the losses make for one window."""
    xs = window.coords()
    out = []
    for w, x, r in zip(ws, xs, reconstructions):
        k = np.asarray(w) @ x
        d = pairwise(x, np.asarray(r))
        kk = pairwise(k, k) + np.diag(np.full(k.shape[0], np.inf))
        out += [np.argmin(d, 1), np.argmin(d, 0), np.argmin(kk, 1), np.argmin(pairwise(k, x), 1)]
    return tuple(a.tobytes() for a in out)


def network_pattern(params, tw, weights) -> tuple:
    """Discrete state of the whole objective: ReLU gates, pool winners and loss selections."""
    from .trainer import window_objective

    _, _, results = window_objective(params, tw, weights, with_grad=False)
    nets = tuple(r.cache.pattern() for r in results)
    return nets + loss_selections(tw.window, [r.w for r in results], [r.reconstruction for r in results])


def check_network_gradients(params, tw, weights, rng, per_tensor: int = 8, directions: int = 3, h: float = DEFAULT_STEP):
    """Compare backprop with central differences of the window objective.

    Checks ``per_tensor`` random entries of every parameter tensor plus
    ``directions`` random directional derivatives over all parameters.
    Perturbations that flip any discrete choice (a ReLU gate, the max-pool
    winner, a nearest-neighbour pick) are not differentiable there and are
    resampled.  Returns (worst relative error, number checked, number resampled).
    """
    from .trainer import window_objective

    lb, grads, _ = window_objective(params, tw, weights)
    base = network_pattern(params, tw, weights)
    floor = 1e-6 * max(1.0, max(float(np.max(np.abs(g))) for g in grads.values()))
    tensors = params.as_dict()

    def f_and_pattern():
        return window_objective(params, tw, weights, with_grad=False)[0].total, network_pattern(params, tw, weights)

    worst, checked, resampled = 0.0, 0, 0
    for name, a in tensors.items():
        flat = a.reshape(-1)
        got, tries = 0, 0
        for i in rng.permutation(flat.size):
            if got >= min(per_tensor, flat.size) or tries > 20 * per_tensor:
                break
            tries += 1
            old = flat[i]
            flat[i] = old + h
            fp, pp = f_and_pattern()
            flat[i] = old - h
            fm, pm = f_and_pattern()
            flat[i] = old
            if pp != base or pm != base:
                resampled += 1
                continue
            err = relative_error(grads[name].reshape(-1)[i], (fp - fm) / (2 * h), floor)
            worst = max(worst, err)
            got += 1
            checked += 1

    names = list(tensors)
    got, tries = 0, 0
    while got < directions and tries < 20 * directions:
        tries += 1
        v = {n: rng.normal(size=tensors[n].shape) for n in names}
        norm = np.sqrt(sum(np.sum(x * x) for x in v.values()))
        for n in names:
            tensors[n] += h * v[n] / norm
        fp, pp = f_and_pattern()
        for n in names:
            tensors[n] -= 2 * h * v[n] / norm
        fm, pm = f_and_pattern()
        for n in names:
            tensors[n] += h * v[n] / norm
        if pp != base or pm != base:
            resampled += 1
            continue
        analytic = sum(np.sum(grads[n] * v[n]) for n in names) / norm
        worst = max(worst, relative_error(analytic, (fp - fm) / (2 * h), floor))
        got += 1
        checked += 1
    return worst, checked, resampled
