"""Self-supervised keypoint losses with analytic gradients.

Keypoints are expectations ``W @ X`` of a row-stochastic matrix ``W`` (K x N)
over the cloud coordinates ``X`` (N x 3).  Every loss returns its value and
the gradient with respect to its direct inputs; :func:`total_loss` chains
them back to each frame's ``W`` and reconstruction.

Nearest-neighbour minima are subdifferentiable at ties.  The gradient is
taken from the branch ``np.argmin`` selects (lowest index), and a zero-length
difference contributes a zero subgradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyCloud, ShapeMismatch, TooFewFrames, TooFewKeypoints
from .pcloud import PointCloud, SequenceWindow

TERMS = ("rec", "cov", "surf", "geo", "smt")


def _coords(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ShapeMismatch(f"expected (n, 3) coordinates, got {a.shape}")
    return a


def _dmat(d) -> np.ndarray:
    return np.asarray(getattr(d, "d", d), dtype=np.float64)


def _unit(v: np.ndarray, norms: np.ndarray) -> np.ndarray:
    safe = np.where(norms > 0.0, norms, 1.0)
    return np.where((norms > 0.0)[..., None], v / safe[..., None], 0.0)


@dataclass(frozen=True)
class LossWeights:
    """Term weights: {1, 2.5, 6} for rec, cov, surf and {6, 2} for geo, smt by default.

    ``ordered_pairs`` sums the geodesic term over ordered frame pairs
    (a != b), which is exactly twice the unordered sum.
    """

    rec: float = 1.0
    cov: float = 2.5
    surf: float = 6.0
    geo: float = 6.0
    smt: float = 2.0
    epsilon: float = 1e-2
    ordered_pairs: bool = True

    def __post_init__(self):
        for name in TERMS:
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {name} must be finite and >= 0, got {v}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in TERMS}

    def without(self, *terms: str) -> "LossWeights":
        kw = {name: 0.0 for name in terms}
        return LossWeights(**{**self.__dict__, **kw})

    @property
    def needs_geodesics(self) -> bool:
        return self.geo > 0


def expected_keypoints(w, cloud) -> np.ndarray:
    """``W @ X``: each keypoint is a convex combination of the cloud points."""
    w = np.asarray(w, dtype=np.float64)
    x = _coords(cloud)
    if w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"W has shape {w.shape} but the cloud has {x.shape[0]} points")
    return w @ x


def chamfer(p, q) -> tuple[float, np.ndarray]:
    """Sum-convention squared Chamfer distance and its gradient w.r.t. ``q``."""
    p, q = _coords(p), _coords(q)
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    diff = q[None, :, :] - p[:, None, :]  # (N, M, 3): q_j - p_i
    d2 = np.einsum("nmc,nmc->nm", diff, diff)
    jp = np.argmin(d2, axis=1)  # nearest q for each p
    iq = np.argmin(d2, axis=0)  # nearest p for each q
    n_idx, m_idx = np.arange(p.shape[0]), np.arange(q.shape[0])
    value = float(d2[n_idx, jp].sum() + d2[iq, m_idx].sum())
    grad = 2.0 * diff[iq, m_idx]
    np.add.at(grad, jp, 2.0 * diff[n_idx, jp])
    return value, grad


def chamfer_mean(p, q) -> float:
    """Chamfer with each direction averaged over its point count; size-independent."""
    p, q = _coords(p), _coords(q)
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    d2 = np.sum((q[None, :, :] - p[:, None, :]) ** 2, axis=-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def coverage_loss(kps, epsilon: float = 1e-2) -> tuple[float, np.ndarray]:
    """Inverse of (mean nearest-other-keypoint distance + epsilon)."""
    k = _coords(kps)
    n = k.shape[0]
    if n < 2:
        raise TooFewKeypoints("coverage needs at least 2 keypoints")
    diff = k[:, None, :] - k[None, :, :]
    dist = np.sqrt(np.einsum("ijc,ijc->ij", diff, diff))
    masked = dist + np.diag(np.full(n, np.inf))
    nn = np.argmin(masked, axis=1)
    rows = np.arange(n)
    dmin = dist[rows, nn]
    s = dmin.mean() + epsilon
    value = 1.0 / s
    u = _unit(diff[rows, nn], dmin)
    ds = np.zeros_like(k)
    ds += u
    np.add.at(ds, nn, -u)
    ds /= n
    return float(value), -(value**2) * ds


def surface_loss(kps, cloud) -> tuple[float, np.ndarray]:
    """Mean distance from each keypoint to its nearest cloud point."""
    k, x = _coords(kps), _coords(cloud)
    if x.shape[0] == 0:
        raise EmptyCloud("surface loss needs a non-empty cloud")
    diff = k[:, None, :] - x[None, :, :]
    d2 = np.einsum("knc,knc->kn", diff, diff)
    j = np.argmin(d2, axis=1)
    rows = np.arange(k.shape[0])
    dist = np.sqrt(d2[rows, j])
    grad = _unit(diff[rows, j], dist) / k.shape[0]
    return float(dist.mean()), grad


def expected_geodesics(w, d) -> np.ndarray:
    """K x K expected geodesic distances ``W D W^T``."""
    w = np.asarray(w, dtype=np.float64)
    d = _dmat(d)
    if d.shape != (w.shape[1], w.shape[1]):
        raise ShapeMismatch(f"D has shape {d.shape}, expected {(w.shape[1],) * 2}")
    return w @ d @ w.T


def geodesic_loss(ws: Sequence, ds: Sequence, ordered_pairs: bool = True) -> tuple[float, list[np.ndarray]]:
    """Squared Frobenius disagreement of expected geodesic matrices over frame pairs.

    Unordered pairs a < b are summed; ``ordered_pairs`` doubles the result,
    matching a sum over all a != b.
    """
    if len(ws) < 2:
        raise TooFewFrames("geodesic loss needs at least 2 frames")
    if len(ds) != len(ws):
        raise ShapeMismatch(f"{len(ws)} probability matrices but {len(ds)} geodesic matrices")
    ws = [np.asarray(w, dtype=np.float64) for w in ws]
    if len({w.shape for w in ws}) != 1:
        raise ShapeMismatch("all frames must share the same W shape")
    dm = [_dmat(d) for d in ds]
    gs = [expected_geodesics(w, d) for w, d in zip(ws, dm)]
    c = 2.0 if ordered_pairs else 1.0
    value = 0.0
    for a, b in combinations(range(len(gs)), 2):
        e = gs[a] - gs[b]
        value += float(np.sum(e * e))
    grads = []
    for a in range(len(gs)):
        acc = sum(gs[a] - gs[b] for b in range(len(gs)) if b != a)
        # d/dW ||G - H||^2 = 4 (G - H) W D for symmetric D and G
        grads.append(4.0 * c * acc @ ws[a] @ dm[a])
    return c * value, grads


def smoothing_loss(kp_seq: Sequence) -> tuple[float, list[np.ndarray]]:
    """Mean keypoint displacement between consecutive frames."""
    if len(kp_seq) < 2:
        raise TooFewFrames("smoothing loss needs at least 2 frames")
    ks = [_coords(k) for k in kp_seq]
    t, n = len(ks), ks[0].shape[0]
    scale = 1.0 / ((t - 1) * n)
    value = 0.0
    grads = [np.zeros_like(k) for k in ks]
    for i in range(t - 1):
        diff = ks[i] - ks[i + 1]
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        value += dist.sum()
        u = _unit(diff, dist) * scale
        grads[i] += u
        grads[i + 1] -= u
    return float(value * scale), grads


@dataclass
class LossBreakdown:
    """Raw (unweighted) term values, the weighted total and gradients.

    ``grad_w[t]`` is dL/dW^t including everything routed through the
    keypoints ``W^t X^t``; ``grad_recon[t]`` is dL/d(reconstruction of frame t).
    """

    total: float
    terms: dict
    grad_w: list = field(default_factory=list)
    grad_recon: list = field(default_factory=list)

    def weighted(self, weights: LossWeights) -> dict:
        return {name: getattr(weights, name) * self.terms[name] for name in TERMS}


def total_loss(
    window: SequenceWindow,
    ws: Sequence,
    ds: Optional[Sequence],
    reconstructions: Sequence,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Weighted sum of all terms over one window.

    Shape terms are evaluated per frame and averaged over the window.  A
    term with zero weight is skipped entirely and reported as 0, so ``ds``
    is never touched unless the geodesic weight is positive.
    """
    xs = window.coords()
    t = len(xs)
    if len(ws) != t or len(reconstructions) != t:
        raise ShapeMismatch(f"window has {t} frames but got {len(ws)} W and {len(reconstructions)} reconstructions")
    ws = [np.asarray(w, dtype=np.float64) for w in ws]
    kps = [expected_keypoints(w, x) for w, x in zip(ws, xs)]
    terms = dict.fromkeys(TERMS, 0.0)
    grad_kp = [np.zeros_like(k) for k in kps]
    grad_w = [np.zeros_like(w) for w in ws]
    grad_rec = [np.zeros_like(_coords(r)) for r in reconstructions]

    if weights.rec > 0:
        for i in range(t):
            v, g = chamfer(xs[i], reconstructions[i])
            terms["rec"] += v / t
            grad_rec[i] += (weights.rec / t) * g
    if weights.cov > 0:
        for i in range(t):
            v, g = coverage_loss(kps[i], weights.epsilon)
            terms["cov"] += v / t
            grad_kp[i] += (weights.cov / t) * g
    if weights.surf > 0:
        for i in range(t):
            v, g = surface_loss(kps[i], xs[i])
            terms["surf"] += v / t
            grad_kp[i] += (weights.surf / t) * g
    if weights.geo > 0:
        if ds is None:
            raise ShapeMismatch("geodesic weight is positive but no geodesic matrices were given")
        v, gs = geodesic_loss(ws, [ds[i] for i in range(t)], weights.ordered_pairs)
        terms["geo"] = v
        for i in range(t):
            grad_w[i] += weights.geo * gs[i]
    if weights.smt > 0:
        v, gs = smoothing_loss(kps)
        terms["smt"] = v
        for i in range(t):
            grad_kp[i] += weights.smt * gs[i]

    for i in range(t):
        grad_w[i] += grad_kp[i] @ xs[i].T
    total = sum(getattr(weights, name) * terms[name] for name in TERMS)
    return LossBreakdown(float(total), terms, grad_w, grad_rec)
