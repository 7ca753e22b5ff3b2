"""Independent oracles and random configurations shared by the test modules."""

import numpy as np

from geokp.gradcheck import central_difference, min_gap, pairwise
from geokp.losses import chamfer, coverage_loss, geodesic_loss, smoothing_loss, surface_loss

GAP = 1e-3


def softmax_rows(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---- naive loop oracles ------------------------------------------------------


def chamfer_loop(p, q):
    fwd = sum(min(float(np.sum((a - b) ** 2)) for b in q) for a in p)
    bwd = sum(min(float(np.sum((a - b) ** 2)) for a in p) for b in q)
    return fwd + bwd


def coverage_loop(k, eps):
    n = len(k)
    mins = [min(float(np.linalg.norm(k[i] - k[j])) for j in range(n) if j != i) for i in range(n)]
    return 1.0 / (sum(mins) / n + eps)


def surface_loop(k, x):
    return sum(min(float(np.linalg.norm(a - b)) for b in x) for a in k) / len(k)


def expected_geodesic_loop(w, d):
    kk, n = w.shape
    g = np.zeros((kk, kk))
    for i in range(kk):
        for j in range(kk):
            for m in range(n):
                for r in range(n):
                    g[i, j] += w[i, m] * d[m, r] * w[j, r]
    return g


def geodesic_loop(ws, ds, ordered=True):
    gs = [expected_geodesic_loop(w, d) for w, d in zip(ws, ds)]
    total = 0.0
    for a in range(len(gs)):
        for b in range(len(gs)):
            if (a != b) if ordered else (a < b):
                total += float(np.sum((gs[a] - gs[b]) ** 2))
    return total


def smoothing_loop(ks):
    t, n = len(ks), len(ks[0])
    return sum(float(np.linalg.norm(ks[i][j] - ks[i + 1][j])) for i in range(t - 1) for j in range(n)) / ((t - 1) * n)


# ---- random non-degenerate configurations ------------------------------------


def chamfer_config(rng):
    while True:
        p, q = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        d2 = pairwise(p, q) ** 2
        if min(min_gap(d2, 0).min(), min_gap(d2, 1).min()) >= GAP:
            return p, q


def coverage_config(rng, k=6):
    while True:
        kp = rng.normal(size=(k, 3))
        d = pairwise(kp, kp) + np.diag(np.full(k, np.inf))
        if d.min() >= GAP and min_gap(d, 1).min() >= GAP:
            return kp


def surface_config(rng, k=6, n=20):
    while True:
        kp, x = rng.normal(size=(k, 3)), rng.normal(size=(n, 3))
        d = pairwise(kp, x)
        if d.min() >= GAP and min_gap(d, 1).min() >= GAP:
            return kp, x


def geodesic_config(rng, t=3, k=4, n=16):
    from geokp.geodesy import geodesics
    from geokp.pcloud import PointCloud

    ws = [softmax_rows(rng.normal(size=(k, n))) for _ in range(t)]
    ds = [geodesics(PointCloud(rng.normal(size=(n, 3))), 5, retries=3)[0].d for _ in range(t)]
    return ws, ds


def smoothing_config(rng, t=4, k=5):
    while True:
        ks = [rng.normal(size=(k, 3)) for _ in range(t)]
        if min(np.linalg.norm(a - b, axis=1).min() for a, b in zip(ks[:-1], ks[1:])) >= GAP:
            return ks


# ---- finite-difference comparisons (returns relative error, norm-wise) --------


def rel(a, n):
    a, n = np.asarray(a).ravel(), np.asarray(n).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), np.linalg.norm(a), 1e-300))


def fd_chamfer(rng):
    p, q = chamfer_config(rng)
    return rel(chamfer(p, q)[1], central_difference(lambda z: chamfer(p, z)[0], q))


def fd_coverage(rng):
    kp = coverage_config(rng)
    return rel(coverage_loss(kp, 1e-2)[1], central_difference(lambda z: coverage_loss(z, 1e-2)[0], kp))


def fd_surface(rng):
    kp, x = surface_config(rng)
    return rel(surface_loss(kp, x)[1], central_difference(lambda z: surface_loss(z, x)[0], kp))


def fd_geodesic(rng):
    ws, ds = geodesic_config(rng)
    _, grads = geodesic_loss(ws, ds)
    worst = 0.0
    for i in range(len(ws)):
        def f(z, i=i):
            return geodesic_loss(ws[:i] + [z] + ws[i + 1 :], ds)[0]

        worst = max(worst, rel(grads[i], central_difference(f, ws[i])))
    return worst


def fd_smoothing(rng):
    ks = smoothing_config(rng)
    _, grads = smoothing_loss(ks)
    worst = 0.0
    for i in range(len(ks)):
        def f(z, i=i):
            return smoothing_loss(ks[:i] + [z] + ks[i + 1 :])[0]

        worst = max(worst, rel(grads[i], central_difference(f, ks[i])))
    return worst


LOSS_CHECKS = {
    "chamfer": fd_chamfer,
    "coverage": fd_coverage,
    "surface": fd_surface,
    "geodesic": fd_geodesic,
    "smoothing": fd_smoothing,
}


def network_setup(seed):
    """Non-degenerate end-to-end instance: N=32, K=4, M=16, T=2 on a bent tube.

    At initialization the keypoints nearly coincide (all scores close), so the
    head is scaled up and the decoder given random biases to spread the
    keypoints and reconstruction away from tie configurations.
    """
    from geokp.geodesy import geodesics
    from geokp.nnet import init_params
    from geokp.synth import DeformSpec, generate
    from geokp.trainer import TrainingWindow

    seq = generate(DeformSpec(n_points=32, n_frames=2, amplitude=0.5, seed=seed))
    ds = [geodesics(f, 5, retries=3)[0].d for f in seq.frames]
    params = init_params(4, 16, seed)
    rng = np.random.default_rng(seed + 1000)
    params.weights["head2"] *= 40.0
    params.biases["dec3"][:] = rng.normal(scale=0.3, size=params.biases["dec3"].shape)
    return params, TrainingWindow(seq, ds, "synthetic", 0), rng
