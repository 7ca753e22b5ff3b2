import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles as O
from geokp.errors import EmptyCloud, ShapeMismatch, TooFewFrames, TooFewKeypoints
from geokp.losses import (
    TERMS,
    LossWeights,
    chamfer,
    chamfer_mean,
    coverage_loss,
    expected_geodesics,
    expected_keypoints,
    geodesic_loss,
    smoothing_loss,
    surface_loss,
    total_loss,
)
from geokp.pcloud import PointCloud, SequenceWindow, random_rotation


class TestExpectedKeypoints:
    def test_one_hot(self, rng):
        x = rng.normal(size=(10, 3))
        w = np.zeros((1, 10))
        w[0, 7] = 1.0
        assert np.array_equal(expected_keypoints(w, x)[0], x[7])

    def test_midpoint(self):
        assert np.allclose(expected_keypoints([[0.5, 0.5]], PointCloud([[0, 0, 0], [1, 0, 0]])), [[0.5, 0, 0]])

    def test_loop_oracle(self, rng):
        w, x = O.softmax_rows(rng.normal(size=(4, 12))), rng.normal(size=(12, 3))
        ref = np.array([[sum(w[k, n] * x[n, c] for n in range(12)) for c in range(3)] for k in range(4)])
        assert np.max(np.abs(expected_keypoints(w, x) - ref)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            expected_keypoints(np.ones((2, 3)) / 3, np.zeros((4, 3)))


class TestChamfer:
    def test_identical(self, rng):
        x = rng.normal(size=(7, 3))
        assert chamfer(x, x)[0] == 0.0

    def test_unit(self):
        assert chamfer([[0, 0, 0]], [[1, 0, 0]])[0] == 2.0

    def test_loop_and_fd(self, rng):
        p, q = O.chamfer_config(rng)
        assert abs(chamfer(p, q)[0] - O.chamfer_loop(p, q)) < 1e-12
        assert O.fd_chamfer(rng) < 1e-6

    def test_mean_variant(self, rng):
        p, q = rng.normal(size=(4, 3)), rng.normal(size=(9, 3))
        d2 = O.pairwise(p, q) ** 2
        assert abs(chamfer_mean(p, q) - (d2.min(1).mean() + d2.min(0).mean())) < 1e-12

    def test_empty(self):
        with pytest.raises(EmptyCloud):
            chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


class TestCoverage:
    def test_two_points(self):
        assert abs(coverage_loss([[0, 0, 0], [1, 0, 0]], 0.01)[0] - 1 / 1.01) < 1e-12

    def test_coincident(self):
        v, g = coverage_loss(np.zeros((4, 3)), 0.01)
        assert abs(v - 100.0) < 1e-9 and np.all(g == 0)

    def test_loop_and_fd(self, rng):
        kp = O.coverage_config(rng)
        assert abs(coverage_loss(kp, 0.01)[0] - O.coverage_loop(kp, 0.01)) < 1e-12
        assert O.fd_coverage(rng) < 1e-6

    def test_single(self):
        with pytest.raises(TooFewKeypoints):
            coverage_loss(np.zeros((1, 3)))


class TestSurface:
    def test_on_points(self, rng):
        x = rng.normal(size=(10, 3))
        assert surface_loss(x[[1, 4, 4]], x)[0] == 0.0

    def test_half(self):
        assert surface_loss([[0, 0, 0.5]], [[0, 0, 0], [5, 5, 5]])[0] == 0.5

    def test_loop_and_fd(self, rng):
        kp, x = O.surface_config(rng)
        assert abs(surface_loss(kp, x)[0] - O.surface_loop(kp, x)) < 1e-12
        assert O.fd_surface(rng) < 1e-6


class TestGeodesic:
    def test_identical_frames(self, rng):
        w = O.softmax_rows(rng.normal(size=(3, 8)))
        d = np.abs(rng.normal(size=(8, 8)))
        d = d + d.T
        assert geodesic_loss([w, w, w], [d, d, d])[0] == 0.0

    def test_k1_example(self):
        d = np.array([[0.0, 1.0], [1.0, 0.0]])
        ws = [np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])]
        assert expected_geodesics(ws[0], d)[0, 0] == 0.5
        assert geodesic_loss(ws, [d, d], ordered_pairs=False)[0] == 0.25
        assert geodesic_loss(ws, [d, d], ordered_pairs=True)[0] == 0.5

    @pytest.mark.parametrize("ordered", [True, False])
    def test_loop_oracle(self, rng, ordered):
        ws, ds = O.geodesic_config(rng)
        v = geodesic_loss(ws, ds, ordered)[0]
        assert abs(v - O.geodesic_loop(ws, ds, ordered)) < 1e-10 * max(1.0, v)

    def test_fd(self, rng):
        assert O.fd_geodesic(rng) < 1e-6

    def test_errors(self):
        with pytest.raises(TooFewFrames):
            geodesic_loss([np.ones((1, 2)) / 2], [np.zeros((2, 2))])


class TestSmoothing:
    def test_static(self, rng):
        k = rng.normal(size=(5, 3))
        assert smoothing_loss([k, k, k])[0] == 0.0

    def test_translation(self, rng):
        k = rng.normal(size=(5, 3))
        assert abs(smoothing_loss([k, k + [0.1, 0, 0]])[0] - 0.1) < 1e-12

    def test_loop_and_fd(self, rng):
        ks = O.smoothing_config(rng)
        assert abs(smoothing_loss(ks)[0] - O.smoothing_loop(ks)) < 1e-12
        assert O.fd_smoothing(rng) < 1e-6


@pytest.mark.parametrize("name", sorted(O.LOSS_CHECKS))
def test_fd_many_configs(name):
    rng = np.random.default_rng(7)
    assert max(O.LOSS_CHECKS[name](rng) for _ in range(5)) < 1e-6


def _instance(rng, t=3, n=20, k=4, m=15):
    frames = tuple(PointCloud(rng.normal(size=(n, 3))) for _ in range(t))
    win = SequenceWindow(frames)
    ws = [O.softmax_rows(rng.normal(size=(k, n))) for _ in range(t)]
    ds = [np.abs(O.pairwise(f.points, f.points)) for f in frames]
    recs = [rng.normal(size=(m, 3)) for _ in range(t)]
    return win, ws, ds, recs


class TestTotal:
    def test_all_zero(self, rng):
        win, ws, ds, recs = _instance(rng)
        lb = total_loss(win, ws, ds, recs, LossWeights(0, 0, 0, 0, 0))
        assert lb.total == 0.0 and all(np.all(g == 0) for g in lb.grad_w)

    def test_weighted_sum(self, rng):
        win, ws, ds, recs = _instance(rng)
        xs = win.coords()
        kps = [w @ x for w, x in zip(ws, xs)]
        t = len(xs)
        manual = (
            1.0 * sum(chamfer(x, r)[0] for x, r in zip(xs, recs)) / t
            + 2.5 * sum(coverage_loss(k, 1e-2)[0] for k in kps) / t
            + 6.0 * sum(surface_loss(k, x)[0] for k, x in zip(kps, xs)) / t
            + 6.0 * geodesic_loss(ws, ds)[0]
            + 2.0 * smoothing_loss(kps)[0]
        )
        assert abs(total_loss(win, ws, ds, recs).total - manual) < 1e-12 * max(1.0, manual)

    @pytest.mark.parametrize("term", TERMS)
    def test_disable_one(self, rng, term):
        win, ws, ds, recs = _instance(rng)
        full = total_loss(win, ws, ds, recs)
        cut = total_loss(win, ws, ds, recs, LossWeights().without(term))
        assert cut.terms[term] == 0.0
        expect = full.total - getattr(LossWeights(), term) * full.terms[term]
        assert abs(cut.total - expect) < 1e-12 * max(1.0, full.total)

    def test_geo_disabled_never_touches_ds(self, rng):
        win, ws, _, recs = _instance(rng)

        class Exploding:
            def __getitem__(self, i):
                raise AssertionError("geodesics read")

        total_loss(win, ws, Exploding(), recs, LossWeights(geo=0))

    def test_gradient_fd(self, rng):
        win, ws, ds, recs = _instance(rng, t=2, n=12, k=3, m=8)
        lb = total_loss(win, ws, ds, recs)
        for i in range(2):
            def f(z, i=i):
                return total_loss(win, ws[:i] + [z] + ws[i + 1 :], ds, recs).total

            assert O.rel(lb.grad_w[i], O.central_difference(f, ws[i])) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    x, r = rng.normal(size=(10, 3)), rng.normal(size=(6, 3))
    kp = rng.normal(size=(5, 3))
    pk, px, pr = rng.permutation(5), rng.permutation(10), rng.permutation(6)
    assert abs(chamfer(x, r)[0] - chamfer(x[px], r[pr])[0]) < 1e-12
    assert abs(coverage_loss(kp)[0] - coverage_loss(kp[pk])[0]) < 1e-9
    assert abs(surface_loss(kp, x)[0] - surface_loss(kp[pk], x[px])[0]) < 1e-12


def test_geodesic_loss_rigid_invariance(rng):
    from geokp.geodesy import geodesics
    from geokp.pcloud import rigid_transform

    c = PointCloud(rng.normal(size=(40, 3)))
    moved = rigid_transform(c, random_rotation(rng), rng.normal(size=3))
    w = O.softmax_rows(rng.normal(size=(4, 40)))
    ds = [geodesics(c, 5, retries=3)[0], geodesics(moved, 5, retries=3)[0]]
    assert geodesic_loss([w, w], ds)[0] < 1e-12
