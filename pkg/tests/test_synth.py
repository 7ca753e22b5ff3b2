import numpy as np
import pytest

from geokp.errors import InvalidSpec
from geokp.geodesy import geodesics
from geokp.pcloud import load_sequence, read_manifest
from geokp.synth import DeformSpec, Generator, generate, write_sequence


@pytest.mark.parametrize("gen", list(Generator))
def test_shapes_and_identity(gen):
    seq = generate(DeformSpec(gen, n_points=64, n_frames=3, seed=1))
    assert seq.t == 3 and seq.n == 64
    assert all(np.array_equal(c, np.arange(64)) for c in seq.correspondences)


def test_deterministic():
    a = generate(DeformSpec(n_points=64, seed=3))
    b = generate(DeformSpec(n_points=64, seed=3))
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a.frames, b.frames))


def test_rest_pose_unit_extent():
    f0 = generate(DeformSpec(n_points=256)).frames[0].points
    assert abs(np.max(f0.max(0) - f0.min(0)) - 1.0) < 1e-12


def test_zero_amplitude_static():
    seq = generate(DeformSpec(n_points=64, amplitude=0.0))
    assert np.allclose(seq.frames[0].points, seq.frames[-1].points)


@pytest.mark.parametrize(
    "kw", [dict(n_points=4), dict(n_frames=1), dict(amplitude=1.5), dict(amplitude=-0.1)]
)
def test_invalid(kw):
    with pytest.raises(InvalidSpec):
        generate(DeformSpec(**kw))


def test_parse_aliases():
    assert Generator.parse("BendingCylinder") is Generator.BENDING_CYLINDER
    assert Generator.parse("chain") is Generator.ARTICULATED_CHAIN
    with pytest.raises(InvalidSpec):
        Generator.parse("sphere")


def test_chain_rigid_parts_keep_distances():
    seq = generate(DeformSpec(Generator.ARTICULATED_CHAIN, n_points=128, n_frames=3))
    a, b = seq.frames[0].points, seq.frames[-1].points
    left = a[:, 0] < a[:, 0].mean() - 0.1
    da = np.linalg.norm(a[left][:, None] - a[left][None], axis=-1)
    db = np.linalg.norm(b[left][:, None] - b[left][None], axis=-1)
    assert np.max(np.abs(da - db)) < 1e-9


def test_write_and_reload(tmp_path):
    seq = generate(DeformSpec(n_points=32, n_frames=3))
    path = write_sequence(seq, tmp_path, extra={"generator": "bend"})
    back = load_sequence(read_manifest(path))
    assert all(np.array_equal(x.points, y.points) for x, y in zip(seq.frames, back.frames))
    assert read_manifest(path).extra["generator"] == "bend"


def test_breathe_changes_geodesics_more_than_bend():
    def rel(gen):
        seq = generate(DeformSpec(gen, n_points=256, n_frames=4))
        d0 = geodesics(seq.frames[0], 5, retries=3)[0].d
        d1 = geodesics(seq.frames[-1], 5, retries=3)[0].d
        return np.linalg.norm(d1 - d0) / np.linalg.norm(d0)

    assert rel(Generator.BREATHING_ELLIPSOID) > 0.05 > rel(Generator.BENDING_CYLINDER)
