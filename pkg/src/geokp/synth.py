"""Synthetic deforming sequences with identity correspondences.

Three generators:

* ``bend`` (BendingCylinder): a thin tube whose axis is bent along a circular
  arc of growing curvature.  The axis keeps its arc length, so distances
  along the surface change only by the small tube-radius effect.  At
  amplitude 1 the axis closes into a full circle and the two ends touch.
* ``chain`` (ArticulatedChain): two rigid tubes joined at a hinge whose
  angle sweeps over the sequence.
* ``breathe`` (BreathingEllipsoid): anisotropic radial scaling of an
  ellipsoid.  Not isometric on purpose; a negative control for geodesic
  preservation.

Every generator works in a fixed coordinate frame scaled so that the rest
pose has unit largest extent.  Frames are *not* re-normalized individually,
since that would rescale intrinsic distances from frame to frame.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec
from .pcloud import PointCloud, SequenceWindow

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

TUBE_RADIUS = 0.02
CHAIN_MAX_ANGLE = np.pi / 2


class Generator(str, enum.Enum):
    BENDING_CYLINDER = "bend"
    ARTICULATED_CHAIN = "chain"
    BREATHING_ELLIPSOID = "breathe"

    @classmethod
    def parse(cls, value) -> "Generator":
        if isinstance(value, cls):
            return value
        aliases = {
            "bendingcylinder": cls.BENDING_CYLINDER,
            "articulatedchain": cls.ARTICULATED_CHAIN,
            "breathingellipsoid": cls.BREATHING_ELLIPSOID,
        }
        key = str(value).lower().replace("_", "").replace("-", "")
        for g in cls:
            if g.value == key:
                return g
        if key in aliases:
            return aliases[key]
        raise InvalidSpec(f"unknown generator {value!r}")


@dataclass(frozen=True)
class DeformSpec:
    generator: Generator = Generator.BENDING_CYLINDER
    n_points: int = 512
    n_frames: int = 8
    amplitude: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_points < 16:
            raise InvalidSpec(f"n_points must be >= 16, got {self.n_points}")
        if self.n_frames < 2:
            raise InvalidSpec(f"n_frames must be >= 2, got {self.n_frames}")
        if not 0.0 <= self.amplitude <= 1.0:
            raise InvalidSpec(f"amplitude must be in [0, 1], got {self.amplitude}")


def _tube_params(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Near-uniform (s, u) samples on the unit-length tube: golden-ratio lattice plus jitter."""
    i = np.arange(n)
    ds = 1.0 / n
    s = (i + 0.5) * ds + rng.uniform(-0.3, 0.3, n) * ds
    offset = rng.uniform()
    du = 2.0 * np.pi / np.sqrt(n * 2.0 * np.pi * TUBE_RADIUS)  # ~ lattice spacing in angle
    u = 2.0 * np.pi * np.mod(i * GOLDEN + offset, 1.0) + rng.uniform(-0.3, 0.3, n) * du
    s = np.clip(s, 0.0, 1.0) - 0.5
    return s, u


def _bend(s: np.ndarray, u: np.ndarray, curvature: float) -> np.ndarray:
    """Tube of length 1 around an axis bent with the given curvature.

    The axis lies in the x-z plane and is parameterized by arc length ``s``
    centered at 0, so bending keeps the axis length fixed.
    """
    r = TUBE_RADIUS
    if abs(curvature) < 1e-12:
        centre = np.stack([s, np.zeros_like(s), np.zeros_like(s)], axis=1)
        normal = np.tile([0.0, 0.0, 1.0], (s.size, 1))
    else:
        a = curvature * s
        centre = np.stack([np.sin(a) / curvature, np.zeros_like(s), (1.0 - np.cos(a)) / curvature], axis=1)
        normal = np.stack([-np.sin(a), np.zeros_like(s), np.cos(a)], axis=1)
    binormal = np.array([0.0, 1.0, 0.0])
    return centre + r * (np.cos(u)[:, None] * normal + np.sin(u)[:, None] * binormal)


def _bending_cylinder(spec: DeformSpec, rng) -> list[np.ndarray]:
    s, u = _tube_params(spec.n_points, rng)
    full = 2.0 * np.pi  # curvature closing a unit-length axis into a circle
    out = []
    for t in range(spec.n_frames):
        kappa = spec.amplitude * full * t / (spec.n_frames - 1)
        out.append(_bend(s, u, kappa))
    return out


def _articulated_chain(spec: DeformSpec, rng) -> list[np.ndarray]:
    s, u = _tube_params(spec.n_points, rng)
    rest = _bend(s, u, 0.0)
    second = s > 0.0
    out = []
    for t in range(spec.n_frames):
        theta = spec.amplitude * CHAIN_MAX_ANGLE * t / (spec.n_frames - 1)
        c, sn = np.cos(theta), np.sin(theta)
        # hinge axis is y through the origin; rotation lifts the second segment towards +z
        rot = np.array([[c, 0.0, -sn], [0.0, 1.0, 0.0], [sn, 0.0, c]])
        pts = rest.copy()
        pts[second] = rest[second] @ rot.T
        out.append(pts)
    return out


def _breathing_ellipsoid(spec: DeformSpec, rng) -> list[np.ndarray]:
    n = spec.n_points
    i = np.arange(n)
    # Fibonacci sphere with a random spin
    z = 1.0 - 2.0 * (i + 0.5) / n
    phi = 2.0 * np.pi * np.mod(i * GOLDEN + rng.uniform(), 1.0)
    rho = np.sqrt(1.0 - z * z)
    sphere = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    axes = np.array([0.25, 0.35, 0.5])
    out = []
    for t in range(spec.n_frames):
        g = 1.0 + spec.amplitude * t / (spec.n_frames - 1)
        out.append(sphere * axes * np.array([g, g, 1.0]))
    return out


_GENERATORS = {
    Generator.BENDING_CYLINDER: _bending_cylinder,
    Generator.ARTICULATED_CHAIN: _articulated_chain,
    Generator.BREATHING_ELLIPSOID: _breathing_ellipsoid,
}


def generate(spec: DeformSpec) -> SequenceWindow:
    """Generate ``spec.n_frames`` frames of the same points under a smooth deformation."""
    spec.validate()
    gen = Generator.parse(spec.generator)
    rng = np.random.default_rng(spec.seed)
    frames = _GENERATORS[gen](spec, rng)
    rest = frames[0]
    scale = float(np.max(rest.max(axis=0) - rest.min(axis=0)))
    clouds = []
    for t, pts in enumerate(frames):
        pts = (pts - pts.mean(axis=0)) / scale
        clouds.append(PointCloud(pts, frame_id=t))
    ident = tuple(np.arange(spec.n_points) for _ in range(spec.n_frames - 1))
    return SequenceWindow(tuple(clouds), ident)


def write_sequence(seq: SequenceWindow, out_dir, stem: str = "frame", extra: dict | None = None):
    """Write frames as ``.xyz`` files plus ``manifest.json``; returns the manifest path."""
    from pathlib import Path

    from .pcloud import SequenceManifest, write_correspondence, write_xyz

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for t, f in enumerate(seq.frames):
        name = f"{stem}_{t:04d}.xyz"
        write_xyz(out / name, f)
        names.append(name)
    corr = None
    if seq.correspondences is not None:
        corr = []
        for t, sigma in enumerate(seq.correspondences):
            name = f"corr_{t:04d}.txt"
            write_correspondence(out / name, sigma)
            corr.append(name)
    manifest = SequenceManifest(out / "manifest.json", names, corr, extra=dict(extra or {}))
    manifest.save()
    return manifest.path
