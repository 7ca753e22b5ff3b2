"""Point-cloud data model, normalization, sampling and perturbation.

Also owns the on-disk text formats: ``.xyz`` frame files (one point per
line, ``#`` comments allowed), correspondence files (one integer per line)
and the JSON sequence manifest tying them together.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AllPointsCoincident,
    InvalidCount,
    MissingCorrespondence,
    NegativeVariance,
    NonOrthonormalRotation,
    ShapeMismatch,
)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """N points in 3D, stored as a read-only float64 ``(N, 3)`` array."""

    points: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatch(f"expected (N, 3) coordinates, got {pts.shape}")
        if pts.shape[0] < 2:
            raise InvalidCount(f"a point cloud needs at least 2 points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "frame_id", int(self.frame_id))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.frame_id)


@dataclass(frozen=True)
class SequenceWindow:
    """T ordered frames sharing N, plus optional frame-to-frame index maps.

    ``correspondences[t][i]`` is the index in frame ``t + 1`` of point ``i``
    of frame ``t``.
    """

    frames: tuple
    correspondences: Optional[tuple] = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InvalidCount("a sequence window needs at least one frame")
        n = frames[0].n
        if any(f.n != n for f in frames):
            raise ShapeMismatch("all frames of a window must share the same N")
        object.__setattr__(self, "frames", frames)
        if self.correspondences is not None:
            maps = tuple(_frozen(_check_bijection(c, n)) for c in self.correspondences)
            if len(maps) != len(frames) - 1:
                raise ShapeMismatch(
                    f"{len(frames)} frames need {len(frames) - 1} correspondence maps, got {len(maps)}"
                )
            object.__setattr__(self, "correspondences", maps)

    @property
    def t(self) -> int:
        return len(self.frames)

    @property
    def n(self) -> int:
        return self.frames[0].n

    def coords(self) -> list[np.ndarray]:
        return [f.points for f in self.frames]

    def maps_from_first(self) -> list[np.ndarray]:
        """Composed maps from frame 0 indices into every frame (identity for frame 0)."""
        if self.correspondences is None:
            raise MissingCorrespondence("window carries no ground-truth correspondences")
        cur = np.arange(self.n)
        out = [cur]
        for sigma in self.correspondences:
            cur = sigma[cur]
            out.append(cur)
        return out


def _check_bijection(c, n: int) -> np.ndarray:
    c = np.asarray(c)
    if c.shape != (n,) or not np.issubdtype(c.dtype, np.integer):
        raise ShapeMismatch(f"correspondence must be {n} integers, got shape {c.shape}")
    c = c.astype(np.int64)
    if c.min() < 0 or c.max() >= n or np.unique(c).size != n:
        raise ShapeMismatch("correspondence map is not a bijection on 0..N-1")
    return c


def _as_cloud(cloud) -> PointCloud:
    return cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)


def normalize(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the largest AABB side is 1."""
    cloud = _as_cloud(cloud)
    pts = cloud.points
    extent = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    if extent < 1e-12:
        raise AllPointsCoincident("cannot normalize a cloud with zero extent")
    centered = pts - pts.mean(axis=0)
    return cloud.with_points(centered / extent)


def normalization_params(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Centroid and scale used by :func:`normalize`."""
    extent = float(np.max(points.max(axis=0) - points.min(axis=0)))
    if extent < 1e-12:
        raise AllPointsCoincident("cannot normalize a cloud with zero extent")
    return points.mean(axis=0), extent


def fps_indices(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling; returns indices in visitation order.

    Ties in the max-min distance go to the lowest index.
    """
    n = points.shape[0]
    if m < 1 or m > n:
        raise InvalidCount(f"m must be in [1, {n}], got {m}")
    if not 0 <= start < n:
        raise InvalidCount(f"start index {start} out of range for {n} points")
    idx = np.empty(m, dtype=np.int64)
    idx[0] = start
    mind = np.sum((points - points[start]) ** 2, axis=1)
    for s in range(1, m):
        nxt = int(np.argmax(mind))
        idx[s] = nxt
        np.minimum(mind, np.sum((points - points[nxt]) ** 2, axis=1), out=mind)
    return idx


def fps_downsample(cloud: PointCloud, m: int, start: int = 0) -> PointCloud:
    cloud = _as_cloud(cloud)
    if m == 1:
        raise InvalidCount("a downsampled cloud needs at least 2 points")
    return cloud.with_points(cloud.points[fps_indices(cloud.points, m, start)])


def add_gaussian_noise(cloud: PointCloud, variance: float, seed: int = 0) -> PointCloud:
    cloud = _as_cloud(cloud)
    if variance < 0:
        raise NegativeVariance(f"variance must be >= 0, got {variance}")
    if variance == 0:
        return cloud.with_points(cloud.points)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, np.sqrt(variance), size=cloud.points.shape)
    return cloud.with_points(cloud.points + noise)


def rigid_transform(cloud: PointCloud, rotation, translation) -> PointCloud:
    cloud = _as_cloud(cloud)
    r = np.asarray(rotation, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    if r.shape != (3, 3) or np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
        raise NonOrthonormalRotation("rotation must be a 3x3 orthonormal matrix")
    return cloud.with_points(cloud.points @ r.T + t)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly random proper rotation (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# --------------------------------------------------------------------------
# text formats


def read_xyz(path, frame_id: int = 0) -> PointCloud:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            rows.append([float(p) for p in parts])
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3), frame_id)


def write_xyz(path, cloud: PointCloud) -> None:
    cloud = _as_cloud(cloud)
    # repr-precision keeps the text round trip exact
    with open(path, "w") as fh:
        fh.write(f"# {cloud.n} points, frame {cloud.frame_id}\n")
        for x, y, z in cloud.points.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_correspondence(path, n: Optional[int] = None) -> np.ndarray:
    vals = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                vals.append(int(line))
    arr = np.array(vals, dtype=np.int64)
    return _check_bijection(arr, arr.size if n is None else n)


def write_correspondence(path, sigma) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{int(i)}\n" for i in sigma)


@dataclass
class SequenceManifest:
    """Parsed manifest. Relative paths are resolved against the manifest's directory.

    JSON keys: ``frames`` (list of paths), optional ``correspondences``
    (one path applied to every consecutive pair, or a list of T-1 paths),
    optional ``geodesics`` (one cache path per frame, written by
    ``geokp preprocess``) and ``geodesic_k`` (the k actually used per frame).
    """

    path: Path
    frames: list
    correspondences: Optional[list] = None
    geodesics: Optional[list] = None
    geodesic_k: Optional[list] = None
    extra: dict = field(default_factory=dict)

    @property
    def root(self) -> Path:
        return self.path.parent

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def load_frames(self) -> list[PointCloud]:
        return [read_xyz(self.resolve(p), frame_id=i) for i, p in enumerate(self.frames)]

    def load_correspondences(self, n: int) -> Optional[list[np.ndarray]]:
        if not self.correspondences:
            return None
        maps = [read_correspondence(self.resolve(p), n) for p in self.correspondences]
        if len(maps) == 1 and len(self.frames) > 2:
            maps = maps * (len(self.frames) - 1)
        if len(maps) != len(self.frames) - 1:
            raise ShapeMismatch(
                f"manifest lists {len(maps)} correspondence files for {len(self.frames)} frames"
            )
        return maps

    def to_json(self) -> dict:
        doc = dict(self.extra)
        doc["frames"] = [str(p) for p in self.frames]
        if self.correspondences:
            doc["correspondences"] = [str(p) for p in self.correspondences]
        if self.geodesics:
            doc["geodesics"] = [str(p) for p in self.geodesics]
        if self.geodesic_k:
            doc["geodesic_k"] = [int(k) for k in self.geodesic_k]
        return doc

    def save(self, path=None) -> None:
        path = Path(path) if path is not None else self.path
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        os.replace(tmp, path)


def read_manifest(path) -> SequenceManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    if "frames" not in doc or not isinstance(doc["frames"], list):
        raise ValueError(f"{path}: manifest needs a 'frames' list")
    corr = doc.get("correspondences")
    if isinstance(corr, str):
        corr = [corr]
    known = {"frames", "correspondences", "geodesics", "geodesic_k"}
    return SequenceManifest(
        path=path,
        frames=list(doc["frames"]),
        correspondences=corr,
        geodesics=doc.get("geodesics"),
        geodesic_k=doc.get("geodesic_k"),
        extra={k: v for k, v in doc.items() if k not in known},
    )


def load_sequence(manifest: SequenceManifest) -> SequenceWindow:
    frames = manifest.load_frames()
    maps = manifest.load_correspondences(frames[0].n)
    return SequenceWindow(tuple(frames), None if maps is None else tuple(maps))


def stack(clouds: Sequence[PointCloud]) -> np.ndarray:
    return np.stack([c.points for c in clouds])
