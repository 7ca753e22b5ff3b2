"""Approximate surface geodesics on point clouds.

A symmetric k-nearest-neighbour graph is built over the points and all-pairs
shortest path lengths on it stand in for geodesic distances.  Results can be
cached on disk in a small binary format::

    offset  size   content
    0       4      magic b"GKPD"
    4       4      u32 version (1)
    8       4      u32 N
    12      4*N*N  float32 distances, row-major, little-endian
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from .errors import (
    BadMagic,
    CacheIOError,
    DisconnectedGraph,
    DuplicatePoints,
    KTooLarge,
    ShapeMismatch,
    SizeMismatch,
)
from .pcloud import PointCloud, _as_cloud

BRUTE_FORCE_MAX_N = 512
CACHE_MAGIC = b"GKPD"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class NeighborGraph:
    """Undirected weighted graph stored as unique edges ``i < j``."""

    n: int
    k: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    def to_sparse(self):
        r = np.concatenate([self.rows, self.cols])
        c = np.concatenate([self.cols, self.rows])
        w = np.concatenate([self.weights, self.weights])
        return coo_matrix((w, (r, c)), shape=(self.n, self.n)).tocsr()

    def adjacency(self) -> list[list[tuple[int, float]]]:
        adj: list[list[tuple[int, float]]] = [[] for _ in range(self.n)]
        for i, j, w in zip(self.rows.tolist(), self.cols.tolist(), self.weights.tolist()):
            adj[i].append((j, w))
            adj[j].append((i, w))
        return adj

    def degrees(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n) + np.bincount(self.cols, minlength=self.n)

    def edge_set(self) -> dict[tuple[int, int], float]:
        return {(int(i), int(j)): float(w) for i, j, w in zip(self.rows, self.cols, self.weights)}

    def components(self) -> list[int]:
        _, labels = connected_components(self.to_sparse(), directed=False)
        return np.bincount(labels).tolist()


@dataclass(frozen=True)
class GeodesicMatrix:
    d: np.ndarray

    def __post_init__(self):
        d = np.array(self.d, dtype=np.float64, copy=True)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ShapeMismatch(f"geodesic matrix must be square, got {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def n(self) -> int:
        return self.d.shape[0]


def _knn_brute(pts: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    # stable sort: equal distances keep index order
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return order, np.sqrt(np.take_along_axis(d2, order, axis=1))


def _knn_tree(pts: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    n = pts.shape[0]
    q = min(n, k + 4)
    dist, idx = cKDTree(pts).query(pts, k=q)
    nbr = np.empty((n, k), dtype=np.int64)
    nd = np.empty((n, k))
    for i in range(n):
        keep = idx[i] != i
        ii, dd = idx[i][keep], dist[i][keep]
        o = np.lexsort((ii, dd))[:k]
        nbr[i], nd[i] = ii[o], dd[o]
    return nbr, nd


def build_knn_graph(cloud: PointCloud, k: int = 5) -> NeighborGraph:
    """Connect each point to its k Euclidean nearest neighbours, symmetrized by union."""
    pts = _as_cloud(cloud).points
    n = pts.shape[0]
    if k < 1 or k >= n:
        raise KTooLarge(f"k must be in [1, {n - 1}] for {n} points, got {k}")
    if n <= BRUTE_FORCE_MAX_N:
        nbr, nd = _knn_brute(pts, k)
    else:
        nbr, nd = _knn_tree(pts, k)
    if np.any(nd <= 0.0):
        raise DuplicatePoints("cloud contains coincident points; edge lengths must be > 0")
    src = np.repeat(np.arange(n), k)
    dst = nbr.ravel()
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    key = np.unique(lo * n + hi)
    rows, cols = key // n, key % n
    w = np.sqrt(np.sum((pts[rows] - pts[cols]) ** 2, axis=1))
    return NeighborGraph(n, k, rows, cols, w)


def shortest_paths(graph: NeighborGraph) -> GeodesicMatrix:
    """Exact all-pairs shortest paths by Dijkstra from every source."""
    sizes = graph.components()
    if len(sizes) > 1:
        raise DisconnectedGraph(sizes)
    d = dijkstra(graph.to_sparse(), directed=False)
    # row i and column i come from different sources; pin exact symmetry
    d = np.minimum(d, d.T)
    np.fill_diagonal(d, 0.0)
    return GeodesicMatrix(d)


def geodesics(cloud: PointCloud, k: int = 5, retries: int = 0, k_step: int = 2) -> tuple[GeodesicMatrix, int]:
    """k-NN graph + shortest paths, raising k by ``k_step`` on disconnection.

    Returns the matrix and the k that produced a connected graph.
    """
    cloud = _as_cloud(cloud)
    for attempt in range(retries + 1):
        kk = k + attempt * k_step
        try:
            return shortest_paths(build_knn_graph(cloud, min(kk, cloud.n - 1))), kk
        except DisconnectedGraph:
            if attempt == retries:
                raise
    raise AssertionError("unreachable")


@dataclass
class ShortcutReport:
    threshold: float
    pairs: list  # (i, j, d_a, d_b) with i < j, indices in cloud_a numbering

    def __len__(self):
        return len(self.pairs)

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "n_pairs": len(self.pairs),
            "pairs": [
                {"i": i, "j": j, "d_a": da, "d_b": db} for i, j, da, db in self.pairs
            ],
        }


def shortcut_diagnostic(
    cloud_a: PointCloud,
    cloud_b: PointCloud,
    correspondences=None,
    threshold: float = 0.25,
    k: int = 5,
    min_fraction: float = 0.1,
) -> ShortcutReport:
    """Point pairs whose geodesic distance changes by more than ``threshold`` (relative).

    Large drops usually mean the k-NN graph bridged two surface parts that
    came into near-contact, so the "geodesic" jumps across the gap.  Pairs
    closer than ``min_fraction`` of frame a's geodesic diameter are ignored:
    at a few edge lengths, k-NN rewiring alone moves distances by 25%.
    """
    a, b = _as_cloud(cloud_a), _as_cloud(cloud_b)
    if a.n != b.n:
        raise ShapeMismatch("diagnostic needs clouds with the same number of points")
    sigma = np.arange(a.n) if correspondences is None else np.asarray(correspondences)
    da = shortest_paths(build_knn_graph(a, k)).d
    db = shortest_paths(build_knn_graph(b, k)).d[np.ix_(sigma, sigma)]
    iu, ju = np.triu_indices(a.n, 1)
    ref = da[iu, ju]
    rel = np.abs(db[iu, ju] - ref) / np.maximum(ref, 1e-12)
    hit = np.flatnonzero((rel > threshold) & (ref >= min_fraction * da.max()))
    pairs = [(int(iu[h]), int(ju[h]), float(ref[h]), float(db[iu[h], ju[h]])) for h in hit]
    return ShortcutReport(threshold, pairs)


# --------------------------------------------------------------------------
# cache files


def cache_write(matrix: GeodesicMatrix, path) -> None:
    d = np.ascontiguousarray(matrix.d, dtype="<f4")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, d.shape[0]))
            fh.write(d.tobytes(order="C"))
        os.replace(tmp, path)
    except OSError as exc:
        raise CacheIOError(f"cannot write geodesic cache {path}: {exc}") from exc


def cache_read(path) -> GeodesicMatrix:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CacheIOError(f"cannot read geodesic cache {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise SizeMismatch(f"{path}: file shorter than the header")
    magic, version, n = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise BadMagic(f"{path}: unsupported cache version {version}")
    expected = _HEADER.size + 4 * n * n
    if len(raw) != expected:
        raise SizeMismatch(f"{path}: expected {expected} bytes for N={n}, found {len(raw)}")
    d = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, n)
    return GeodesicMatrix(d.astype(np.float64))


def preprocess_manifest(manifest_path, k: int = 5, out_dir=None, retries: int = 3, force: bool = False, jobs: int = 1):
    """Compute and cache geodesics for every frame of a manifest.

    Cache files are named after the frames (``<stem>.gkpd``) inside
    ``out_dir`` (default: the manifest's directory); the manifest is updated
    in place with their paths and the k that produced a connected graph.
    Existing caches are reused unless ``force`` is set.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .pcloud import read_manifest, read_xyz

    manifest = read_manifest(manifest_path)
    out = Path(out_dir) if out_dir is not None else manifest.root
    out.mkdir(parents=True, exist_ok=True)
    prev_k = dict(zip(manifest.geodesics or [], manifest.geodesic_k or []))

    def one(i_frame):
        i, frame = i_frame
        path = out / (Path(frame).stem + ".gkpd")
        rel = os.path.relpath(path, manifest.root)
        if path.exists() and not force:
            return rel, int(prev_k.get(rel, k))
        matrix, used_k = geodesics(read_xyz(manifest.resolve(frame), i), k, retries=retries)
        cache_write(matrix, path)
        return rel, used_k

    items = list(enumerate(manifest.frames))
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    manifest.geodesics = [r for r, _ in results]
    manifest.geodesic_k = [kk for _, kk in results]
    manifest.save()
    return manifest
