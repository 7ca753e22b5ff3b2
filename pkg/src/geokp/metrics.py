"""Keypoint evaluation metrics and the perturbation robustness protocols.

Inclusivity, coverage and the geodesic-distance error are stand-in
definitions; their absolute values are only meaningful relative to each
other (trends across perturbations or ablations).
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyCloud, MissingCorrespondence, TooFewFrames, TooFewKeypoints
from .losses import _coords, _dmat, chamfer_mean, expected_geodesics
from .pcloud import (
    PointCloud,
    SequenceManifest,
    SequenceWindow,
    add_gaussian_noise,
    fps_indices,
    load_sequence,
    read_manifest,
)

DEFAULT_TAUS = tuple(round(0.01 * i, 2) for i in range(1, 11))
DEFAULT_DELTA = 0.05
COVERAGE_PAD = 1e-6


def t_con(kp_seq: Sequence) -> float:
    """Percent of keypoints whose nearest keypoint in the next frame has the same index."""
    if len(kp_seq) < 2:
        raise TooFewFrames("temporal consistency needs at least 2 frames")
    ks = [_coords(k) for k in kp_seq]
    hits, total = 0, 0
    for a, b in zip(ks[:-1], ks[1:]):
        d = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        hits += int(np.sum(np.argmin(d, axis=1) == np.arange(a.shape[0])))
        total += a.shape[0]
    return 100.0 * hits / total


def repeatability_errors(w_first, targets: Sequence, maps: Sequence, predicted: Sequence) -> np.ndarray:
    """Per-frame, per-keypoint distance between transferred and predicted keypoints.

    Frame-1 probabilities are carried to frame t through ``maps[t]`` (frame-1
    column index -> row of ``targets[t]``) and re-expected over frame-t
    coordinates.  Returns an array of shape (T-1, K) for frames 2..T.
    """
    w_first = np.asarray(w_first, dtype=np.float64)
    out = []
    for tgt, mp, pred in zip(targets[1:], maps[1:], predicted[1:]):
        transferred = w_first @ _coords(tgt)[np.asarray(mp)]
        out.append(np.linalg.norm(transferred - _coords(pred), axis=1))
    return np.array(out)


def pck_from_errors(errors: np.ndarray, taus: Sequence[float] = DEFAULT_TAUS) -> list[tuple[float, float]]:
    e = np.asarray(errors).ravel()
    return [(float(tau), 100.0 * float(np.mean(e < tau))) for tau in taus]


def pck(window: SequenceWindow, ws: Sequence, taus: Sequence[float] = DEFAULT_TAUS) -> list[tuple[float, float]]:
    """PCK curve: percent of keypoints over frames 2..T with repeatability error below tau."""
    if window.correspondences is None:
        raise MissingCorrespondence("PCK needs ground-truth correspondences")
    xs = window.coords()
    preds = [np.asarray(w) @ x for w, x in zip(ws, xs)]
    errors = repeatability_errors(ws[0], xs, window.maps_from_first(), preds)
    return pck_from_errors(errors, taus)


def inclusivity(kps, cloud, delta: float = DEFAULT_DELTA) -> float:
    """Percent of keypoints within ``delta`` of some cloud point."""
    k, x = _coords(kps), _coords(cloud)
    if x.shape[0] == 0:
        raise EmptyCloud("inclusivity needs a non-empty cloud")
    d = np.sqrt(np.min(np.sum((k[:, None, :] - x[None, :, :]) ** 2, axis=-1), axis=1))
    return 100.0 * float(np.mean(d <= delta))


def coverage_metric(kps, cloud) -> float:
    """Padded AABB volume of the keypoints relative to that of the cloud, in percent (capped at 100)."""
    k, x = _coords(kps), _coords(cloud)
    if k.shape[0] < 2:
        raise TooFewKeypoints("coverage needs at least 2 keypoints")
    vk = np.prod(k.max(axis=0) - k.min(axis=0) + COVERAGE_PAD)
    vx = np.prod(x.max(axis=0) - x.min(axis=0) + COVERAGE_PAD)
    return 100.0 * float(min(1.0, vk / vx))


def gd_err(ws: Sequence, ds: Sequence) -> float:
    """Mean absolute off-diagonal change of ``W D W^T`` between consecutive frames."""
    if len(ws) < 2:
        raise TooFewFrames("geodesic error needs at least 2 frames")
    gs = [expected_geodesics(w, d) for w, d in zip(ws, ds)]
    k = gs[0].shape[0]
    if k < 2:
        warnings.warn("gd_err is undefined for a single keypoint; reporting 0", RuntimeWarning, stacklevel=2)
        return 0.0
    off = ~np.eye(k, dtype=bool)
    return float(np.mean([np.mean(np.abs(a - b)[off]) for a, b in zip(gs[:-1], gs[1:])]))


# --------------------------------------------------------------------------
# protocols


@dataclass(frozen=True)
class Protocol:
    kind: str = "clean"  # clean | noise | fps
    value: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "Protocol":
        text = text.strip().lower()
        if text == "clean":
            return cls()
        kind, _, arg = text.partition(":")
        if kind == "noise" and arg:
            v = float(arg)
            if v < 0:
                raise ValueError("noise variance must be >= 0")
            return cls("noise", v)
        if kind == "fps" and arg:
            r = float(arg.lstrip("x"))
            if r < 1 or r != int(r):
                raise ValueError("fps ratio must be an integer >= 1")
            return cls("fps", float(int(r)))
        raise ValueError(f"unknown protocol {text!r}; expected clean, noise:<var> or fps:<ratio>")

    def __str__(self) -> str:
        if self.kind == "clean":
            return "clean"
        return f"noise:{self.value:g}" if self.kind == "noise" else f"fps:{int(self.value)}"


@dataclass
class MetricsReport:
    protocol: str
    inclusivity: float
    coverage: float
    t_con: float
    pck: list
    recon_err: float
    gd_err: Optional[float]
    n_frames: int = 0
    n_points: int = 0
    delta: float = DEFAULT_DELTA
    notes: list = field(default_factory=list)

    def pck_at(self, tau: float) -> float:
        for t, v in self.pck:
            if abs(t - tau) < 1e-12:
                return v
        raise KeyError(tau)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["pck"] = [{"tau": t, "pck": v} for t, v in self.pck]
        return doc


def _frame_geodesics(manifest: Optional[SequenceManifest], frames: list[PointCloud], k: int = 5):
    from .geodesy import cache_read, geodesics

    if manifest is not None and manifest.geodesics:
        paths = [manifest.resolve(p) for p in manifest.geodesics]
        if all(p.exists() for p in paths):
            return [cache_read(p).d for p in paths]
    return [geodesics(f, k, retries=3)[0].d for f in frames]


def evaluate_sequence(
    params,
    seq: SequenceWindow,
    protocol: Protocol = Protocol(),
    ds: Optional[Sequence] = None,
    seed: int = 0,
    delta: float = DEFAULT_DELTA,
    taus: Sequence[float] = DEFAULT_TAUS,
) -> MetricsReport:
    """Apply the perturbation to every frame, run inference and assemble the report.

    Inclusivity and coverage are measured against the clean frame (the
    object surface).  The geodesic error uses the clean geodesics restricted
    to whichever points the model saw.
    """
    from .nnet import forward

    frames = list(seq.frames)
    n = frames[0].n
    inputs, sels, targets = [], [], []
    for t, f in enumerate(frames):
        if protocol.kind == "noise":
            noisy = add_gaussian_noise(f, protocol.value, seed + t)
            inputs.append(noisy)
            sels.append(np.arange(n))
            targets.append(noisy.points)
        elif protocol.kind == "fps":
            m = max(params.k, n // int(protocol.value))
            sel = np.arange(n) if m >= n else fps_indices(f.points, m, 0)
            inputs.append(f.with_points(f.points[sel]))
            sels.append(sel)
            targets.append(f.points)
        else:
            inputs.append(f)
            sels.append(np.arange(n))
            targets.append(f.points)

    results = [forward(params, c) for c in inputs]
    kps = [r.keypoints for r in results]
    ws = [r.w for r in results]
    notes = []

    incl = float(np.mean([inclusivity(k, f, delta) for k, f in zip(kps, frames)]))
    cov = float(np.mean([coverage_metric(k, f) for k, f in zip(kps, frames)]))
    tc = t_con(kps) if len(frames) >= 2 else float("nan")
    recon = float(np.mean([chamfer_mean(c, r.reconstruction) for c, r in zip(inputs, results)]))

    curve: list = []
    if seq.correspondences is not None and len(frames) >= 2:
        maps = [m[sels[0]] for m in seq.maps_from_first()]
        errs = repeatability_errors(ws[0], targets, maps, kps)
        curve = pck_from_errors(errs, taus)
    else:
        notes.append("no ground-truth correspondences: PCK skipped")

    gde = None
    if ds is not None and len(frames) >= 2:
        sub = [_dmat(d)[np.ix_(s, s)] for d, s in zip(ds, sels)]
        if params.k < 2:
            notes.append("gd_err undefined for K=1")
        gde = gd_err(ws, sub)
    return MetricsReport(str(protocol), incl, cov, tc, curve, recon, gde, len(frames), inputs[0].n, delta, notes)


def evaluate(
    checkpoint,
    manifest,
    protocol="clean",
    seed: int = 0,
    delta: float = DEFAULT_DELTA,
    taus: Sequence[float] = DEFAULT_TAUS,
    with_geodesics: bool = True,
) -> MetricsReport:
    from .nnet import ModelParams, load_checkpoint

    params = checkpoint if isinstance(checkpoint, ModelParams) else load_checkpoint(checkpoint)
    if not isinstance(manifest, SequenceManifest):
        manifest = read_manifest(manifest)
    if isinstance(protocol, str):
        protocol = Protocol.parse(protocol)
    seq = load_sequence(manifest)
    ds = _frame_geodesics(manifest, list(seq.frames)) if with_geodesics else None
    return evaluate_sequence(params, seq, protocol, ds, seed, delta, taus)
