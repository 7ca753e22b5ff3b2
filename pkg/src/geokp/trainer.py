"""Training loop over sequence windows.

A batch is ``batch_windows`` windows whose parameter gradients are averaged
before a single Adam step.  Window order is reshuffled every epoch by a
generator seeded from the config, so a run is bitwise reproducible.

The per-epoch log is a CSV with the fixed header
``epoch,l_rec,l_cov,l_surf,l_geo,l_smt,total,val_total``; term columns are
raw (unweighted) values averaged over the epoch's training windows.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import MissingGeodesicCache, NonFiniteLoss, TooShortSequence
from .geodesy import GeodesicMatrix, cache_read
from .losses import TERMS, LossBreakdown, LossWeights, total_loss
from .nnet import (
    AdamState,
    ForwardResult,
    ModelParams,
    adam_step,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    zero_grads,
)
from .pcloud import (
    PointCloud,
    SequenceManifest,
    SequenceWindow,
    fps_indices,
    load_sequence,
    read_manifest,
)

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "l_rec", "l_cov", "l_surf", "l_geo", "l_smt", "total", "val_total"]


@dataclass
class TrainConfig:
    k_keypoints: int = 12
    m_recon: int = 512
    t_window: int = 4
    stride: int = 1
    batch_windows: int = 4
    epochs: int = 200
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    disable: tuple = ()
    seed: int = 0
    knn_k: int = 5
    n_points: int = 512
    jobs: int = 1
    out_dir: str = "run"
    train_manifests: list = field(default_factory=list)
    val_manifests: list = field(default_factory=list)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.disable = tuple(self.disable)
        for name in ("k_keypoints", "m_recon", "batch_windows", "stride", "knn_k", "n_points", "jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k_keypoints < 2:
            raise ValueError("k_keypoints must be >= 2")
        if self.t_window < 2:
            raise ValueError("t_window must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        bad = set(self.disable) - set(TERMS)
        if bad:
            raise ValueError(f"unknown loss terms to disable: {sorted(bad)}")

    @property
    def effective_weights(self) -> LossWeights:
        return self.weights.without(*self.disable) if self.disable else self.weights

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["disable"] = list(self.disable)
        return doc


class GeodesicStore:
    """Per-frame geodesic matrices read from cache files on first use."""

    def __init__(self, paths: Sequence[Path], subsets: Optional[Sequence] = None):
        self.paths = [Path(p) for p in paths]
        self.subsets = subsets
        self.reads = 0
        self._mem: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.paths)

    def get(self, i: int) -> np.ndarray:
        if i not in self._mem:
            if not self.paths[i].exists():
                raise MissingGeodesicCache(f"missing geodesic cache {self.paths[i]}")
            d = cache_read(self.paths[i]).d
            self.reads += 1
            if self.subsets is not None:
                sel = self.subsets[i]
                d = d[np.ix_(sel, sel)]
            self._mem[i] = d
        return self._mem[i]


class WindowGeodesics:
    """Lazy view of a window's slice of a :class:`GeodesicStore`."""

    def __init__(self, store: GeodesicStore, start: int, t: int):
        self.store, self.start, self.t = store, start, t

    def __len__(self):
        return self.t

    def __getitem__(self, i: int) -> np.ndarray:
        if not 0 <= i < self.t:
            raise IndexError(i)
        return self.store.get(self.start + i)


@dataclass
class TrainingWindow:
    window: SequenceWindow
    geodesics: Optional[WindowGeodesics]
    source: str = ""
    start: int = 0


def _subsample(frames: list[PointCloud], n_points: Optional[int]):
    if n_points is None or frames[0].n <= n_points:
        return frames, None
    subsets = [fps_indices(f.points, n_points, 0) for f in frames]
    return [f.with_points(f.points[s]) for f, s in zip(frames, subsets)], subsets


def make_windows(
    manifest,
    t_window: int,
    stride: int = 1,
    require_geodesics: bool = True,
    n_points: Optional[int] = None,
) -> list[TrainingWindow]:
    """Overlapping windows of ``t_window`` consecutive frames.

    Frames with more than ``n_points`` points are FPS-downsampled (start index
    0) and their geodesic matrices restricted to the kept points.  In that
    case ground-truth correspondences are dropped, since each frame keeps a
    different subset.
    """
    if not isinstance(manifest, SequenceManifest):
        manifest = read_manifest(manifest)
    n_frames = len(manifest.frames)
    if n_frames < t_window:
        raise TooShortSequence(f"{manifest.path}: {n_frames} frames is shorter than the window {t_window}")
    seq = load_sequence(manifest)
    frames, subsets = _subsample(list(seq.frames), n_points)
    corr = seq.correspondences if subsets is None else None

    store = None
    if manifest.geodesics:
        paths = [manifest.resolve(p) for p in manifest.geodesics]
        if len(paths) != n_frames:
            raise MissingGeodesicCache(f"{manifest.path}: {len(paths)} geodesic caches for {n_frames} frames")
        store = GeodesicStore(paths, subsets)
    if require_geodesics:
        if store is None:
            raise MissingGeodesicCache(f"{manifest.path}: no geodesic caches; run `geokp preprocess` first")
        missing = [str(p) for p in store.paths if not p.exists()]
        if missing:
            raise MissingGeodesicCache(f"missing geodesic caches: {missing[:3]}")

    out = []
    for start in range(0, n_frames - t_window + 1, stride):
        sl = slice(start, start + t_window)
        win = SequenceWindow(tuple(frames[sl]), None if corr is None else tuple(corr[start : start + t_window - 1]))
        geo = None if store is None else WindowGeodesics(store, start, t_window)
        out.append(TrainingWindow(win, geo, str(manifest.path), start))
    return out


def window_objective(
    params: ModelParams, tw: TrainingWindow, weights: LossWeights, with_grad: bool = True
) -> tuple[LossBreakdown, Optional[dict], list[ForwardResult]]:
    """Forward every frame, evaluate the total loss and backpropagate."""
    results = [forward(params, f) for f in tw.window.frames]
    ds = tw.geodesics if weights.needs_geodesics else None
    lb = total_loss(tw.window, [r.w for r in results], ds, [r.reconstruction for r in results], weights)
    if not with_grad:
        return lb, None, results
    grads = zero_grads(params)
    for r, gw, gr in zip(results, lb.grad_w, lb.grad_recon):
        for name, g in backward(r.cache, gw, gr).items():
            grads[name] += g
    return lb, grads, results


def _check_finite(lb: LossBreakdown, epoch: int) -> None:
    for name in TERMS:
        if not np.isfinite(lb.terms[name]):
            raise NonFiniteLoss(name, lb.terms[name], epoch)
    if not np.isfinite(lb.total):
        raise NonFiniteLoss("total", lb.total, epoch)


@dataclass
class TrainResult:
    params: ModelParams
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    history: list


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _load_windows(paths, cfg: TrainConfig, weights: LossWeights) -> list[TrainingWindow]:
    out = []
    for p in paths:
        out.extend(
            make_windows(p, cfg.t_window, cfg.stride, require_geodesics=weights.needs_geodesics, n_points=cfg.n_points)
        )
    return out


def evaluate_windows(params: ModelParams, windows: Sequence[TrainingWindow], weights: LossWeights) -> float:
    if not windows:
        return float("nan")
    return float(np.mean([window_objective(params, tw, weights, with_grad=False)[0].total for tw in windows]))


def train(
    config: TrainConfig,
    train_manifests: Optional[Sequence] = None,
    val_manifests: Optional[Sequence] = None,
    out_dir=None,
) -> TrainResult:
    cfg = config
    weights = cfg.effective_weights
    train_paths = list(train_manifests if train_manifests is not None else cfg.train_manifests)
    val_paths = list(val_manifests if val_manifests is not None else cfg.val_manifests)
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    windows = _load_windows(train_paths, cfg, weights)
    val_windows = _load_windows(val_paths, cfg, weights)
    if cfg.epochs > 0 and not windows:
        raise TooShortSequence("no training windows")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.k_keypoints, cfg.m_recon, cfg.seed)
    state = AdamState(lr=cfg.lr)
    best_path, last_path, log_path = out / "best.gkpm", out / "last.gkpm", out / "log.csv"
    save_checkpoint(params, best_path)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2) + "\n")

    history = []
    best = np.inf
    pool = ThreadPoolExecutor(cfg.jobs) if cfg.jobs > 1 else None
    try:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_HEADER)
            for epoch in range(1, cfg.epochs + 1):
                order = rng.permutation(len(windows))
                sums = dict.fromkeys(TERMS, 0.0)
                tot = 0.0
                for b0 in range(0, len(order), cfg.batch_windows):
                    batch = [windows[i] for i in order[b0 : b0 + cfg.batch_windows]]

                    def run(tw):
                        return window_objective(params, tw, weights)

                    results = list(pool.map(run, batch)) if pool else [run(tw) for tw in batch]
                    grads = zero_grads(params)
                    for lb, g, _ in results:
                        _check_finite(lb, epoch)
                        for name in TERMS:
                            sums[name] += lb.terms[name]
                        tot += lb.total
                        for name in grads:
                            grads[name] += g[name]
                    for name in grads:
                        grads[name] /= len(batch)
                    adam_step(params, grads, state)

                row = {name: sums[name] / len(windows) for name in TERMS}
                row["total"] = tot / len(windows)
                row["val_total"] = evaluate_windows(params, val_windows, weights) if val_windows else None
                row["epoch"] = epoch
                history.append(row)
                writer.writerow(
                    [epoch] + [_fmt(row[f"{n}"]) for n in TERMS] + [_fmt(row["total"]), _fmt(row["val_total"])]
                )
                fh.flush()
                score = row["val_total"] if row["val_total"] is not None else row["total"]
                if score < best:
                    best = score
                    save_checkpoint(params, best_path)
                log.info("epoch %d total %.6g val %s", epoch, row["total"], row["val_total"])
    finally:
        if pool:
            pool.shutdown()
    save_checkpoint(params, last_path)
    return TrainResult(params, best_path, last_path, log_path, history)


@dataclass
class Inference:
    keypoints: np.ndarray
    w: np.ndarray
    reconstruction: np.ndarray


def infer(checkpoint, cloud) -> Inference:
    """Keypoints for a single frame.  No geodesic information is used."""
    params = checkpoint if isinstance(checkpoint, ModelParams) else load_checkpoint(checkpoint)
    r = forward(params, cloud)
    return Inference(r.keypoints, r.w, r.reconstruction)
