"""Keypoint network with hand-written backpropagation and Adam.

Layout (row-vector convention, ``y = x @ W + b``)::

    per point   3 -> 64 -> 128                  (ReLU)       enc1, enc2
    global      max over points of the 128 features
    per point   [local 128 | global 128] -> 128 (ReLU)       head1
                128 -> K scores                               head2
    W           softmax of the scores over the N points, one row per keypoint
    keypoints   W @ X
    decoder     3K -> 256 -> 256 (ReLU) -> 3M                 dec1, dec2, dec3

The encoder sees the cloud re-centred and scaled to unit extent, so the
predicted ``W`` does not depend on where the cloud sits or how large it is.
Keypoints and the reconstruction live in the caller's coordinates.

Checkpoint layout (little-endian)::

    b"GKPM" | u32 version | u32 K | u32 M | u32 n_layers
    n_layers x (u32 fan_in, u32 fan_out)
    float64 parameters: for each layer, weights (fan_in x fan_out, row-major) then biases
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadCheckpoint, InvalidDims, ShapeMismatch, StaleCache
from .pcloud import PointCloud, normalization_params

LAYERS = ("enc1", "enc2", "head1", "head2", "dec1", "dec2", "dec3")
CKPT_MAGIC = b"GKPM"
CKPT_VERSION = 1


@dataclass(frozen=True)
class Widths:
    enc1: int = 64
    enc2: int = 128
    head: int = 128
    dec: int = 256


def layer_dims(k: int, m: int, widths: Widths = Widths()) -> dict[str, tuple[int, int]]:
    return {
        "enc1": (3, widths.enc1),
        "enc2": (widths.enc1, widths.enc2),
        "head1": (2 * widths.enc2, widths.head),
        "head2": (widths.head, k),
        "dec1": (3 * k, widths.dec),
        "dec2": (widths.dec, widths.dec),
        "dec3": (widths.dec, 3 * m),
    }


@dataclass
class ModelParams:
    k: int
    m: int
    weights: dict
    biases: dict
    version: int = 0

    @property
    def dims(self) -> dict[str, tuple[int, int]]:
        return {name: self.weights[name].shape for name in LAYERS}

    def tensors(self):
        """(name, array) pairs in a fixed order, weights before biases per layer."""
        for name in LAYERS:
            yield f"{name}.w", self.weights[name]
            yield f"{name}.b", self.biases[name]

    def as_dict(self) -> dict:
        return dict(self.tensors())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.k,
            self.m,
            {n: w.copy() for n, w in self.weights.items()},
            {n: b.copy() for n, b in self.biases.items()},
            self.version,
        )

    def n_params(self) -> int:
        return sum(a.size for _, a in self.tensors())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.tensors())


def init_params(k: int, m: int, seed: int = 0, widths: Widths = Widths()) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if k < 2 or m < 1:
        raise InvalidDims(f"need k >= 2 and m >= 1, got k={k}, m={m}")
    rng = np.random.default_rng(seed)
    weights, biases = {}, {}
    for name, (fi, fo) in layer_dims(k, m, widths).items():
        bound = np.sqrt(6.0 / (fi + fo))
        weights[name] = rng.uniform(-bound, bound, size=(fi, fo))
        biases[name] = np.zeros(fo)
    return ModelParams(k, m, weights, biases)


def _coords(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ForwardCache:
    params: ModelParams
    version: int
    x: np.ndarray
    xin: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    pool_idx: np.ndarray
    feat: np.ndarray
    a3: np.ndarray
    h3: np.ndarray
    w: np.ndarray
    kp: np.ndarray
    z0: np.ndarray
    a4: np.ndarray
    z1: np.ndarray
    a5: np.ndarray
    z2: np.ndarray

    def pattern(self) -> tuple:
        """Every discrete choice made in the forward pass (ReLU gates, pool winners)."""
        return tuple(
            a.tobytes()
            for a in (self.a1 > 0, self.a2 > 0, self.pool_idx, self.a3 > 0, self.a4 > 0, self.a5 > 0)
        )


@dataclass
class ForwardResult:
    w: np.ndarray
    keypoints: np.ndarray
    reconstruction: np.ndarray
    cache: ForwardCache = field(repr=False)


def forward(params: ModelParams, cloud) -> ForwardResult:
    x = _coords(cloud)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ShapeMismatch(f"expected (N, 3) coordinates, got {x.shape}")
    n = x.shape[0]
    if n < params.k:
        raise ShapeMismatch(f"cloud has {n} points, fewer than K={params.k}")
    W, B = params.weights, params.biases
    centre, scale = normalization_params(x)
    xin = (x - centre) / scale

    a1 = xin @ W["enc1"] + B["enc1"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ W["enc2"] + B["enc2"]
    h2 = np.maximum(a2, 0.0)
    pool_idx = np.argmax(h2, axis=0)
    g = h2[pool_idx, np.arange(h2.shape[1])]
    feat = np.concatenate([h2, np.broadcast_to(g, h2.shape)], axis=1)
    a3 = feat @ W["head1"] + B["head1"]
    h3 = np.maximum(a3, 0.0)
    scores = h3 @ W["head2"] + B["head2"]
    w = _softmax_rows(scores.T)

    kp = w @ x
    z0 = kp.reshape(-1)
    a4 = z0 @ W["dec1"] + B["dec1"]
    z1 = np.maximum(a4, 0.0)
    a5 = z1 @ W["dec2"] + B["dec2"]
    z2 = np.maximum(a5, 0.0)
    out = z2 @ W["dec3"] + B["dec3"]
    recon = out.reshape(params.m, 3)

    cache = ForwardCache(params, params.version, x, xin, a1, h1, a2, h2, pool_idx, feat, a3, h3, w, kp, z0, a4, z1, a5, z2)
    return ForwardResult(w, kp, recon, cache)


def zero_grads(params: ModelParams) -> dict:
    return {name: np.zeros_like(a) for name, a in params.tensors()}


def backward(cache: ForwardCache, grad_w, grad_recon, grad_kp=None) -> dict:
    """Parameter gradients given upstream gradients w.r.t. W, the reconstruction and the keypoints.

    ``grad_w`` must already contain any keypoint-routed contribution from the
    losses; ``grad_kp`` is an optional extra keypoint gradient.  The decoder
    path back into the keypoints is added here.
    """
    params = cache.params
    if cache.version != params.version:
        raise StaleCache("parameters were updated after this forward pass")
    W = params.weights
    gw = np.asarray(grad_w, dtype=np.float64)
    gr = np.asarray(grad_recon, dtype=np.float64).reshape(-1)
    if gw.shape != cache.w.shape or gr.size != 3 * params.m:
        raise ShapeMismatch("upstream gradient shapes do not match the forward pass")
    grads = {}

    # decoder
    grads["dec3.w"] = np.outer(cache.z2, gr)
    grads["dec3.b"] = gr.copy()
    d5 = (W["dec3"] @ gr) * (cache.a5 > 0)
    grads["dec2.w"] = np.outer(cache.z1, d5)
    grads["dec2.b"] = d5
    d4 = (W["dec2"] @ d5) * (cache.a4 > 0)
    grads["dec1.w"] = np.outer(cache.z0, d4)
    grads["dec1.b"] = d4
    dkp = (W["dec1"] @ d4).reshape(cache.kp.shape)
    if grad_kp is not None:
        dkp = dkp + grad_kp

    # keypoints -> W -> softmax
    gw = gw + dkp @ cache.x.T
    w = cache.w
    ds = (w * (gw - np.sum(gw * w, axis=1, keepdims=True))).T  # (N, K)

    # head
    grads["head2.w"] = cache.h3.T @ ds
    grads["head2.b"] = ds.sum(axis=0)
    d3 = (ds @ W["head2"].T) * (cache.a3 > 0)
    grads["head1.w"] = cache.feat.T @ d3
    grads["head1.b"] = d3.sum(axis=0)
    dfeat = d3 @ W["head1"].T
    c = cache.h2.shape[1]
    dh2 = dfeat[:, :c].copy()
    dh2[cache.pool_idx, np.arange(c)] += dfeat[:, c:].sum(axis=0)

    # encoder
    d2 = dh2 * (cache.a2 > 0)
    grads["enc2.w"] = cache.h1.T @ d2
    grads["enc2.b"] = d2.sum(axis=0)
    d1 = (d2 @ W["enc2"].T) * (cache.a1 > 0)
    grads["enc1.w"] = cache.xin.T @ d1
    grads["enc1.b"] = d1.sum(axis=0)
    return grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(x: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, state: AdamState) -> None:
    """In-place bias-corrected Adam update of one array; ``state.step`` must already be advanced."""
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * (g * g)
    mhat = m / (1.0 - state.beta1**state.step)
    vhat = v / (1.0 - state.beta2**state.step)
    x -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


def adam_step(params: ModelParams, grads: dict, state: AdamState) -> tuple[ModelParams, AdamState]:
    """One Adam step, updating ``params`` and ``state`` in place (both are also returned)."""
    tensors = params.as_dict()
    if set(grads) != set(tensors):
        raise ShapeMismatch("gradient names do not match the parameters")
    for name, a in tensors.items():
        if grads[name].shape != a.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {grads[name].shape}, expected {a.shape}")
    state.step += 1
    for name, a in tensors.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(a)
            state.v[name] = np.zeros_like(a)
        adam_update(a, grads[name], state.m[name], state.v[name], state)
    params.version += 1
    if not params.is_finite():
        raise FloatingPointError("non-finite parameter after Adam update")
    return params, state


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    path = Path(path)
    dims = params.dims
    chunks = [
        CKPT_MAGIC,
        struct.pack("<IIII", CKPT_VERSION, params.k, params.m, len(LAYERS)),
        b"".join(struct.pack("<II", *dims[name]) for name in LAYERS),
    ]
    for _, a in params.tensors():
        chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelParams:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise BadCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CKPT_MAGIC:
        raise BadCheckpoint(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, k, m, n_layers = struct.unpack_from("<IIII", raw, 4)
        if version != CKPT_VERSION or n_layers != len(LAYERS):
            raise BadCheckpoint(f"{path}: unsupported version {version} / layer count {n_layers}")
        off = 20
        dims = []
        for _ in range(n_layers):
            dims.append(struct.unpack_from("<II", raw, off))
            off += 8
    except struct.error as exc:
        raise BadCheckpoint(f"{path}: truncated header") from exc
    expected = off + 8 * sum(fi * fo + fo for fi, fo in dims)
    if len(raw) != expected:
        raise BadCheckpoint(f"{path}: expected {expected} bytes, found {len(raw)}")
    weights, biases = {}, {}
    for name, (fi, fo) in zip(LAYERS, dims):
        weights[name] = np.frombuffer(raw, "<f8", fi * fo, off).reshape(fi, fo).astype(np.float64)
        off += 8 * fi * fo
        biases[name] = np.frombuffer(raw, "<f8", fo, off).astype(np.float64)
        off += 8 * fo
    params = ModelParams(k, m, weights, biases)
    widths = Widths(dims[0][1], dims[1][1], dims[2][1], dims[4][1])
    if params.dims != layer_dims(k, m, widths):
        raise BadCheckpoint(f"{path}: layer dimensions inconsistent with K={k}, M={m}")
    return params
