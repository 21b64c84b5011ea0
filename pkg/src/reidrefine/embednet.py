"""Small re-ID embedding network with hand-written forward/backward passes.

Architecture: two 3x3 stride-2 convolutions (8 then 16 channels, ReLU),
global average pooling and a linear projection to a ``d``-dimensional feature
``z``. The embedding is ``e = z / |z|``; identity logits are scaled cosines
between ``e`` and the unit-normalized classifier columns, so they stay
bounded and the softmax never fully saturates on off-center crops.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .numgrid import make_rng
from .proxy import classification_loss

MAGIC = b"EMB1"
COS_SCALE = 4.0
PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "proj_w", "proj_b", "cls_w")


class FrozenNetError(RuntimeError):
    pass


def _im2col(xp: np.ndarray, ho: int, wo: int) -> np.ndarray:
    """3x3 stride-2 patches of a padded batch -> (B, ho, wo, 3, 3, C)."""
    b, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, shape=(b, ho, wo, 3, 3, c),
                      strides=(s0, 2 * s1, 2 * s2, s1, s2, s3), writeable=False)


def conv_forward(x, w, bias):
    b, h, wd, c = x.shape
    ho, wo = (h + 1) // 2, (wd + 1) // 2
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp, ho, wo).reshape(b * ho * wo, 9 * c)
    out = cols @ w.reshape(9 * c, -1) + bias
    return out.reshape(b, ho, wo, -1), cols


def conv_backward(dout, x_shape, cols, w, need_params=True):
    b, h, wd, c = x_shape
    _, ho, wo, cout = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = db = None
    if need_params:
        dw = (cols.T @ d2).reshape(w.shape)
        db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(9 * c, cout).T).reshape(b, ho, wo, 3, 3, c)
    dxp = np.zeros((b, h + 2, wd + 2, c))
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2, :] += dcols[:, :, :, ki, kj, :]
    return dxp[:, 1:h + 1, 1:wd + 1, :], dw, db


@dataclass
class EmbedNet:
    params: dict[str, np.ndarray]
    input_shape: tuple[int, int, int] = (64, 32, 3)
    frozen: bool = False

    @property
    def n_ids(self) -> int:
        return self.params["cls_w"].shape[1]

    @property
    def dim(self) -> int:
        return self.params["proj_w"].shape[1]

    def freeze(self) -> "EmbedNet":
        self.frozen = True
        return self

    def copy(self) -> "EmbedNet":
        return EmbedNet({k: v.copy() for k, v in self.params.items()}, self.input_shape, self.frozen)


def init_net(n_ids: int, seed: int = 0, input_shape=(64, 32, 3), widths=(8, 16), dim: int = 32) -> EmbedNet:
    rng = make_rng(seed)
    c = input_shape[2]
    c1, c2 = widths

    def he(shape, fan_in):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    params = {
        "conv1_w": he((3, 3, c, c1), 9 * c),
        "conv1_b": np.zeros(c1),
        "conv2_w": he((3, 3, c1, c2), 9 * c1),
        "conv2_b": np.zeros(c2),
        "proj_w": rng.standard_normal((c2, dim)) * np.sqrt(1.0 / c2),
        "proj_b": np.zeros(dim),
        "cls_w": rng.standard_normal((dim, n_ids)) * np.sqrt(1.0 / dim),
    }
    return EmbedNet(params, tuple(input_shape))


@dataclass
class Cache:
    x_shape: tuple
    cols1: np.ndarray
    h1: np.ndarray
    cols2: np.ndarray
    h2: np.ndarray
    pooled: np.ndarray
    z: np.ndarray
    norm: np.ndarray
    emb: np.ndarray


def forward_batch(net: EmbedNet, crops: np.ndarray):
    """Forward a ``(B, H, W, C)`` batch; returns ``(embeddings, logits, cache)``."""
    x = np.asarray(crops, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != tuple(net.input_shape):
        raise ValueError(f"crop batch shape {x.shape[1:]} != {tuple(net.input_shape)}")
    p = net.params
    x = x - 0.5
    a1, cols1 = conv_forward(x, p["conv1_w"], p["conv1_b"])
    h1 = np.maximum(a1, 0.0)
    a2, cols2 = conv_forward(h1, p["conv2_w"], p["conv2_b"])
    h2 = np.maximum(a2, 0.0)
    pooled = h2.mean(axis=(1, 2))
    z = pooled @ p["proj_w"] + p["proj_b"]
    norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    emb = z / norm
    wnorm = np.linalg.norm(p["cls_w"], axis=0, keepdims=True)
    logits = COS_SCALE * emb @ (p["cls_w"] / wnorm)
    cache = Cache(x.shape, cols1, h1, cols2, h2, pooled, z, norm, emb)
    return emb, logits, cache


def forward(net: EmbedNet, crop: np.ndarray):
    emb, logits, cache = forward_batch(net, np.asarray(crop)[None])
    return emb[0], logits[0], cache


def _backward(net, cache, d_emb, d_logits, need_params):
    p = net.params
    d_emb = np.zeros_like(cache.emb) if d_emb is None else np.asarray(d_emb, dtype=np.float64).reshape(cache.emb.shape)
    d_logits = (np.zeros((cache.z.shape[0], net.n_ids)) if d_logits is None
                else np.asarray(d_logits, dtype=np.float64).reshape(cache.z.shape[0], -1))
    e = cache.emb
    wnorm = np.linalg.norm(p["cls_w"], axis=0, keepdims=True)
    wn = p["cls_w"] / wnorm
    d_emb = d_emb + COS_SCALE * d_logits @ wn.T
    # d(v/|v|)/dv = (I - u u^T) / |v|
    dz = (d_emb - e * np.sum(d_emb * e, axis=1, keepdims=True)) / cache.norm
    grads = {}
    if need_params:
        d_wn = COS_SCALE * e.T @ d_logits
        grads["cls_w"] = (d_wn - wn * np.sum(d_wn * wn, axis=0, keepdims=True)) / wnorm
        grads["proj_w"] = cache.pooled.T @ dz
        grads["proj_b"] = dz.sum(axis=0)
    dpooled = dz @ p["proj_w"].T
    b, ho, wo, _ = cache.h2.shape
    dh2 = np.broadcast_to(dpooled[:, None, None, :] / (ho * wo), cache.h2.shape)
    da2 = dh2 * (cache.h2 > 0)
    dh1, dw2, db2 = conv_backward(da2, cache.h1.shape, cache.cols2, p["conv2_w"], need_params)
    da1 = dh1 * (cache.h1 > 0)
    dx, dw1, db1 = conv_backward(da1, cache.x_shape, cache.cols1, p["conv1_w"], need_params)
    if need_params:
        grads.update(conv2_w=dw2, conv2_b=db2, conv1_w=dw1, conv1_b=db1)
    return dx, grads


def backward_to_input(net: EmbedNet, cache: Cache, d_emb=None, d_logits=None) -> np.ndarray:
    """Gradient of the loss w.r.t. the input crops; parameters are never touched."""
    if cache is None:
        raise ValueError("backward needs the cache of a matching forward call")
    dx, _ = _backward(net, cache, d_emb, d_logits, need_params=False)
    return dx


def backward_params(net: EmbedNet, cache: Cache, d_emb=None, d_logits=None) -> dict[str, np.ndarray]:
    if net.frozen:
        raise FrozenNetError("parameter gradients requested from a frozen network")
    _, grads = _backward(net, cache, d_emb, d_logits, need_params=True)
    return grads


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-2
    momentum: float = 0.9
    seed: int = 0


@dataclass
class PretrainReport:
    losses: list[float]
    train_accuracy: float


def accuracy(net: EmbedNet, crops: np.ndarray, labels: np.ndarray, chunk: int = 64) -> float:
    hits = 0
    for i in range(0, len(crops), chunk):
        _, logits, _ = forward_batch(net, crops[i:i + chunk])
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[i:i + chunk]))
    return hits / len(crops)


def pretrain(net: EmbedNet, crops, labels, cfg: PretrainConfig | None = None) -> tuple[EmbedNet, PretrainReport]:
    """Fit ``net`` (a trained copy is returned) on labelled crops with softmax loss."""
    cfg = cfg or PretrainConfig()
    if net.frozen:
        raise FrozenNetError("cannot pretrain a frozen network")
    crops = np.asarray(crops, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise ValueError("pretraining needs at least 2 identities")
    if np.any(counts < 2):
        raise ValueError("pretraining needs at least 2 crops per identity")
    net = net.copy()
    rng = make_rng(cfg.seed)
    vel = {k: np.zeros_like(v) for k, v in net.params.items()}
    losses = []
    order = rng.permutation(len(crops))
    pos = 0
    for _ in range(cfg.steps):
        if pos + cfg.batch_size > len(order):
            order = rng.permutation(len(crops))
            pos = 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        _, logits, cache = forward_batch(net, crops[idx])
        loss, dlog = classification_loss(logits, labels[idx])
        n = len(idx)
        grads = backward_params(net, cache, None, dlog / n)
        losses.append(loss / n)
        for k in PARAM_ORDER:
            vel[k] = cfg.momentum * vel[k] + grads[k]
            net.params[k] -= cfg.lr * vel[k]
    return net, PretrainReport(losses, accuracy(net, crops, labels))


def save_net(net: EmbedNet, path) -> None:
    arrays = [net.params[k] for k in PARAM_ORDER]
    header = [len(arrays) + 1, 3, *net.input_shape]
    for a in arrays:
        header += [a.ndim, *a.shape]
    body = np.concatenate([a.ravel() for a in arrays]).astype("<f8")
    Path(path).write_bytes(MAGIC + struct.pack(f"<{len(header)}i", *header) + body.tobytes())


def load_net(path) -> EmbedNet:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an EMB1 checkpoint")
    pos = 4

    def ints(n):
        nonlocal pos
        vals = struct.unpack_from(f"<{n}i", data, pos)
        pos += 4 * n
        return vals

    (count,) = ints(1)
    shapes = []
    for _ in range(count):
        (ndim,) = ints(1)
        shapes.append(ints(ndim))
    input_shape, shapes = shapes[0], shapes[1:]
    flat = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64)
    params, off = {}, 0
    for name, shape in zip(PARAM_ORDER, shapes):
        size = int(np.prod(shape))
        params[name] = flat[off:off + size].reshape(shape).copy()
        off += size
    if off != flat.size:
        raise ValueError(f"{path}: payload size mismatch")
    return EmbedNet(params, tuple(input_shape))
