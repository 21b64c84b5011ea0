"""Box refinement driven by the re-ID loss of a frozen embedding network.

Each iteration crops a batch of boxes through the ROI transform, embeds
them, scores softmax and/or proxy-triplet loss, backpropagates to the box
coordinates and takes an SGD-with-momentum step on (cx, cy, log w, log h).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import embednet, proxy, roi
from .evaluation import iou as box_iou
from .numgrid import derive_seed, make_rng

log = logging.getLogger(__name__)

LOSS_MODES = ("cls", "tri", "cls+tri")
LOG_MIN_SIZE = math.log(roi.MIN_SIZE)


class RefineError(RuntimeError):
    pass


@dataclass
class RefineConfig:
    iterations: int = 2000
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    base_lr: float = 0.0
    peak_lr: float = 5e-5
    final_lr: float = 5e-6
    warmup_iters: int = 500
    decay_after: int = 10_000
    margin: float = 0.5
    volume: int = 2
    loss: str = "cls+tri"
    negatives: str = proxy.NEG_TABLE
    # coordinate-space gains on top of the schedule: a pixel is not a network weight
    center_gain: float = 10_000.0
    size_gain: float = 5.0
    param_mode: str = "log"
    crop_h: int = roi.CROP_H
    crop_w: int = roi.CROP_W
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.peak_lr > self.final_lr > 0:
            raise ValueError("need peak_lr > final_lr > 0")
        if self.param_mode != "log":
            raise ValueError("only the log-size box parameterization is supported")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(iteration: int, cfg: RefineConfig | None = None) -> float:
    """Linear warmup to the peak rate, flat plateau, then a single step decay."""
    cfg = cfg or RefineConfig()
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration < cfg.warmup_iters:
        return cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * iteration / cfg.warmup_iters
    if iteration < cfg.decay_after:
        return cfg.peak_lr
    return cfg.final_lr


# -- box parameterization ---------------------------------------------------

def box_to_param(b: roi.BBox) -> np.ndarray:
    return np.array([(b.m1 + b.m2) / 2, (b.n1 + b.n2) / 2, math.log(b.width), math.log(b.height)])


def param_to_box(p) -> roi.BBox:
    cx, cy, lw, lh = p
    w, h = math.exp(lw), math.exp(lh)
    return roi.BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def box_grad_to_param(p, g_box) -> np.ndarray:
    """Chain ``dL/d(m1, n1, m2, n2)`` through the (cx, cy, log w, log h) map."""
    g1, g2, g3, g4 = g_box
    w, h = math.exp(p[2]), math.exp(p[3])
    return np.array([g1 + g3, g2 + g4, (g3 - g1) * w / 2, (g4 - g2) * h / 2])


def clamp_box(b: roi.BBox, shape) -> roi.BBox:
    h_img, w_img = shape[:2]
    m1 = min(max(b.m1, 0.0), w_img - 1 - roi.MIN_SIZE)
    n1 = min(max(b.n1, 0.0), h_img - 1 - roi.MIN_SIZE)
    m2 = min(max(b.m2, m1 + roi.MIN_SIZE), w_img - 1.0)
    n2 = min(max(b.n2, n1 + roi.MIN_SIZE), h_img - 1.0)
    return roi.BBox(m1, n1, m2, n2)


def perturb_boxes(gt_boxes, iou_range=(0.4, 0.7), rng=None, image_shape=None,
                  max_attempts: int = 10_000) -> list[roi.BBox]:
    """Jitter each box until its IoU with the original falls inside ``iou_range``."""
    lo, hi = iou_range
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"iou_range must lie in (0, 1], got {iou_range}")
    rng = rng if rng is not None else make_rng(0)
    out = []
    for gt in gt_boxes:
        if lo == 1.0:
            out.append(gt)
            continue
        p0 = box_to_param(gt)
        w, h = gt.width, gt.height
        for _ in range(max_attempts):
            d = rng.uniform(-1, 1, size=4) * np.array([0.35 * w, 0.35 * h, 0.5, 0.5])
            try:
                cand = param_to_box(p0 + d)
                if image_shape is not None:
                    cand = clamp_box(cand, image_shape)
            except roi.DegenerateBoxError:
                continue
            if lo <= box_iou(cand, gt) <= hi:
                out.append(cand)
                break
        else:
            raise RefineError(f"no perturbation of {gt.as_tuple()} within IoU {iou_range} "
                              f"after {max_attempts} attempts")
    return out


# -- loss through the whole chain -----------------------------------------------

@dataclass
class ChainResult:
    loss: float
    cls_loss: float
    tri_loss: float
    box_grads: np.ndarray  # (b, 4)
    embeddings: np.ndarray
    triplet: proxy.LossValue | None


def chain_loss(images, boxes, ids, net: embednet.EmbedNet, table: proxy.ProxyTable | None,
               loss: str = "cls+tri", margin: float = 0.5, negatives: str = proxy.NEG_TABLE,
               crop_hw=(roi.CROP_H, roi.CROP_W), need_grad: bool = True) -> ChainResult:
    """Re-ID loss of a batch of boxes and its gradient w.r.t. their coordinates."""
    H, W = crop_hw
    crops = [roi.crop(img, b, H, W) for img, b in zip(images, boxes)]
    emb, logits, cache = embednet.forward_batch(net, np.stack([c.V for c in crops]))
    ids = np.asarray(ids, dtype=np.int64)
    d_emb = np.zeros_like(emb)
    d_logits = np.zeros_like(logits)
    cls_loss = tri_loss = 0.0
    trip = None
    if loss in ("cls", "cls+tri"):
        cls_loss, d_logits = proxy.classification_loss(logits, ids)
    if loss in ("tri", "cls+tri") and table is not None and table.filled.any():
        try:
            trip = proxy.mine_and_loss(table, emb, ids, margin, negatives)
        except proxy.NoNegativeError:
            trip = None
        if trip is not None:
            tri_loss = trip.loss
            d_emb = trip.grads
    total = cls_loss + tri_loss
    grads = np.zeros((len(boxes), 4))
    if need_grad and total != 0.0:
        d_crops = embednet.backward_to_input(net, cache, d_emb, d_logits)
        for k, c in enumerate(crops):
            _, grads[k] = roi.crop_backward(c, d_crops[k], need_image_grad=False)
    return ChainResult(total, cls_loss, tri_loss, grads, emb, trip)


@dataclass
class RefineRecord:
    losses: list[float]
    mean_iou: list[float]
    lrs: list[float]
    box_iou: np.ndarray  # (iterations, n_boxes)
    final_boxes: list[roi.BBox]
    initial_boxes: list[roi.BBox]
    skipped_anchors: int = 0
    notes: list[str] = field(default_factory=list)


def refine_boxes(images, init_boxes, ids, net: embednet.EmbedNet, table: proxy.ProxyTable,
                 cfg: RefineConfig, gt_boxes=None) -> RefineRecord:
    """Refine ``init_boxes`` (one per entry of ``images``) under the re-ID loss.

    ``images[k]`` is the scene holding box ``k``; ``ids[k]`` its identity.
    ``table`` is updated in place. ``gt_boxes`` only feeds the IoU trace.
    """
    if not net.frozen:
        raise RefineError("refinement needs a frozen re-ID network")
    n = len(init_boxes)
    if n == 0:
        raise RefineError("nothing to refine")
    ids = np.asarray(ids, dtype=np.int64)
    initial = [clamp_box(b, img.shape) for b, img in zip(init_boxes, images)]
    boxes = list(initial)
    params = np.array([box_to_param(b) for b in boxes])
    vel = np.zeros_like(params)
    gains = np.array([cfg.center_gain, cfg.center_gain, cfg.size_gain, cfg.size_gain])
    decay_mask = np.array([0.0, 0.0, 1.0, 1.0])

    rng = make_rng(derive_seed(cfg.seed, 11))
    order = rng.permutation(n)
    pos = 0
    losses, ious, lrs = [], [], []
    iou_trace = np.zeros((cfg.iterations, n)) if gt_boxes is not None else np.zeros((cfg.iterations, 0))
    skipped = 0
    notes: list[str] = []
    warned_tri = False
    for it in range(cfg.iterations):
        if pos + cfg.batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + min(cfg.batch_size, n)]
        pos += len(idx)
        cur = [boxes[k] for k in idx]
        res = chain_loss([images[k] for k in idx], cur, ids[idx], net, table, cfg.loss,
                         cfg.margin, cfg.negatives, (cfg.crop_h, cfg.crop_w))
        if not np.isfinite(res.loss) or not np.all(np.isfinite(res.box_grads)):
            raise RefineError(f"non-finite loss at iteration {it}: {res.loss}")
        if res.triplet is not None:
            skipped += len(res.triplet.skipped)
        elif cfg.loss != "cls" and table.filled.any() and not warned_tri:
            notes.append(f"iteration {it}: no valid triplet, continuing on available losses")
            warned_tri = True
        lr = lr_at(it, cfg)
        for j, k in enumerate(idx):
            g = box_grad_to_param(params[k], res.box_grads[j]) + cfg.weight_decay * decay_mask * params[k]
            vel[k] = cfg.momentum * vel[k] + g
            new = params[k] - lr * gains * vel[k]
            new[2:] = np.maximum(new[2:], LOG_MIN_SIZE)
            # rebuild only on change, so a zero step is exact despite the log round trip
            if not np.array_equal(new, params[k]):
                params[k] = new
                boxes[k] = param_to_box(new)
        # table written after the loss is scored
        proxy.table_update(table, res.embeddings, ids[idx])
        losses.append(res.loss)
        lrs.append(lr)
        if gt_boxes is not None:
            iou_trace[it] = [box_iou(boxes[k], gt_boxes[k]) for k in range(n)]
            ious.append(float(iou_trace[it].mean()))
        else:
            ious.append(float("nan"))
    return RefineRecord(losses, ious, lrs, iou_trace, boxes, initial, skipped, notes)


# -- weight-space variant --------------------------------------------------------

HEAD_GRID = (4, 2)  # rows x cols of pooled color cells


def head_features(image, box: roi.BBox, grid=HEAD_GRID) -> np.ndarray:
    """Bias term plus mean color of each grid cell of a small crop of ``box``."""
    gh, gw = grid
    V = roi.crop(image, box, 4 * gh, 4 * gw).V
    cells = V.reshape(gh, 4, gw, 4, V.shape[2]).mean(axis=(1, 3))
    return np.concatenate([[1.0], cells.ravel() - 0.5])


@dataclass
class RefinerHead:
    """Linear map from initial-box features to (dcx/w, dcy/h, dlog w, dlog h)."""
    weights: np.ndarray  # (4, n_features)

    def offsets(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.weights.T

    def apply(self, box: roi.BBox, feats: np.ndarray) -> np.ndarray:
        p = box_to_param(box) + self.offsets(feats) * np.array([box.width, box.height, 1.0, 1.0])
        p[2:] = np.maximum(p[2:], LOG_MIN_SIZE)
        return p


def head_loss(head: RefinerHead, images, init_boxes, feats, ids, net, table, loss="cls+tri",
              margin=0.5, negatives=proxy.NEG_TABLE):
    """Chain loss of the head's boxes and its gradient w.r.t. ``head.weights``."""
    params = [head.apply(b, f) for b, f in zip(init_boxes, feats)]
    boxes = [param_to_box(p) for p in params]
    res = chain_loss(images, boxes, ids, net, table, loss, margin, negatives)
    grad = np.zeros_like(head.weights)
    for p, b, f, g in zip(params, init_boxes, feats, res.box_grads):
        g_off = box_grad_to_param(p, g) * np.array([b.width, b.height, 1.0, 1.0])
        grad += np.outer(g_off, f)
    return res, grad


def train_head(images, init_boxes, ids, net: embednet.EmbedNet, table: proxy.ProxyTable,
               cfg: RefineConfig, gain: float = 1.0) -> tuple[RefinerHead, list[float]]:
    """Fit a zero-initialized head under the re-ID loss with the box schedule.

    Same batching, momentum, warmup and table updates as :func:`refine_boxes`;
    only the free variables differ. ``gain`` scales the schedule.
    """
    if not net.frozen:
        raise RefineError("refinement needs a frozen re-ID network")
    boxes = [clamp_box(b, img.shape) for b, img in zip(init_boxes, images)]
    feats = np.array([head_features(img, b) for img, b in zip(images, boxes)])
    ids = np.asarray(ids, dtype=np.int64)
    head = RefinerHead(np.zeros((4, feats.shape[1])))
    vel = np.zeros_like(head.weights)
    rng = make_rng(derive_seed(cfg.seed, 12))
    n = len(boxes)
    order, pos = rng.permutation(n), 0
    losses = []
    for it in range(cfg.iterations):
        if pos + cfg.batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + min(cfg.batch_size, n)]
        pos += len(idx)
        res, grad = head_loss(head, [images[k] for k in idx], [boxes[k] for k in idx], feats[idx], ids[idx],
                              net, table, cfg.loss, cfg.margin, cfg.negatives)
        if not np.isfinite(res.loss):
            raise RefineError(f"non-finite loss at iteration {it}: {res.loss}")
        vel = cfg.momentum * vel + grad + cfg.weight_decay * head.weights
        head.weights -= lr_at(it, cfg) * gain * vel
        proxy.table_update(table, res.embeddings, ids[idx])
        losses.append(res.loss)
    return head, losses
