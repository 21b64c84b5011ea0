"""Finite-difference checks of the hand-written backward passes.

``roi_check`` compares the ROI crop's image and box gradients against
central differences on random small cases. Boxes are redrawn until no
sampling coordinate lies within ``2 * step`` of a pixel center, so every
difference stays inside one bilinear cell. ``chain_check`` differentiates the
whole re-ID loss (softmax + proxy triplet) with respect to box corners.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import embednet, proxy, refine, roi
from .numgrid import central_diff, derive_seed, make_rng, max_rel_error
from .scenes import gaussian_blur

ROI_TOL = 1e-3
ROI_STEP = 1e-3
CHAIN_TOL = 1e-2
CHAIN_STEP = 1e-6
MAGNITUDE_FLOOR = 1e-6
SCENE_BLUR = 4.5  # default scene blur


@dataclass
class CheckReport:
    name: str
    cases: int
    tolerance: float
    step: float
    max_rel_error: float
    worst_case: int
    per_case: list[float]
    redrawn: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _clear_of_integers(s: roi.SourceGrid, margin: float) -> bool:
    for c in (s.xs, s.ys):
        frac = np.abs(c - np.rint(c))
        if frac.min() < margin:
            return False
    return True


def _random_roi_case(rng, img_shape=(10, 12, 3), crop_hw=(5, 4), margin=2 * ROI_STEP, tries=1000):
    h, w, _ = img_shape
    U = rng.uniform(0.0, 1.0, img_shape)
    wts = rng.normal(size=(*crop_hw, img_shape[2]))
    grid = roi.make_target_grid(*crop_hw)
    for _ in range(tries):
        # boxes may poke past the border so zero padding is exercised too
        m1, n1 = rng.uniform(-2.0, w - 4.0), rng.uniform(-2.0, h - 4.0)
        b = roi.BBox(m1, n1, m1 + rng.uniform(2.5, w / 1.5), n1 + rng.uniform(2.5, h / 1.5))
        if _clear_of_integers(roi.map_grid(roi.affine_from_box(b), grid), margin):
            return U, b, wts
    raise RuntimeError("could not draw a box clear of pixel centers")


def roi_check(seed: int = 0, cases: int = 100, step: float = ROI_STEP) -> tuple[CheckReport, CheckReport]:
    """Box-gradient and image-gradient reports for ``L = sum(w * V)``."""
    rng = make_rng(derive_seed(seed, 101))
    box_err, img_err = [], []
    for _ in range(cases):
        U, b, wts = _random_roi_case(rng)
        H, W, _ = wts.shape
        res = roi.crop(U, b, H, W)
        dU, db = roi.crop_backward(res, wts)

        def loss_box(c):
            return float(np.sum(wts * roi.crop(U, roi.BBox.of(c), H, W).V))

        def loss_img(u):
            return float(np.sum(wts * roi.crop(u, b, H, W).V))

        box_err.append(max_rel_error(db, central_diff(loss_box, b.as_array(), step), MAGNITUDE_FLOOR))
        img_err.append(max_rel_error(dU, central_diff(loss_img, U, step), MAGNITUDE_FLOOR))
    return (_report("roi_box_grad", box_err, ROI_TOL, step), _report("roi_image_grad", img_err, ROI_TOL, step))


def _report(name, errs, tol, step) -> CheckReport:
    worst = int(np.argmax(errs))
    return CheckReport(name, len(errs), tol, step, float(errs[worst]), worst, [float(e) for e in errs])


def _random_chain_case(rng, n_ids=8, batch=4, img_size=(96, 96)):
    net = embednet.init_net(n_ids, seed=int(rng.integers(2**31))).freeze()
    # smooth like a rendered scene; white noise makes bilinear kinks dominate the differences
    img = gaussian_blur(rng.uniform(0.0, 1.0, (*img_size, 3)), SCENE_BLUR)
    boxes = []
    for _ in range(batch):
        bh = rng.uniform(40, 70)
        bw = bh * rng.uniform(0.4, 0.6)
        m1, n1 = rng.uniform(0, img_size[1] - bw), rng.uniform(0, img_size[0] - bh)
        boxes.append(roi.BBox(m1, n1, m1 + bw, n1 + bh))
    ids = rng.integers(n_ids, size=batch)
    table = proxy.table_init(n_ids, 2, net.dim)
    entries = rng.normal(size=table.entries.shape)
    table.entries[:] = entries / np.linalg.norm(entries, axis=2, keepdims=True)
    table.filled[:] = True
    return net, img, boxes, ids, table


def _straddles_kink(fn, point, step: float, tol: float) -> bool:
    """True when forward and backward slopes disagree, i.e. a ReLU or pixel
    boundary lies within ``step`` of ``point`` along some axis."""
    x = np.array(point, dtype=np.float64)
    f0 = fn(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        fwd = (fn(x + e) - f0) / step
        bwd = (f0 - fn(x - e)) / step
        scale = max(abs(fwd), abs(bwd))
        if scale > MAGNITUDE_FLOOR and abs(fwd - bwd) / scale > tol:
            return True
    return False


def chain_check(seed: int = 0, cases: int = 20, step: float = CHAIN_STEP, loss: str = "cls+tri",
                max_redraws: int = 50) -> CheckReport:
    """Analytic box gradient of the total re-ID loss against central differences.

    A case whose difference stencil straddles a kink is redrawn, the same
    policy the ROI check applies to pixel boundaries.
    """
    rng = make_rng(derive_seed(seed, 102))
    errs = []
    redraws = 0
    while len(errs) < cases:
        net, img, boxes, ids, table = _random_chain_case(rng)
        imgs = [img] * len(boxes)

        def total(flat):
            bs = [roi.BBox.of(r) for r in flat.reshape(-1, 4)]
            return refine.chain_loss(imgs, bs, ids, net, table, loss, need_grad=False).loss

        point = np.concatenate([b.as_array() for b in boxes])
        if _straddles_kink(total, point, step, CHAIN_TOL / 10):
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError("too many chain-check cases sit on a kink")
            continue
        res = refine.chain_loss(imgs, boxes, ids, net, table, loss)
        errs.append(max_rel_error(res.box_grads.ravel(), central_diff(total, point, step), MAGNITUDE_FLOOR))
    report = _report(f"chain_box_grad[{loss}]", errs, CHAIN_TOL, step)
    report.redrawn = redraws
    return report


def run_all(seed: int = 0, roi_cases: int = 100, chain_cases: int = 20) -> list[CheckReport]:
    return [*roi_check(seed, roi_cases), chain_check(seed, chain_cases)]
