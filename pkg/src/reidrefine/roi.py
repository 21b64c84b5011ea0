"""Differentiable ROI crop: box -> affine map -> sampling grid -> bilinear sample.

A box ``(m1, n1, m2, n2)`` maps the normalized target square ``[-1, 1]^2``
onto its own corners, so that::

    A = 0.5 * [[m2 - m1, 0, m2 + m1],
               [0, n2 - n1, n2 + n1]]

Sampling uses zero padding outside the image. The backward pass returns
gradients with respect to both the source image and the four coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CROP_H = 64
CROP_W = 32
MIN_SIZE = 2.0


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    m1: float
    n1: float
    m2: float
    n2: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in self.as_tuple()):
            raise DegenerateBoxError(f"non-finite box {self.as_tuple()}")
        if self.m2 - self.m1 < MIN_SIZE or self.n2 - self.n1 < MIN_SIZE:
            raise DegenerateBoxError(f"box {self.as_tuple()} is narrower than {MIN_SIZE} px")

    @classmethod
    def of(cls, coords) -> "BBox":
        m1, n1, m2, n2 = (float(c) for c in coords)
        return cls(m1, n1, m2, n2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.m1, self.n1, self.m2, self.n2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def width(self) -> float:
        return self.m2 - self.m1

    @property
    def height(self) -> float:
        return self.n2 - self.n1


@dataclass(frozen=True)
class TargetGrid:
    H: int
    W: int
    xt: np.ndarray  # (H, W)
    yt: np.ndarray  # (H, W)

    @property
    def points(self) -> np.ndarray:
        return np.stack([self.xt.ravel(), self.yt.ravel()], axis=1)


@dataclass(frozen=True)
class SourceGrid:
    xs: np.ndarray  # (H, W) pixel columns
    ys: np.ndarray  # (H, W) pixel rows
    target: TargetGrid


@dataclass
class CropResult:
    V: np.ndarray
    source: SourceGrid
    image: np.ndarray
    x0: np.ndarray
    y0: np.ndarray
    wx: np.ndarray
    wy: np.ndarray


def affine_from_box(b: BBox) -> np.ndarray:
    if not isinstance(b, BBox):
        b = BBox.of(b)
    return 0.5 * np.array(
        [[b.m2 - b.m1, 0.0, b.m2 + b.m1],
         [0.0, b.n2 - b.n1, b.n2 + b.n1]],
        dtype=np.float64,
    )


_TARGET_CACHE: dict[tuple[int, int], TargetGrid] = {}


def make_target_grid(H: int, W: int) -> TargetGrid:
    if H < 2 or W < 2:
        raise ValueError(f"target grid needs H, W >= 2, got {H}x{W}")
    key = (H, W)
    grid = _TARGET_CACHE.get(key)
    if grid is None:
        xs = -1.0 + 2.0 * np.arange(W) / (W - 1)
        ys = -1.0 + 2.0 * np.arange(H) / (H - 1)
        xt, yt = np.meshgrid(xs, ys)
        xt.setflags(write=False)
        yt.setflags(write=False)
        grid = _TARGET_CACHE[key] = TargetGrid(H, W, xt, yt)
    return grid


def map_grid(A: np.ndarray, t: TargetGrid) -> SourceGrid:
    A = np.asarray(A, dtype=np.float64)
    xs = A[0, 0] * t.xt + A[0, 1] * t.yt + A[0, 2]
    ys = A[1, 0] * t.xt + A[1, 1] * t.yt + A[1, 2]
    return SourceGrid(xs, ys, t)


def _gather(U: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w, _ = U.shape
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    vals = U[np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)]
    return vals * inside[..., None]


def sample_crop(U: np.ndarray, s: SourceGrid, H: int | None = None, W: int | None = None) -> CropResult:
    if H is not None and W is not None and s.xs.shape != (H, W):
        raise ValueError(f"source grid shape {s.xs.shape} != ({H}, {W})")
    fx = np.floor(s.xs)
    fy = np.floor(s.ys)
    wx = (s.xs - fx)[..., None]
    wy = (s.ys - fy)[..., None]
    x0 = fx.astype(np.int64)
    y0 = fy.astype(np.int64)
    v00 = _gather(U, y0, x0)
    v01 = _gather(U, y0, x0 + 1)
    v10 = _gather(U, y0 + 1, x0)
    v11 = _gather(U, y0 + 1, x0 + 1)
    V = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)
    return CropResult(V, s, U, x0, y0, wx, wy)


def crop(U: np.ndarray, b: BBox, H: int = CROP_H, W: int = CROP_W) -> CropResult:
    """Forward pass of the ROI transform for one box."""
    return sample_crop(U, map_grid(affine_from_box(b), make_target_grid(H, W)), H, W)


def _scatter(dU: np.ndarray, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray) -> None:
    h, w, c = dU.shape
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    flat = (rows[inside] * w + cols[inside])
    dflat = dU.reshape(h * w, c)
    for ch in range(c):
        dflat[:, ch] += np.bincount(flat, weights=vals[inside][:, ch], minlength=h * w)


def crop_backward(cache: CropResult, dL_dV: np.ndarray, need_image_grad: bool = True):
    """Return ``(dL_dU, dL_db)``; ``dL_dU`` is ``None`` when not requested."""
    dL_dV = np.asarray(dL_dV, dtype=np.float64)
    if dL_dV.shape != cache.V.shape:
        raise ValueError(f"upstream gradient shape {dL_dV.shape} != crop shape {cache.V.shape}")
    U = cache.image
    x0, y0, wx, wy = cache.x0, cache.y0, cache.wx, cache.wy
    v00 = _gather(U, y0, x0)
    v01 = _gather(U, y0, x0 + 1)
    v10 = _gather(U, y0 + 1, x0)
    v11 = _gather(U, y0 + 1, x0 + 1)

    # spatial derivative of the crop, right/lower cell at integer coordinates
    dV_dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
    dV_dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
    gx = np.sum(dL_dV * dV_dx, axis=2)
    gy = np.sum(dL_dV * dV_dy, axis=2)
    t = cache.source.target
    dL_db = np.array([
        np.sum(gx * (1 - t.xt)) / 2,
        np.sum(gy * (1 - t.yt)) / 2,
        np.sum(gx * (1 + t.xt)) / 2,
        np.sum(gy * (1 + t.yt)) / 2,
    ])

    dL_dU = None
    if need_image_grad:
        dL_dU = np.zeros_like(U)
        _scatter(dL_dU, y0, x0, dL_dV * (1 - wy) * (1 - wx))
        _scatter(dL_dU, y0, x0 + 1, dL_dV * (1 - wy) * wx)
        _scatter(dL_dU, y0 + 1, x0, dL_dV * wy * (1 - wx))
        _scatter(dL_dU, y0 + 1, x0 + 1, dL_dV * wy * wx)
    return dL_dU, dL_db
