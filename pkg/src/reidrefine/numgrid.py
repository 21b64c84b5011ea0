"""Dense image grids, seeded RNG and a central-difference gradient checker.

Images are plain ``numpy`` arrays of shape ``(rows, cols, channels)`` in
float64, row-major and channel-interleaved. Pixel centers sit at integer
coordinates; ``x`` is the column index and ``y`` the row index.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

ZERO_PAD = "zero"
CLAMP = "clamp"


def new_grid(rows: int, cols: int, channels: int = 3, fill: float = 0.0) -> np.ndarray:
    return np.full((rows, cols, channels), float(fill), dtype=np.float64)


def as_grid(data, channels: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a finite float64 ``(rows, cols, channels)`` array."""
    g = np.asarray(data, dtype=np.float64)
    if g.ndim == 2:
        g = g[:, :, None]
    if g.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D grid, got shape {g.shape}")
    if channels is not None and g.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {g.shape[2]}")
    if not np.all(np.isfinite(g)):
        raise ValueError("grid contains non-finite values")
    return g


def flat_index(shape: tuple[int, int, int], row: int, col: int, ch: int) -> int:
    rows, cols, channels = shape
    return (row * cols + col) * channels + ch


def unflat_index(shape: tuple[int, int, int], idx: int) -> tuple[int, int, int]:
    _, cols, channels = shape
    pix, ch = divmod(idx, channels)
    row, col = divmod(pix, cols)
    return row, col, ch


def grid_get(g: np.ndarray, row: int, col: int, ch: int = 0, mode: str = ZERO_PAD) -> float:
    rows, cols, channels = g.shape
    if not 0 <= ch < channels:
        raise IndexError(f"channel {ch} out of range for {channels} channels")
    if 0 <= row < rows and 0 <= col < cols:
        return float(g[row, col, ch])
    if mode == ZERO_PAD:
        return 0.0
    if mode == CLAMP:
        return float(g[min(max(row, 0), rows - 1), min(max(col, 0), cols - 1), ch])
    raise ValueError(f"unknown border mode {mode!r}")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))


def derive_seed(seed: int, *tags: int) -> int:
    """Stable child seed for a (seed, tag...) path, independent of call order."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *tags])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def central_diff(fn, point, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``point``."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    shape = x.shape
    x = x.ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        fp = float(fn(x.reshape(shape)))
        x[i] = orig - step
        fm = float(fn(x.reshape(shape)))
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at component {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(shape)


def max_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max relative error over components where either side exceeds ``floor``."""
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a[mask] - n[mask]) / scale[mask]))


# -- PPM -------------------------------------------------------------------

def _tokens(data: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out: list[int] = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        out.append(int(data[start:pos]))
    return out, pos


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P3", b"P6"):
        raise ValueError(f"{path}: not a P3/P6 PPM file")
    (width, height, maxval), pos = _tokens(data, 3, 2)
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    count = width * height * 3
    if magic == b"P6":
        raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=pos + 1)
    else:
        vals, _ = _tokens(data, count, pos)
        raw = np.array(vals, dtype=np.int64)
    return raw.reshape(height, width, 3).astype(np.float64) / maxval


def to_bytes(img: np.ndarray) -> np.ndarray:
    g = as_grid(img)
    if g.shape[2] == 1:
        g = np.repeat(g, 3, axis=2)
    if g.shape[2] != 3:
        raise ValueError("PPM needs 1 or 3 channels")
    return np.rint(np.clip(g, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray, binary: bool = True) -> None:
    px = to_bytes(img)
    h, w, _ = px.shape
    if binary:
        Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())
        return
    lines = [f"P3\n{w} {h}\n255"]
    for row in px:
        lines.append(" ".join(str(v) for v in row.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")
