"""Per-frame token grids: merging, bilinear resampling, flattening and file IO."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .autodiff import ShapeError

MAGIC = b"TGRD"
_HEADER = struct.Struct("<4sIIIIB")


class Provenance(IntEnum):
    SEMANTIC = 0
    GEOMETRY = 1
    PARAMETER = 2


@dataclass(frozen=True)
class TokenGrid:
    """Dense ``(frames, height, width, channels)`` feature map."""

    values: np.ndarray
    provenance: Provenance = Provenance.SEMANTIC
    patch_size: int = 1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4 or min(v.shape) < 1:
            raise ShapeError(f"token grid needs four positive extents, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("token grid contains non-finite values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width

    def replace(self, values: np.ndarray, patch_size: int | None = None) -> TokenGrid:
        return TokenGrid(values, self.provenance, self.patch_size if patch_size is None else patch_size)


def spatial_merge(grid: TokenGrid, m: int, pad: bool = False) -> TokenGrid:
    """Average each ``m x m`` block of tokens into one token.

    With ``pad`` the bottom/right edges are replicated up to a multiple of
    ``m``; otherwise non-divisible extents raise :class:`ShapeError`.
    """
    if m not in (1, 2, 4):
        raise ValueError(f"merge size must be 1, 2 or 4, got {m}")
    if m == 1:
        return grid
    v = grid.values
    n, h, w, c = v.shape
    if h % m or w % m:
        if not pad:
            raise ShapeError(f"grid {h}x{w} is not divisible by merge size {m}")
        v = np.pad(v, ((0, 0), (0, -h % m), (0, -w % m), (0, 0)), mode="edge")
        h, w = v.shape[1:3]
    # m = 4 is two rounds of 2x2 averaging; sums of equal values stay exact
    for _ in range(m.bit_length() - 1):
        v = ((v[:, 0::2, 0::2] + v[:, 0::2, 1::2]) + (v[:, 1::2, 0::2] + v[:, 1::2, 1::2])) / 4.0
    return grid.replace(v, grid.patch_size * m)


def _axis_weights(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, clamped to the valid sample range
    x = (np.arange(dst) + 0.5) * src / dst - 0.5
    x = np.clip(x, 0.0, src - 1)
    lo = np.floor(x).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, x - lo


def resample_geometry(geo: TokenGrid, target_h: int, target_w: int) -> TokenGrid:
    """Bilinearly resample every frame and channel onto a ``target_h x target_w`` grid."""
    if target_h < 1 or target_w < 1:
        raise ShapeError("target extents must be positive")
    v = geo.values
    if (target_h, target_w) == v.shape[1:3]:
        return geo.replace(v.copy())
    r0, r1, fr = _axis_weights(v.shape[1], target_h)
    c0, c1, fc = _axis_weights(v.shape[2], target_w)
    fr = fr[None, :, None, None]
    fc = fc[None, None, :, None]
    top = _lerp(v[:, r0][:, :, c0], v[:, r0][:, :, c1], fc)
    bottom = _lerp(v[:, r1][:, :, c0], v[:, r1][:, :, c1], fc)
    return geo.replace(_lerp(top, bottom, fr))


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    # exact when a == b, and clipped so rounding never leaves [a, b]
    return np.clip(a + (b - a) * t, np.minimum(a, b), np.maximum(a, b))


def flatten_tokens(grid: TokenGrid) -> np.ndarray:
    """Frame-major, row-major token sequence of shape ``(n * L, c)``."""
    return grid.values.reshape(grid.n * grid.tokens_per_frame, grid.channels).copy()


def unflatten_tokens(seq: np.ndarray, n: int, height: int, width: int,
                     provenance: Provenance = Provenance.SEMANTIC) -> TokenGrid:
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[0] != n * height * width:
        raise ShapeError(f"sequence of shape {seq.shape} cannot hold {n}x{height}x{width} tokens")
    return TokenGrid(seq.reshape(n, height, width, seq.shape[1]), provenance)


# ---------------------------------------------------------------- file formats


def write_grid(path: str | Path, grid: TokenGrid) -> None:
    n, h, w, c = grid.values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, h, w, c, int(grid.provenance)))
        fh.write(grid.values.astype("<f8").tobytes(order="C"))


def read_grid(path: str | Path) -> TokenGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, n, h, w, c, prov = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n * h * w * c:
        raise ValueError(f"{path}: expected {n * h * w * c} values, found {len(body) // 8}")
    values = np.frombuffer(body, dtype="<f8").reshape(n, h, w, c).astype(np.float64)
    return TokenGrid(values, Provenance(prov))


def write_channel_csv(path: str | Path, grid: TokenGrid, frame: int, channel: int = 0) -> None:
    """One frame, one channel as a plain CSV table with a column header row."""
    plane = grid.values[frame, :, :, channel]
    write_matrix_csv(path, plane)


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\r\n")
        out.writerow([f"col{j}" for j in range(matrix.shape[1])])
        for row in matrix:
            out.writerow([repr(float(x)) for x in row])


def read_matrix_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64)
