"""Static artifact writers: 8-bit PGM heatmaps and array checkpoints."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .grid import Provenance, TokenGrid, read_grid, write_grid


def to_gray(scores: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to bytes with ``round(255 * v)``, halves rounded up."""
    scaled = np.floor(255.0 * np.clip(scores, 0.0, 1.0) + 0.5)
    return scaled.astype(np.uint8)


def write_pgm(path: str | Path, scores: np.ndarray) -> None:
    img = to_gray(np.atleast_2d(scores))
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header is four whitespace separated tokens: magic, width, height, maxval
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def save_arrays(directory: str | Path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Write each array as a TGRD container plus ``manifest.json`` describing shapes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        shapes[name] = list(arr.shape)
        flat = arr.reshape(1, 1, 1, max(arr.size, 1)) if arr.ndim < 2 else arr.reshape(1, 1, -1, arr.shape[-1])
        write_grid(directory / f"{name}.tgrd", TokenGrid(flat, Provenance.PARAMETER))
    body = dict(manifest, arrays=shapes)
    (directory / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def load_arrays(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {}
    for name, shape in manifest["arrays"].items():
        grid = read_grid(directory / f"{name}.tgrd")
        arrays[name] = grid.values.reshape(shape)
    return arrays, manifest
