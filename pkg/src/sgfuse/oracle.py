"""Slow scalar-loop reference implementations for the test suite.

Nothing here imports from the rest of the package; each routine is written
from the defining formula with explicit loops over plain Python floats or
numpy scalars.
"""

from __future__ import annotations

import math
from fractions import Fraction


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    p = len(b[0])
    out = [[0.0] * p for _ in range(m)]
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(k):
                acc += float(a[i][t]) * float(b[t][j])
            out[i][j] = acc
    return out


def naive_softmax(row):
    top = max(row)
    ex = [math.exp(x - top) for x in row]
    total = sum(ex)
    return [e / total for e in ex]


def naive_attention(q, k, v, bias, scale):
    """Single-frame attention: one query row at a time, bias added per key."""
    out = []
    for qi in q:
        logits = []
        for kj, bj in zip(k, bias):
            dot = 0.0
            for a, b in zip(qi, kj):
                dot += float(a) * float(b)
            logits.append(dot * scale + float(bj))
        w = naive_softmax(logits)
        row = [0.0] * len(v[0])
        for wj, vj in zip(w, v):
            for c in range(len(row)):
                row[c] += wj * float(vj[c])
        out.append(row)
    return out


def finite_diff_grad(loss_fn, params, h=1e-5):
    """Central differences ``(f(p + h) - f(p - h)) / 2h`` for every entry.

    ``params`` are numpy arrays that ``loss_fn`` reads; they are perturbed in
    place and restored.
    """
    grads = []
    for p in params:
        flat = p.reshape(-1)
        g = [0.0] * flat.size
        for i in range(flat.size):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(loss_fn())
            flat[i] = orig - h
            down = float(loss_fn())
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def naive_bilinear(src, target_h, target_w):
    """Half-pixel-centre bilinear resampling of a nested ``[frame][row][col][chan]`` list."""
    out = []
    for frame in src:
        sh, sw, nc = len(frame), len(frame[0]), len(frame[0][0])
        fo = []
        for r in range(target_h):
            y = (r + 0.5) * sh / target_h - 0.5
            y = min(max(y, 0.0), sh - 1.0)
            y0 = int(math.floor(y))
            y1 = min(y0 + 1, sh - 1)
            fy = y - y0
            row = []
            for col in range(target_w):
                x = (col + 0.5) * sw / target_w - 0.5
                x = min(max(x, 0.0), sw - 1.0)
                x0 = int(math.floor(x))
                x1 = min(x0 + 1, sw - 1)
                fx = x - x0
                px = []
                for ch in range(nc):
                    a = frame[y0][x0][ch]
                    b = frame[y0][x1][ch]
                    c = frame[y1][x0][ch]
                    d = frame[y1][x1][ch]
                    top = a * (1 - fx) + b * fx
                    bottom = c * (1 - fx) + d * fx
                    px.append(top * (1 - fy) + bottom * fy)
                row.append(px)
            fo.append(row)
        out.append(fo)
    return out


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def expected_plan_count(n_layers, rho, mode, end_buffer=0.0, start_offset=0.0):
    """Layer count by exact rational arithmetic and explicit enumeration."""
    r = Fraction(str(rho))
    want = _round_half_up(r * n_layers)
    if mode == "centered":
        allowed = list(range(n_layers))
    else:
        start = _round_half_up(Fraction(str(start_offset)) * n_layers)
        stop = n_layers - _round_half_up(Fraction(str(end_buffer)) * n_layers)
        allowed = [i for i in range(n_layers) if start <= i < stop]
    return min(want, len(allowed))

