"""Spatial-grounded fusion: frame-strict, importance-gated cross-attention.

Semantic hidden states of each frame query the geometry tokens of the same
frame only. A sigmoid gate scores every token from the semantic state, the
score enters the logits as a key-side bias ``log(score + eps)``, and the
attention output is added back through ``tanh(alpha)`` with ``alpha``
starting at zero, so a fresh layer is an exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .export import write_pgm
from .grid import TokenGrid, write_matrix_csv
from .rng import stream

EPS_OUT_OF_DOMAIN = 1e-6
EPS_IN_DOMAIN = 0.1


@dataclass
class Mlp:
    """Affine map, or affine -> GELU -> affine when two layers are given."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator, depth: int = 1,
             hidden: int | None = None) -> Mlp:
        if depth not in (1, 2):
            raise ValueError("MLP depth must be 1 or 2")
        widths = [c_in, c_out] if depth == 1 else [c_in, hidden or c_out, c_out]
        weights, biases = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            bound = 1.0 / math.sqrt(a)
            weights.append(ad.parameter(rng.uniform(-bound, bound, size=(a, b))))
            biases.append(ad.parameter(np.zeros(b)))
        return cls(weights, biases)

    @property
    def c_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def c_out(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.linear(x, self.weights[0], self.biases[0])
        for w, b in zip(self.weights[1:], self.biases[1:]):
            x = ad.linear(ad.gelu(x), w, b)
        return x

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]


@dataclass
class SgfParams:
    query: Mlp
    key: Mlp
    value: Mlp
    gate: Mlp
    alpha: Tensor
    eps: float = EPS_OUT_OF_DOMAIN

    @property
    def c(self) -> int:
        return self.query.c_in

    @property
    def c_geo(self) -> int:
        return self.key.c_in

    @property
    def d_k(self) -> int:
        return self.query.c_out

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for group in ("query", "key", "value", "gate"):
            mlp: Mlp = getattr(self, group)
            for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
                out[f"{group}.w{i}"] = w
                out[f"{group}.b{i}"] = b
        out["alpha"] = self.alpha
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def manifest(self) -> dict:
        return {"c": self.c, "c_geo": self.c_geo, "d_k": self.d_k, "eps": self.eps,
                "alpha": float(self.alpha.data), "mlp_depth": self.query.depth}


def sgf_init(c: int, c_geo: int, d_k: int, eps: float = EPS_OUT_OF_DOMAIN, seed: int = 0,
             mlp_depth: int = 1) -> SgfParams:
    if min(c, c_geo, d_k) < 1:
        raise ValueError(f"dimensions must be positive: c={c}, c_geo={c_geo}, d_k={d_k}")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    hidden = c
    return SgfParams(
        query=Mlp.init(c, d_k, stream(seed, "sgf/query"), mlp_depth, hidden),
        key=Mlp.init(c_geo, d_k, stream(seed, "sgf/key"), mlp_depth, hidden),
        value=Mlp.init(c_geo, c, stream(seed, "sgf/value"), mlp_depth, hidden),
        gate=Mlp.init(c, 1, stream(seed, "sgf/gate"), mlp_depth, hidden),
        alpha=ad.parameter(0.0, name="alpha"),
        eps=float(eps),
    )


@dataclass
class AttentionTrace:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    s_imp: np.ndarray
    s_bias: np.ndarray
    weights: np.ndarray
    delta: np.ndarray
    grid_shape: tuple[int, int] | None = field(default=None)

    def score_maps(self) -> np.ndarray:
        """Importance scores reshaped to ``(n, H', W')``."""
        if self.grid_shape is None:
            return self.s_imp[:, None, :]
        return self.s_imp.reshape(-1, *self.grid_shape)


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def importance_scores(sh: Tensor, params: SgfParams) -> Tensor:
    sh = _tensor(sh)
    if sh.data.ndim != 3 or sh.shape[-1] != params.c:
        raise ShapeError(f"semantic states {sh.shape} do not match width {params.c}")
    n, length, _ = sh.shape
    return ad.sigmoid(ad.reshape(params.gate(sh), (n, length)))


def gating_bias(s_imp: Tensor, eps: float) -> Tensor:
    return ad.log_shifted(_tensor(s_imp), eps)


def frame_strict_attention(q: Tensor, k: Tensor, v: Tensor, s_bias: Tensor) -> tuple[Tensor, Tensor]:
    """Gated attention computed independently for each frame.

    ``s_bias[i, key]`` is added to the logit of every query of frame ``i``
    for that key. Returns ``(delta, weights)`` with shapes ``(n, L, c)`` and
    ``(n, L, L)``.
    """
    q, k, v, s_bias = map(_tensor, (q, k, v, s_bias))
    if q.data.ndim != 3 or k.shape != q.shape or v.data.ndim != 3 or v.shape[:2] != q.shape[:2]:
        raise ShapeError(f"incompatible attention inputs q={q.shape} k={k.shape} v={v.shape}")
    n, length, d_k = q.shape
    if s_bias.shape != (n, length):
        raise ShapeError(f"bias {s_bias.shape} does not match ({n}, {length})")
    logits = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / math.sqrt(d_k))
    logits = ad.add(logits, ad.reshape(s_bias, (n, 1, length)))
    weights = ad.softmax_lastdim(logits)
    return ad.matmul(weights, v), weights


def _geometry_tokens(geo) -> tuple[Tensor, tuple[int, int] | None]:
    if isinstance(geo, TokenGrid):
        vals = geo.values.reshape(geo.n, geo.tokens_per_frame, geo.channels)
        return Tensor(vals), (geo.height, geo.width)
    geo = _tensor(geo)
    if geo.data.ndim != 3:
        raise ShapeError(f"geometry tokens must be (n, L, c_geo), got {geo.shape}")
    return geo, None


def sgf_forward(h_img: Tensor, geo, params: SgfParams,
                capture_trace: bool = False) -> tuple[Tensor, AttentionTrace | None]:
    """Fuse geometry into the flattened image hidden states ``(n * L, c)``.

    ``geo`` is either a resampled geometry :class:`TokenGrid` or an
    ``(n, L, c_geo)`` tensor.
    """
    h_img = _tensor(h_img)
    geo_t, grid_shape = _geometry_tokens(geo)
    n, length, c_geo = geo_t.shape
    if h_img.data.ndim != 2 or h_img.shape[0] != n * length:
        raise ShapeError(f"{h_img.shape[0] if h_img.data.ndim else 0} image tokens, geometry has {n}x{length}")
    if h_img.shape[1] != params.c or c_geo != params.c_geo:
        raise ShapeError("hidden or geometry width does not match the layer parameters")

    sh = ad.reshape(h_img, (n, length, params.c))
    q = params.query(sh)
    k = params.key(geo_t)
    v = params.value(geo_t)
    s_imp = importance_scores(sh, params)
    s_bias = gating_bias(s_imp, params.eps)
    delta, weights = frame_strict_attention(q, k, v, s_bias)
    h_hat = ad.add(h_img, ad.mul(ad.tanh(params.alpha), ad.reshape(delta, (n * length, params.c))))

    trace = None
    if capture_trace:
        trace = AttentionTrace(q.numpy(), k.numpy(), v.numpy(), s_imp.numpy(), s_bias.numpy(),
                               weights.numpy(), delta.numpy(), grid_shape)
    return h_hat, trace


def gating_equivalence_check(logits: np.ndarray, s_imp: np.ndarray, eps: float) -> float:
    """Largest gap between additive log-bias attention and multiplicative reweighting."""
    logits = np.asarray(logits, dtype=np.float64)
    gate = np.asarray(s_imp, dtype=np.float64) + eps
    additive = logits + np.log(gate)[None, :]
    additive = np.exp(additive - additive.max(axis=-1, keepdims=True))
    additive /= additive.sum(axis=-1, keepdims=True)
    shift = logits.max(axis=-1, keepdims=True)
    reweighted = np.exp(logits - shift) * gate[None, :]
    reweighted /= reweighted.sum(axis=-1, keepdims=True)
    return float(np.max(np.abs(additive - reweighted)))


def export_trace(trace: AttentionTrace, directory: str | Path, prefix: str = "") -> list[Path]:
    """Write per-frame score heatmaps (CSV + PGM) and attention matrices (CSV)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, plane in enumerate(trace.score_maps()):
        for suffix, writer in ((".csv", write_matrix_csv), (".pgm", write_pgm)):
            path = directory / f"{prefix}heatmap_frame{i}{suffix}"
            writer(path, plane)
            written.append(path)
        path = directory / f"{prefix}attention_frame{i}.csv"
        write_matrix_csv(path, trace.weights[i])
        written.append(path)
    return written
