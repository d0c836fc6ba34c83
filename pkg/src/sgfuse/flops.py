"""Analytic FLOP counts for the backbone and the fusion layers.

Convention: one multiply-accumulate is two FLOPs; softmax, activations,
normalisation and bias additions are not counted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .planner import LayerPlan, explicit_plan, plan_layers
from .sgf import sgf_forward, sgf_init

BYPASS_FRAMES = 8


@dataclass
class ArchSpec:
    c: int
    n_layers: int
    ffn: int
    frames: int
    tokens_before_merge: int
    merge: int = 2
    c_geo: int | None = None
    d_k: int | None = None
    selected: tuple[int, ...] = ()
    text_tokens: int = 0
    mlp_depth: int = 1
    geometry_encoder_flops: int = 0

    def __post_init__(self):
        self.c_geo = self.c if self.c_geo is None else self.c_geo
        self.d_k = self.c if self.d_k is None else self.d_k
        self.selected = tuple(int(i) for i in self.selected)
        dims = (self.c, self.n_layers, self.ffn, self.frames, self.tokens_before_merge,
                self.merge, self.c_geo, self.d_k)
        if min(dims) < 1 or self.text_tokens < 0:
            raise ValueError(f"dimensions must be positive: {self}")
        if self.tokens_before_merge % (self.merge * self.merge):
            raise ValueError("tokens per frame must be divisible by merge**2")
        if any(not 0 <= i < self.n_layers for i in self.selected):
            raise ValueError("selected layers must lie in [0, n_layers)")

    @property
    def tokens_per_frame(self) -> int:
        return self.tokens_before_merge // (self.merge * self.merge)

    @property
    def visual_tokens(self) -> int:
        return self.frames * self.tokens_per_frame

    def with_plan(self, plan: LayerPlan) -> ArchSpec:
        if plan.n_layers != self.n_layers:
            raise ValueError("plan depth differs from the backbone depth")
        return self.replace(selected=plan.selected)

    def replace(self, **changes) -> ArchSpec:
        return ArchSpec(**{**asdict(self), **changes})


@dataclass
class FlopsReport:
    backbone_flops: int
    sgf_flops: int
    geometry_encoder_flops: int
    total_flops: int
    sgf_fraction: float
    assumptions: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def flops_backbone(spec: ArchSpec) -> int:
    t = spec.visual_tokens + spec.text_tokens
    c, f = spec.c, spec.ffn
    attention = 2 * (4 * t * c * c + 2 * t * t * c)
    feed_forward = 2 * (2 * t * c * f)
    return spec.n_layers * (attention + feed_forward)


def flops_sgf_layer(spec: ArchSpec) -> int:
    tv, n, length = spec.visual_tokens, spec.frames, spec.tokens_per_frame
    c, cg, dk = spec.c, spec.c_geo, spec.d_k
    if spec.mlp_depth == 1:
        projections = tv * c * dk + tv * cg * (dk + c) + tv * c
    else:
        # hidden width c in every two-layer MLP
        projections = tv * (c * c + c * dk) + tv * (cg * c + c * dk) + tv * (cg * c + c * c) + tv * (c * c + c)
    attention = n * (length * length * dk + length * length * c)
    return 2 * (projections + attention)


def flops_sgf(spec: ArchSpec) -> int:
    return len(spec.selected) * flops_sgf_layer(spec)


def overhead_report(spec: ArchSpec) -> FlopsReport:
    backbone = flops_backbone(spec)
    sgf = flops_sgf(spec)
    return FlopsReport(
        backbone_flops=backbone,
        sgf_flops=sgf,
        geometry_encoder_flops=spec.geometry_encoder_flops,
        total_flops=backbone + sgf + spec.geometry_encoder_flops,
        sgf_fraction=sgf / (backbone + sgf),
        assumptions={"c": spec.c, "c_geo": spec.c_geo, "d_k": spec.d_k, "ffn": spec.ffn,
                     "frames": spec.frames, "tokens_per_frame": spec.tokens_per_frame,
                     "merge": spec.merge, "text_tokens": spec.text_tokens,
                     "fused_layers": len(spec.selected), "n_layers": spec.n_layers,
                     "mlp_depth": spec.mlp_depth, "mac_flops": 2},
    )


def effective_merge(merge: int, frames: int, threshold: int = BYPASS_FRAMES) -> int:
    """Short clips keep merge size 2 even when a coarser merge is configured."""
    return 2 if merge > 2 and frames <= threshold else merge


def compare_table(spec: ArchSpec, frame_counts=(8, 16, 32), merges=(2, 4)) -> str:
    """CSV of FLOPs across frame counts and merge sizes; pre-merge patches per frame stay fixed."""
    patches = spec.tokens_before_merge
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\r\n")
    out.writerow(["frames", "merge", "effective_merge", "visual_tokens", "backbone_flops",
                  "sgf_flops", "total_flops", "sgf_fraction"])
    for frames in frame_counts:
        for m in merges:
            m_eff = effective_merge(m, frames)
            row_spec = spec.replace(frames=frames, merge=m_eff, tokens_before_merge=patches)
            rep = overhead_report(row_spec)
            out.writerow([frames, m, m_eff, row_spec.visual_tokens, rep.backbone_flops,
                          rep.sgf_flops, rep.total_flops, f"{rep.sgf_fraction:.6f}"])
    return buf.getvalue()


# ---------------------------------------------------------------- executed counts


def executed_backbone_macs(spec: ArchSpec, seed: int = 0) -> int:
    """Run one plain self-attention + feed-forward layer per backbone layer and count MACs."""
    rng = np.random.default_rng(seed)
    t = spec.visual_tokens + spec.text_tokens
    c, f = spec.c, spec.ffn

    def w(*shape):
        return ad.Tensor(rng.uniform(-0.1, 0.1, size=shape))

    x = w(t, c)
    with ad.count_macs() as box:
        for _ in range(spec.n_layers):
            q, k, v = x @ w(c, c), x @ w(c, c), x @ w(c, c)
            probs = ad.softmax_lastdim(q @ ad.transpose_last2(k))
            attn = (probs @ v) @ w(c, c)
            x = x + attn
            x = x + ad.gelu(x @ w(c, f)) @ w(f, c)
    return box[0]


def executed_sgf_macs(spec: ArchSpec, seed: int = 0) -> int:
    """Run the fusion layer on random inputs at every selected layer and count MACs."""
    rng = np.random.default_rng(seed)
    n, length = spec.frames, spec.tokens_per_frame
    h = ad.Tensor(rng.normal(size=(n * length, spec.c)))
    geo = ad.Tensor(rng.normal(size=(n, length, spec.c_geo)))
    with ad.count_macs() as box:
        for j in spec.selected:
            params = sgf_init(spec.c, spec.c_geo, spec.d_k, seed=seed + j, mlp_depth=spec.mlp_depth)
            h, _ = sgf_forward(h, geo, params)
    return box[0]


# ---------------------------------------------------------------- fixtures

def qwen25_7b_like(frames: int = 8, merge: int = 2, d_k: int | None = None) -> ArchSpec:
    """Shape of a 7B vision-language backbone with 32x32 patches per frame (16x16 after a 2x2 merge)."""
    plan = plan_layers(28, 0.5, "centered")
    return ArchSpec(c=3584, n_layers=28, ffn=18944, frames=frames, tokens_before_merge=1024,
                    merge=merge, c_geo=2048, d_k=d_k, selected=plan.selected)


def qwen25_3b_like(frames: int = 8, merge: int = 2, d_k: int | None = None) -> ArchSpec:
    plan = plan_layers(36, 0.5, "centered")
    return ArchSpec(c=2048, n_layers=36, ffn=11008, frames=frames, tokens_before_merge=1024,
                    merge=merge, c_geo=2048, d_k=d_k, selected=plan.selected)


def spec_from_json(doc: dict) -> ArchSpec:
    """Build a spec from JSON; a ``plan`` object (``rho``, ``mode``, ...) may replace ``selected``."""
    doc = dict(doc)
    plan_doc = doc.pop("plan", None)
    spec = ArchSpec(**doc)
    if plan_doc is not None:
        if isinstance(plan_doc, list):
            return spec.with_plan(explicit_plan(spec.n_layers, plan_doc))
        return spec.with_plan(plan_layers(spec.n_layers, **plan_doc))
    return spec
