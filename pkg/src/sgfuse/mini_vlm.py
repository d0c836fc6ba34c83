"""A toy frame-local backbone with fusion layers, trained on synthetic retrieval.

Each token must predict a scalar stored only in channel 0 of the geometry
token at the same position of the same frame. The semantic tokens are noise
drawn from their own stream, so without fusion the target is unpredictable.
Backbone blocks are token-local residual MLPs, which keeps every prediction
a function of its own frame only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .export import load_arrays, save_arrays
from .flops import BYPASS_FRAMES, effective_merge
from .grid import Provenance, TokenGrid, flatten_tokens, resample_geometry, spatial_merge
from .planner import LayerPlan, explicit_plan, plan_layers
from .rng import stream
from .sgf import EPS_OUT_OF_DOMAIN, Mlp, SgfParams, sgf_forward, sgf_init

RELEVANT_FRACTION = 0.25


@dataclass
class MiniVlmConfig:
    frames: int = 4
    height: int = 2
    width: int = 2
    c: int = 16
    c_geo: int = 8
    d_k: int = 8
    n_layers: int = 4
    rho: float = 0.5
    mode: str = "centered"
    start_offset: float = 0.0
    end_buffer: float = 0.0
    selected: list[int] | None = None
    merge: int = 2
    bypass_threshold: int = BYPASS_FRAMES
    eps: float = EPS_OUT_OF_DOMAIN
    mlp_depth: int = 1
    seed: int = 0
    steps: int = 2000
    lr: float = 0.05
    log_every: int = 10
    eval_frames: int = 64
    cue_noise: float = 0.3
    ablate_sgf: bool = False

    def __post_init__(self):
        dims = (self.frames, self.height, self.width, self.c, self.c_geo, self.d_k, self.n_layers)
        if min(dims) < 1:
            raise ValueError(f"all dimensions must be positive: {dims}")
        if self.c_geo < 2:
            raise ValueError("geometry needs a target channel and at least one cue channel")
        if self.steps < 0 or self.lr < 0 or self.log_every < 1:
            raise ValueError("steps and lr must be non-negative, log_every positive")

    @property
    def tokens_per_frame(self) -> int:
        return self.height * self.width

    @property
    def merge_size(self) -> int:
        return effective_merge(self.merge, self.frames, self.bypass_threshold)

    def plan(self) -> LayerPlan:
        if self.ablate_sgf:
            return explicit_plan(self.n_layers, ())
        if self.selected is not None:
            return explicit_plan(self.n_layers, self.selected)
        return plan_layers(self.n_layers, self.rho, self.mode, self.end_buffer, self.start_offset)

    @classmethod
    def from_dict(cls, doc: dict) -> MiniVlmConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ToyBatch:
    semantic: TokenGrid      # pre-merge resolution
    geometry: TokenGrid      # (n, H', W', c_geo); channel 0 is the target
    relevance: np.ndarray    # (n, L) bool
    targets: np.ndarray      # (n, L)


def positional_code(height: int, width: int, dims: int) -> np.ndarray:
    """Fixed sinusoidal code of shape ``(height * width, dims)``, unit amplitude."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    rows, cols = rows.reshape(-1), cols.reshape(-1)
    feats = []
    k = 1
    while len(feats) < dims:
        for axis, extent in ((rows, height), (cols, width)):
            angle = 2.0 * math.pi * k * axis / max(extent, 2) / 2.0
            feats.extend([np.cos(angle), np.sin(angle)])
        k += 1
    return np.stack(feats[:dims], axis=1)


def toy_task_generate(config: MiniVlmConfig, seed: int, frames: int | None = None) -> ToyBatch:
    """Synthetic batch; ``frames`` overrides the configured frame count (merge size is unchanged)."""
    n = config.frames if frames is None else frames
    h, w = config.height, config.width
    length = h * w
    m = config.merge_size
    semantic = 0.1 * stream(seed, "toy/semantic").standard_normal((n, h * m, w * m, config.c))
    targets = stream(seed, "toy/targets").uniform(-1.0, 1.0, size=(n, length))

    mask_rng = stream(seed, "toy/relevance")
    n_rel = max(1, round(RELEVANT_FRACTION * length))
    relevance = np.zeros((n, length), dtype=bool)
    for i in range(n):
        relevance[i, mask_rng.choice(length, size=n_rel, replace=False)] = True

    cues = config.cue_noise * stream(seed, "toy/cue-noise").standard_normal((n, length, config.c_geo - 1))
    pattern = np.where(np.arange(config.c_geo - 1) % 2 == 0, 1.0, -1.0)
    cues[relevance] = pattern

    geometry = np.concatenate([targets[..., None], cues], axis=-1).reshape(n, h, w, config.c_geo)
    return ToyBatch(
        semantic=TokenGrid(semantic, Provenance.SEMANTIC),
        geometry=TokenGrid(geometry, Provenance.GEOMETRY),
        relevance=relevance,
        targets=targets,
    )


@dataclass
class BackboneBlock:
    up: Mlp
    down: Mlp

    @classmethod
    def init(cls, c: int, rng: np.random.Generator) -> BackboneBlock:
        return cls(Mlp.init(c, c, rng), Mlp.init(c, c, rng))

    def __call__(self, h: Tensor) -> Tensor:
        return ad.add(h, self.down(ad.gelu(self.up(h))))

    def parameters(self) -> list[Tensor]:
        return self.up.parameters() + self.down.parameters()


@dataclass
class MiniVlm:
    config: MiniVlmConfig
    blocks: list[BackboneBlock]
    fusion: dict[int, SgfParams]
    readout: Mlp
    pos_semantic: np.ndarray = field(repr=False, default=None)
    pos_geometry: np.ndarray = field(repr=False, default=None)

    @classmethod
    def init(cls, config: MiniVlmConfig) -> MiniVlm:
        plan = config.plan()
        blocks = [BackboneBlock.init(config.c, stream(config.seed, f"model/block{j}"))
                  for j in range(config.n_layers)]
        fusion = {j: sgf_init(config.c, config.c_geo, config.d_k, config.eps,
                              seed=_layer_seed(config.seed, j), mlp_depth=config.mlp_depth)
                  for j in plan.selected}
        readout = Mlp.init(config.c, 1, stream(config.seed, "model/readout"))
        model = cls(config, blocks, fusion, readout)
        model.pos_semantic = positional_code(config.height, config.width, config.c)
        model.pos_geometry = positional_code(config.height, config.width, config.c_geo - 1)
        return model

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for j, block in enumerate(self.blocks):
            for name, t in zip(("up.w", "up.b", "down.w", "down.b"), block.parameters()):
                out[f"block{j}.{name}"] = t
        for j, params in sorted(self.fusion.items()):
            for name, t in params.named_parameters().items():
                out[f"sgf{j}.{name}"] = t
        out["readout.w"], out["readout.b"] = self.readout.parameters()
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def without_fusion(self) -> MiniVlm:
        return MiniVlm(self.config, self.blocks, {}, self.readout, self.pos_semantic, self.pos_geometry)


def _layer_seed(seed: int, layer: int) -> int:
    return int(stream(seed, f"model/sgf{layer}").integers(2**63))


def prepare_inputs(model: MiniVlm, batch: ToyBatch) -> tuple[Tensor, TokenGrid]:
    """Merge the semantic grid into tokens and align geometry onto the same grid."""
    cfg = model.config
    merged = spatial_merge(batch.semantic, cfg.merge_size)
    if (merged.height, merged.width) != (cfg.height, cfg.width):
        raise ad.ShapeError(f"merged semantic grid {merged.height}x{merged.width} "
                            f"does not match {cfg.height}x{cfg.width}")
    length = cfg.tokens_per_frame
    tokens = flatten_tokens(merged) + np.tile(model.pos_semantic, (merged.n, 1))
    geo = resample_geometry(batch.geometry, cfg.height, cfg.width)
    vals = geo.values.reshape(geo.n, length, cfg.c_geo).copy()
    vals[..., 1:] += model.pos_geometry[None]
    geo = geo.replace(vals.reshape(geo.values.shape))
    return Tensor(tokens), geo


def forward(model: MiniVlm, batch: ToyBatch, capture_trace: bool = False):
    """Per-token predictions ``(n, L)``; with ``capture_trace`` also the per-layer traces."""
    h, geo = prepare_inputs(model, batch)
    traces = {}
    for j, block in enumerate(model.blocks):
        if j in model.fusion:
            h, trace = sgf_forward(h, geo, model.fusion[j], capture_trace)
            if capture_trace:
                traces[j] = trace
        h = block(h)
    pred = ad.reshape(model.readout(h), batch.targets.shape)
    return (pred, traces) if capture_trace else pred


def mse_loss(pred: Tensor, targets: np.ndarray) -> Tensor:
    return ad.mean_all(ad.square(ad.sub(pred, Tensor(targets))))


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass
class TrainResult:
    model: MiniVlm
    curve: list[tuple[int, float]]      # (step, held-out MSE)
    final_mse: float
    var_y: float
    alphas: dict[int, float]
    selectivity_margin: float
    heatmaps: np.ndarray                # (n, H', W') mean importance over fusion layers
    eval_batch: ToyBatch
    diverged_at: int | None = None


def batch_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(2**63))


def evaluate(model: MiniVlm, batch: ToyBatch) -> float:
    return float(mse_loss(forward(model, batch), batch.targets).data)


def importance_maps(model: MiniVlm, batch: ToyBatch) -> np.ndarray:
    """Importance scores averaged over fusion layers, shape ``(n, L)``; 0.5 without fusion."""
    _, traces = forward(model, batch, capture_trace=True)
    if not traces:
        return np.full(batch.targets.shape, 0.5)
    return np.mean([t.s_imp for t in traces.values()], axis=0)


def selectivity(scores: np.ndarray, relevance: np.ndarray) -> float:
    return float(scores[relevance].mean() - scores[~relevance].mean())


def train(config: MiniVlmConfig) -> TrainResult:
    """Plain gradient descent on fresh batches; the curve tracks a fixed held-out batch."""
    model = MiniVlm.init(config)
    params = model.parameters()
    eval_batch = toy_task_generate(config, batch_seed(config.seed, "eval"), config.eval_frames)
    curve: list[tuple[int, float]] = []
    diverged = None
    for step in range(config.steps + 1):
        if step % config.log_every == 0 or step == config.steps:
            mse = evaluate(model, eval_batch)
            curve.append((step, mse))
            if not math.isfinite(mse):
                diverged = step
                break
        if step == config.steps:
            break
        batch = toy_task_generate(config, batch_seed(config.seed, f"train/{step}"))
        loss = mse_loss(forward(model, batch), batch.targets)
        if not loss.is_valid():
            diverged = step
            break
        ad.backward(loss, params)
        ad.sgd_step(params, config.lr)

    scores = importance_maps(model, eval_batch) if diverged is None else np.full(eval_batch.targets.shape, np.nan)
    return TrainResult(
        model=model,
        curve=curve,
        final_mse=curve[-1][1],
        var_y=float(eval_batch.targets.var()),
        alphas={j: float(p.alpha.data) for j, p in model.fusion.items()},
        selectivity_margin=selectivity(scores, eval_batch.relevance) if model.fusion else 0.0,
        heatmaps=scores.reshape(-1, config.height, config.width),
        eval_batch=eval_batch,
        diverged_at=diverged,
    )


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: MiniVlm, directory: str | Path) -> None:
    arrays = {name: t.data for name, t in model.named_parameters().items()}
    manifest = {
        "config": model.config.to_dict(),
        "fusion_layers": {str(j): p.manifest() for j, p in sorted(model.fusion.items())},
    }
    save_arrays(directory, arrays, manifest)


def load_checkpoint(directory: str | Path) -> MiniVlm:
    arrays, manifest = load_arrays(directory)
    config = MiniVlmConfig.from_dict(manifest["config"])
    model = MiniVlm.init(config)
    named = model.named_parameters()
    if set(named) != set(arrays):
        raise ValueError("checkpoint parameters do not match the configured model")
    for name, t in named.items():
        t.data[...] = arrays[name]
    for j, entry in manifest["fusion_layers"].items():
        model.fusion[int(j)].eps = float(entry["eps"])
    return model
