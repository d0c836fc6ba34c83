"""Command line: ``sgfuse {plan,flops,gradcheck,train-toy,heatmap}``.

Exit codes: 0 success, 1 check failure or divergence, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .flops import compare_table, overhead_report, spec_from_json
from .mini_vlm import (MiniVlm, MiniVlmConfig, forward, load_checkpoint, mse_loss, save_checkpoint,
                       toy_task_generate, train)
from .export import write_pgm
from .grid import write_matrix_csv
from .oracle import finite_diff_grad
from .planner import plan_layers
from .sgf import export_trace, sgf_forward, sgf_init

log = logging.getLogger("sgfuse")

OUT_ENV = "GEOTHINKER_OUT"
SECTIONS = {"model", "plan", "flops", "io", "seed", "gradcheck"}
PLAN_KEYS = {"rho", "mode", "end_buffer", "start_offset", "selected"}
GRADCHECK_KEYS = {"h", "tol", "alpha", "sgf_alpha", "corrupt_backward"}

GRADCHECK_MODEL = dict(frames=2, height=2, width=2, c=6, c_geo=6, d_k=4, n_layers=3,
                       selected=[1], merge=1, eval_frames=2)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    plan: dict = field(default_factory=dict)
    flops: dict | None = None
    io: dict = field(default_factory=dict)
    seed: int | None = None
    gradcheck: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = set(doc) - SECTIONS
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(**doc)
        for name, allowed in (("plan", PLAN_KEYS), ("gradcheck", GRADCHECK_KEYS), ("io", {"out"})):
            extra = set(getattr(cfg, name)) - allowed
            if extra:
                raise ConfigError(f"unknown keys in '{name}': {sorted(extra)}")
        return cfg

    def model_config(self, base: dict | None = None, **overrides) -> MiniVlmConfig:
        doc = dict(base or {})
        doc.update(self.model)
        doc.update(self.plan)
        if self.seed is not None:
            doc["seed"] = self.seed
        doc.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return MiniVlmConfig.from_dict(doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def output_dir(args, cfg: RunConfig | None = None) -> Path:
    """``--out`` first, then the environment variable, then the config's ``io.out``."""
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    if cfg is not None and cfg.io.get("out"):
        return Path(cfg.io["out"])
    return Path("out")


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True)


# ---------------------------------------------------------------- plan / flops


def cmd_plan(args) -> int:
    try:
        plan = plan_layers(args.n_layers, args.rho, args.mode, args.end_buffer, args.start_offset)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(_dump(plan.to_json()))
    return 0


def cmd_flops(args) -> int:
    path = args.spec or args.config
    if path is None:
        print("error: flops needs a spec path", file=sys.stderr)
        return 2
    try:
        doc = json.loads(Path(path).read_text())
        if isinstance(doc, dict) and "flops" in doc:
            doc = doc["flops"]
        spec = spec_from_json(doc)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.compare:
        sys.stdout.write(compare_table(spec))
    else:
        print(_dump(overhead_report(spec).to_json()))
    return 0


# ---------------------------------------------------------------- gradcheck


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradcheck_groups(loss_fn, named: dict, h: float) -> dict[str, float]:
    params = list(named.values())
    loss = loss_fn()
    ad.backward(loss, params)
    analytic = {name: t.grad.copy() for name, t in named.items()}
    numeric = finite_diff_grad(lambda: float(loss_fn().data), [t.data for t in params], h)
    return {name: relative_error(analytic[name], num) for name, num in zip(named, numeric)}


def sgf_gradcheck(h: float = 1e-5, alpha: float = 0.5, seed: int = 0) -> dict[str, float]:
    """Sum-of-squares loss through one fusion layer on a 2-frame 2x2 grid."""
    rng = np.random.default_rng(seed)
    params = sgf_init(6, 6, 4, seed=seed)
    params.alpha.data[...] = alpha
    h_img = ad.Tensor(rng.normal(size=(8, 6)))
    geo = ad.Tensor(rng.normal(size=(2, 4, 6)))

    def loss_fn():
        out, _ = sgf_forward(h_img, geo, params)
        return ad.sum_all(ad.square(out))

    return gradcheck_groups(loss_fn, params.named_parameters(), h)


def model_gradcheck(config: MiniVlmConfig, h: float = 1e-5, alpha: float = 0.3) -> dict[str, float]:
    model = MiniVlm.init(config)
    for p in model.fusion.values():
        p.alpha.data[...] = alpha
    batch = toy_task_generate(config, config.seed)

    def loss_fn():
        return mse_loss(forward(model, batch), batch.targets)

    return gradcheck_groups(loss_fn, model.named_parameters(), h)


def run_gradcheck(cfg: RunConfig) -> dict:
    gc = cfg.gradcheck
    h = float(gc.get("h", 1e-5))
    tol = float(gc.get("tol", 1e-4))
    model_cfg = cfg.model_config(GRADCHECK_MODEL)
    with ad.corrupted_backward(*gc.get("corrupt_backward", [])):
        groups = {f"sgf.{k}": v for k, v in sgf_gradcheck(h, float(gc.get("sgf_alpha", 0.5)),
                                                          model_cfg.seed).items()}
        groups.update({f"model.{k}": v for k, v in
                       model_gradcheck(model_cfg, h, float(gc.get("alpha", 0.3))).items()})
    worst = max(groups.values())
    return {"h": h, "tol": tol, "max_rel_error": groups, "worst": worst, "passed": worst < tol}


def cmd_gradcheck(args) -> int:
    try:
        cfg = RunConfig.load(args.config)
        report = run_gradcheck(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(_dump(report) + "\n")
    status = "passed" if report["passed"] else "FAILED"
    print(f"gradcheck {status}: worst relative error {report['worst']:.3e} (tol {report['tol']:g})")
    return 0 if report["passed"] else 1


# ---------------------------------------------------------------- training and heatmaps


def write_heatmaps(directory: Path, maps: np.ndarray) -> None:
    for i, plane in enumerate(maps):
        write_matrix_csv(directory / f"heatmap_frame{i}.csv", plane)
        write_pgm(directory / f"heatmap_frame{i}.pgm", plane)


def cmd_train_toy(args) -> int:
    try:
        cfg = RunConfig.load(args.config)
        config = cfg.model_config(seed=args.seed, ablate_sgf=True if args.ablate_sgf else None)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)

    result = train(config)
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(["step", "eval_mse"])
        for step, mse in result.curve:
            writer.writerow([step, repr(mse)])
    if result.diverged_at is None:
        save_checkpoint(result.model, out / "checkpoint")
        write_heatmaps(out, result.heatmaps[: config.frames])
        write_matrix_csv(out / "relevance.csv",
                         result.eval_batch.relevance[: config.frames].astype(np.float64))

    summary = {
        "status": "ok" if result.diverged_at is None else "diverged",
        "diverged_step": result.diverged_at,
        "final_mse": result.final_mse,
        "var_y": result.var_y,
        "alpha_values": {str(j): a for j, a in sorted(result.alphas.items())},
        "tanh_alpha": {str(j): math.tanh(a) for j, a in sorted(result.alphas.items())},
        "selectivity_margin": result.selectivity_margin,
        "fusion_layers": sorted(result.alphas),
        "config": config.to_dict(),
    }
    (out / "summary.json").write_text(_dump(summary) + "\n")
    if result.diverged_at is not None:
        print(f"training diverged at step {result.diverged_at}", file=sys.stderr)
        return 1
    print(f"final_mse={result.final_mse:.6f} var_y={result.var_y:.6f} "
          f"selectivity={result.selectivity_margin:.4f}")
    return 0


def cmd_heatmap(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return 2
    cfg = model.config
    seed = cfg.seed if args.batch_seed is None else args.batch_seed
    batch = toy_task_generate(cfg, seed)
    _, traces = forward(model, batch, capture_trace=True)
    out = output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    if traces:
        maps = np.mean([t.s_imp for t in traces.values()], axis=0)
    else:
        maps = np.full(batch.targets.shape, 0.5)
    write_heatmaps(out, maps.reshape(-1, cfg.height, cfg.width))
    for j, trace in sorted(traces.items()):
        export_trace(trace, out / f"layer{j}")
    print(f"wrote {len(maps)} heatmaps to {out}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="print the fusion layer selection as JSON")
    p.add_argument("n_layers", type=int)
    p.add_argument("rho", type=float)
    p.add_argument("mode", nargs="?", default="centered", choices=["centered", "front-anchored"])
    p.add_argument("--end-buffer", type=float, default=0.0)
    p.add_argument("--start-offset", type=float, default=0.0)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("flops", help="analytic FLOPs report for an architecture spec")
    p.add_argument("spec", nargs="?")
    p.add_argument("--config")
    p.add_argument("--compare", action="store_true", help="CSV over 8/16/32 frames and merge 2/4")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train the toy backbone on synthetic retrieval")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate-sgf", action="store_true")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("heatmap", help="export importance heatmaps from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-seed", "--seed", dest="batch_seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
