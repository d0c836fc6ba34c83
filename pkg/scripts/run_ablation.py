"""Train the toy model with and without fusion over several seeds and tabulate the outcome.

    python scripts/run_ablation.py --seeds 0 1 2 3 4 --out out/ablation
"""

import argparse
import csv
import math
from pathlib import Path

from sgfuse.mini_vlm import MiniVlmConfig, forward, selectivity, train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--out", default="out/ablation")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        for ablate in (False, True):
            result = train(MiniVlmConfig(seed=seed, steps=args.steps, ablate_sgf=ablate))
            per_layer = {}
            if result.model.fusion:
                _, traces = forward(result.model, result.eval_batch, capture_trace=True)
                per_layer = {j: selectivity(t.s_imp, result.eval_batch.relevance) for j, t in traces.items()}
            row = {
                "seed": seed,
                "fusion": "off" if ablate else "on",
                "final_mse": result.final_mse,
                "var_y": result.var_y,
                "ratio": result.final_mse / result.var_y,
                "max_abs_tanh_alpha": max((abs(math.tanh(a)) for a in result.alphas.values()), default=0.0),
                "selectivity": result.selectivity_margin,
                "selectivity_by_layer": " ".join(f"{j}:{v:+.4f}" for j, v in sorted(per_layer.items())),
            }
            rows.append(row)
            print(f"seed {seed} fusion {row['fusion']:>3}: mse/var {row['ratio']:.3f} "
                  f"tanh {row['max_abs_tanh_alpha']:.3f} selectivity {row['selectivity']:+.4f}")

    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\r\n")
        writer.writeheader()
        writer.writerows(rows)


if __name__ == "__main__":
    main()
