"""Show the layer selections used for the common backbone depths and fusion ratios."""

from sgfuse.planner import PlanError, plan_layers

PRESETS = [
    (28, 0.5, "centered", 0.0),
    (36, 0.5, "centered", 0.0),
    (36, 0.75, "front-anchored", 0.25),
    (36, 1.0, "centered", 0.0),
    (4, 0.5, "centered", 0.0),
]


def main():
    for n_layers, rho, mode, end_buffer in PRESETS:
        try:
            plan = plan_layers(n_layers, rho, mode, end_buffer=end_buffer)
        except PlanError as exc:
            print(f"N={n_layers} rho={rho} {mode}: {exc}")
            continue
        sel = plan.selected
        bar = "".join("#" if i in sel else "." for i in range(n_layers))
        print(f"N={n_layers:>2} rho={rho:<4} {mode:<14} eb={end_buffer:<4} [{sel[0]}..{sel[-1]}] {len(sel):>2}  {bar}")
        for w in plan.warnings:
            print(f"    warning: {w}")


if __name__ == "__main__":
    main()
