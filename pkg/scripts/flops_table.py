"""Print the FLOPs fixtures, the frame/merge comparison and a key-width sweep.

    python scripts/flops_table.py --out out/flops
"""

import argparse
import json
from pathlib import Path

from sgfuse.flops import compare_table, overhead_report, qwen25_3b_like, qwen25_7b_like


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="out/flops")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    fixtures = {"7b_like": qwen25_7b_like(), "3b_like": qwen25_3b_like(), "3b_like_dk512": qwen25_3b_like(d_k=512)}
    reports = {name: overhead_report(spec).to_json() for name, spec in fixtures.items()}
    (out / "fixtures.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    for name, rep in reports.items():
        print(f"{name:>14}: sgf fraction {rep['sgf_fraction']:.4f}  total {rep['total_flops']:.3e}")

    table = compare_table(qwen25_7b_like())
    (out / "compare_7b.csv").write_text(table, newline="")
    print(table.replace("\r\n", "\n"))

    print("key width sweep, 7B-like fixture")
    for d_k in (3584, 1792, 896, 512, 256):
        print(f"  d_k={d_k:>5}: {overhead_report(qwen25_7b_like(d_k=d_k)).sgf_fraction:.4f}")


if __name__ == "__main__":
    main()
