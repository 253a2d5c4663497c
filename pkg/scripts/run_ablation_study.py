"""Ablation table on the synthetic benchmark: one aggregated row per variant.

Usage: python scripts/run_ablation_study.py [--reps 10] [--out DIR]
"""

import argparse
import json
from pathlib import Path

from sd2 import evaluation as ev
from sd2 import training as tr


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--n", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", default="runs/ablation_study")
    args = ap.parse_args()

    base = tr.TrainConfig(dataset={"kind": "synthetic_binary", "mv": 0, "mz": 4,
                                   "mc": 4, "ma": 2, "mu": 2, "n": args.n})
    table = {}
    for variant in tr.VARIANTS:
        config = tr.apply_ablation(base, variant)
        results = tr.replicate(
            config, args.reps, args.seed,
            metric_fn=lambda model, triple: {
                "within": ev.eps_ate(model, triple[0]),
                "out": ev.eps_ate(model, triple[2]),
            })
        rows = [r["metrics"] for r in results if "metrics" in r]
        entry = {}
        for split in ("within", "out"):
            mean, std, text = ev.aggregate([r[split] for r in rows])
            entry[split] = {"mean": mean, "std": std, "formatted": text}
        table[variant] = entry
        print(f"{variant:>9}: within {entry['within']['formatted']}  "
              f"out {entry['out']['formatted']}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.json", "w") as fh:
        json.dump(table, fh, indent=2)
    ratio = table["Total"]["within"]["mean"] / table["Lp"]["within"]["mean"]
    print(f"METRIC total_over_lp={ratio:.6f}")


if __name__ == "__main__":
    main()
