"""Mean rule-mode compression ratio as the number of filler lines per job grows.

    python3 scripts/compression_sweep.py [--jobs 1000]
"""

import argparse

import numpy as np

from fitdistill.domain import gen_job
from fitdistill.evaluation import format_table
from fitdistill.pipeline import summarize_job


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--jobs", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rows = []
    for lo, hi in [(0, 0), (1, 3), (3, 6), (6, 10), (10, 15)]:
        rng = np.random.default_rng(args.seed)
        ratios, kept = [], 0
        for _ in range(args.jobs):
            job = gen_job(rng, noise_range=(lo, hi))
            out, ratio = summarize_job(job.tokens)
            ratios.append(ratio)
            kept += {r.skill for r in job.requirements} <= set(out)
        rows.append({"noise_lines": f"{lo}-{hi}", "mean_ratio": float(np.mean(ratios)),
                     "max_ratio": float(np.max(ratios)), "skills_kept": kept / args.jobs})
    print(format_table(rows, list(rows[0])), end="")


if __name__ == "__main__":
    main()
