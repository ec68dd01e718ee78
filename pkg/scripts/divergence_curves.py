"""Per-epoch held-out distillation loss for each divergence, from an existing run.

Needs ``datagen`` and ``train-teacher`` outputs in the run directory.

    python3 scripts/divergence_curves.py --out runs/default [--config configs/default.cfg]
"""

import argparse
from dataclasses import replace
from pathlib import Path

from fitdistill.checkpoint import load_checkpoint
from fitdistill.cli import Run
from fitdistill.config import load_config
from fitdistill.distillation import distill_explanation, evaluate_losses
from fitdistill.domain import read_records
from fitdistill.evaluation import format_table
from fitdistill.models import init_model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/default.cfg")
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--kinds", default="FKL,JS,TVD,SKL")
    args = ap.parse_args()
    cfg = load_config(args.config, out=args.out)
    run = Run(cfg, Path(args.out))
    teacher = load_checkpoint(run.need("ckpt", "teacher.ckpt"))
    tmodel = teacher.model("teacher")
    seed = read_records(run.need("data", "seed.jsonl"))
    held = run.eval_records()
    rows = []
    for kind in args.kinds.split(","):
        tc = replace(run.lm_train("student"), divergence=kind)
        init = init_model(cfg.model("student"))
        start, _ = evaluate_losses(init, held, tmodel, tc.weights, kind)
        curve = [start.kd]

        def record(epoch, model, kind=kind, tc=tc, curve=curve):
            curve.append(evaluate_losses(model, held, tmodel, tc.weights, kind)[0].kd)

        distill_explanation(teacher, cfg.model("student"), seed, tc, init=init, on_epoch=record)
        rows.append({"divergence": kind, **{f"ep{i}": v / curve[0] for i, v in enumerate(curve)}})
    print(format_table(rows, list(rows[0])), end="")


if __name__ == "__main__":
    main()
