"""Command-line entry point: ``fitdistill <subcommand> [--config F] [--seed N] [--out DIR]``.

Artifacts live under the output directory::

    data/       seed.jsonl, base_pairs.jsonl, eval_pairs.jsonl, cls_train_pairs.jsonl, cls_eval_pairs.jsonl
    ckpt/       teacher.ckpt, student_<DIV>.ckpt, path_<name>_<i>.ckpt, classifier*.ckpt
    reports/    <name>.txt (aligned table) and <name>.jsonl
    manifests/  <subcommand>.json (config digest, seed, artifact paths, wall-clock)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .distillation import (
    DistillPath,
    Stage,
    TrainConfig,
    distill_classifier,
    distill_explanation,
    evaluate_classifier,
    evaluate_losses,
    generate_labels,
    pair_examples,
    run_path,
    teacher_references,
    train_sft,
)
from .domain import (
    balanced_pairs,
    extract_requirements,
    gen_pairs,
    make_lookup,
    make_record,
    quality_filter,
    read_pairs,
    read_records,
    stratified_sample,
    write_pairs,
    write_records,
)
from .evaluation import (
    CLASSIFICATION_COLUMNS,
    EXPLANATION_COLUMNS,
    emit_report,
    eval_explanations,
    format_table,
    read_report,
)
from .models import init_model
from .pipeline import BENCH_COLUMNS, Pipeline, bench, serve_explanations, serve_fit

log = logging.getLogger("fitdistill")

ABLATION_GRID = (("seqcls", "last", "concat"), ("seqcls", "mean", "concat"),
                 ("twotower", "last", "concat"), ("twotower", "last", "dot"))


class Run:
    """Paths and bookkeeping for one subcommand invocation."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.artifacts: list[str] = []

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, *parts: str, override: str = "") -> Path:
        p = Path(override) if override else self.out.joinpath(*parts)
        if not p.exists():
            raise FileNotFoundError(f"required input not found: {p}")
        return p

    def report(self, name: str, rows: list[dict], columns) -> list[dict]:
        txt, jl = emit_report(rows, self.path("reports", name), columns)
        self.artifacts += [str(txt), str(jl)]
        return rows

    def save(self, ckpt, *parts: str) -> Path:
        p = save_checkpoint(ckpt, self.path(*parts))
        self.artifacts.append(str(p))
        return p

    def lm_train(self, which: str) -> TrainConfig:
        c = self.cfg
        return TrainConfig(
            lr=c.teacher_lr if which == "teacher" else c.student_lr,
            epochs=c.teacher_epochs if which == "teacher" else c.student_epochs,
            batch_size=c.train_batch_size,
            weight_decay=c.train_weight_decay,
            max_seq_len=c.max_seq_len,
            seed=c.seed,
            weights=c.weights(),
            divergence=c.distill_divergence,
            grad_clip=c.train_grad_clip,
        )

    def eval_records(self):
        pairs = read_pairs(self.need("data", "eval_pairs.jsonl"))
        return [make_record(j, p, compress=self.cfg.data_compress_prompts, with_rating=self.cfg.data_with_rating)
                for j, p in pairs]

    def teacher(self):
        return load_checkpoint(self.need("ckpt", "teacher.ckpt", override=self.cfg.teacher_ckpt))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_datagen(run: Run, args) -> list[dict]:
    c = run.cfg
    rng = np.random.default_rng(c.seed)
    dom = c.domain()
    jobs, profs = gen_pairs(rng, c.data_pool_size, dom, prefix="b")
    pool = [make_record(j, p, compress=c.data_compress_prompts, with_rating=c.data_with_rating)
            for j, p in zip(jobs, profs)]
    kept, rejected = quality_filter(pool, make_lookup(jobs, profs))
    seed = stratified_sample(kept, c.data_seed_per_category, rng)[: c.data_seed_size]
    eval_jobs, eval_profs = gen_pairs(rng, c.data_eval_size, dom, prefix="e")
    cls_train = balanced_pairs(rng, c.data_cls_per_category, dom, prefix="c")
    cls_eval = balanced_pairs(rng, c.data_cls_eval_per_category, dom, prefix="h")

    files = {
        "seed.jsonl": lambda p: write_records(p, seed),
        "base_pairs.jsonl": lambda p: write_pairs(p, zip(jobs, profs)),
        "eval_pairs.jsonl": lambda p: write_pairs(p, zip(eval_jobs, eval_profs)),
        "cls_train_pairs.jsonl": lambda p: write_pairs(p, cls_train),
        "cls_eval_pairs.jsonl": lambda p: write_pairs(p, cls_eval),
    }
    for name, write in files.items():
        p = run.path("data", name)
        write(p)
        run.artifacts.append(str(p))
    ratios = [len(extract_requirements(j.tokens)) / len(j.tokens) for j in jobs]
    rows = [{
        "pool": len(pool),
        "kept": len(kept),
        "rejected": len(rejected),
        "seed": len(seed),
        "eval": len(eval_jobs),
        "cls_train": len(cls_train),
        "cls_eval": len(cls_eval),
        "mean_compression": float(np.mean(ratios)),
    }]
    return run.report("datagen", rows, list(rows[0]))


def cmd_train_teacher(run: Run, args) -> list[dict]:
    seed = read_records(run.need("data", "seed.jsonl"))
    ckpt, reports = train_sft(run.cfg.model("teacher"), seed, run.lm_train("teacher"), role="teacher")
    run.save(ckpt, "ckpt", "teacher.ckpt")
    rows = [{"epoch": i + 1, "sft": r.sft, "tokens": r.token_count} for i, r in enumerate(reports)]
    return run.report("teacher", rows, ["epoch", "sft", "tokens"])


def cmd_distill_exp(run: Run, args) -> list[dict]:
    c = run.cfg
    teacher_ck = run.teacher()
    teacher = teacher_ck.model("teacher")
    seed = read_records(run.need("data", "seed.jsonl"))
    held = run.eval_records()
    kinds = [k.strip().upper() for k in (args.divergence or c.distill_divergence).split(",")]
    rows = []
    for kind in kinds:
        tc = replace(run.lm_train("student"), divergence=kind)
        init = init_model(c.model("student"))
        before, _ = evaluate_losses(init, held, teacher, tc.weights, kind)
        ckpt, _ = distill_explanation(teacher_ck, c.model("student"), seed, tc, init=init)
        after, _ = evaluate_losses(ckpt.model(), held, teacher, tc.weights, kind)
        run.save(ckpt, "ckpt", f"student_{kind}.ckpt")
        rows.append({
            "divergence": kind,
            "kd_initial": before.kd,
            "kd_final": after.kd,
            "kd_ratio": after.kd / before.kd if before.kd > 0 else 0.0,
            "nll_final": after.sft,
        })
    return run.report("distill", rows, ["divergence", "kd_initial", "kd_final", "kd_ratio", "nll_final"])


def _cls_data(run: Run):
    c = run.cfg
    train_pairs = read_pairs(run.need("data", "cls_train_pairs.jsonl"))
    eval_pairs = read_pairs(run.need("data", "cls_eval_pairs.jsonl"))
    labels = None
    if c.cls_labels == "teacher":
        recs = generate_labels(run.teacher(), train_pairs, "classification", c.pipeline_max_new)
        keep = [i for i, r in enumerate(recs) if r.rejected is None]
        log.info("teacher labels: %d of %d usable", len(keep), len(recs))
        train_pairs = [train_pairs[i] for i in keep]
        labels = [int(recs[i].label) for i in keep]
    compress = {"true": True, "false": False}.get(c.cls_compress, "mixed")
    train = pair_examples(train_pairs, labels, compress, np.random.default_rng(c.seed))
    held = pair_examples(eval_pairs, compress=True)
    held_full = pair_examples(eval_pairs, compress=False)
    return train, held, held_full


def _cls_train(run: Run, epochs: int) -> TrainConfig:
    c = run.cfg
    return TrainConfig(lr=c.cls_lr, epochs=epochs, batch_size=c.cls_batch_size, weight_decay=c.train_weight_decay,
                       max_seq_len=c.cls_max_seq_len, seed=c.seed, grad_clip=c.train_grad_clip)


def cmd_distill_cls(run: Run, args) -> list[dict]:
    c = run.cfg
    train, held, held_full = _cls_data(run)
    grid = ABLATION_GRID if args.ablation else ((c.cls_structure, c.cls_pooling, c.cls_interaction),)
    epochs = c.cls_ablation_epochs if args.ablation else c.cls_epochs
    rows = []
    for structure, pooling, interaction in grid:
        ckpt, _ = distill_classifier(c.model("cls"), train, _cls_train(run, epochs), structure, pooling, interaction,
                                     head_dim=c.cls_head_dim, freeze_encoder=c.cls_freeze_encoder)
        clf = ckpt.classifier_model()
        rep = evaluate_classifier(clf, held)
        name = "classifier.ckpt" if not args.ablation else f"classifier_{structure}_{pooling}_{interaction}.ckpt"
        run.save(ckpt, "ckpt", name)
        rows.append({
            "backbone": c.model("cls").label,
            "structure": structure,
            "pooling": pooling if structure == "seqcls" else "last",
            "interaction": interaction if structure == "twotower" else "-",
            "accuracy": rep.accuracy,
            "weighted_f1": rep.weighted_f1,
        })
    return run.report("cls_ablation" if args.ablation else "classifier", rows, CLASSIFICATION_COLUMNS)


def default_paths(cfg: ExperimentConfig, train: TrainConfig) -> list[DistillPath]:
    student, mid = cfg.model("student"), cfg.model("mid")
    return [
        DistillPath(f"single {cfg.model('teacher').label}>{student.label}", (Stage(student, train),)),
        DistillPath(f"two-stage {cfg.model('teacher').label}>{mid.label}>{student.label}",
                    (Stage(mid, train), Stage(student, train))),
    ]


def cmd_run_path(run: Run, args) -> list[dict]:
    teacher_ck = run.teacher()
    seed = read_records(run.need("data", "seed.jsonl"))
    held = run.eval_records()
    prompts = [r.prompt for r in held]
    refs = teacher_references(teacher_ck.model("teacher"), prompts, run.cfg.pipeline_max_new)
    rows = []
    for path in default_paths(run.cfg, run.lm_train("student")):
        slug = path.name.split()[0]
        res = run_path(path, teacher_ck, seed, prompts, refs, run.cfg.pipeline_max_new,
                       on_checkpoint=lambda i, ck, slug=slug: run.save(ck, "ckpt", f"path_{slug}_{i}.ckpt"))
        if res.error:
            raise RuntimeError(f"path {path.name!r}: {res.error}")
        last = res.rows[-1]
        rows.append({**last, "teacher": run.cfg.model("teacher").label})
        for r in res.rows[:-1]:
            log.info("intermediate stage %s: rougeL %.4f", r["student"], r["rougeL"])
    return run.report("paths", rows, EXPLANATION_COLUMNS)


def cmd_eval(run: Run, args) -> list[dict]:
    teacher = run.teacher().model("teacher")
    ck_path = args.checkpoint or run.cfg.explainer_ckpt or str(run.out / "ckpt" / "student_TVD.ckpt")
    if not Path(ck_path).exists():
        raise FileNotFoundError(f"checkpoint not found: {ck_path}")
    ck = load_checkpoint(ck_path)
    held = run.eval_records()
    prompts = [r.prompt for r in held]
    refs = teacher_references(teacher, prompts, run.cfg.pipeline_max_new)
    scores = eval_explanations(ck, prompts, refs, run.cfg.pipeline_max_new)
    row = {
        "path": "eval",
        "teacher": teacher.config.label,
        "student": ck.config.label,
        "divergence": ck.provenance.get("divergence", "-"),
        **scores.summary(),
    }
    return run.report("eval", [row], EXPLANATION_COLUMNS)


def _pipeline(run: Run) -> Pipeline:
    c = run.cfg
    clf = run.need("ckpt", "classifier.ckpt", override=c.classifier_ckpt)
    exp = run.need("ckpt", "student_TVD.ckpt", override=c.explainer_ckpt)
    return Pipeline(load_checkpoint(clf).classifier_model(), load_checkpoint(exp).model(), None,
                    c.pipeline_compression, c.pipeline_max_new)


def cmd_serve(run: Run, args) -> list[dict]:
    pipe = _pipeline(run)
    pairs = read_pairs(Path(args.input) if args.input else run.need("data", "eval_pairs.jsonl"))
    reqs = [(j.tokens, p.tokens) for j, p in pairs]
    fits = [serve_fit(pipe, j, p) for j, p in reqs]
    exps = serve_explanations(pipe, reqs) if args.explain else [None] * len(reqs)
    rows = []
    for (job, prof), fit, ex in zip(pairs, fits, exps):
        rows.append({
            "id": f"{job.id}|{prof.id}",
            "fit": fit.fit.label.word,
            "rating": fit.fit.rating,
            "compressed_ratio": fit.compressed_ratio,
            "explanation": " ".join(ex.explanation) if ex else "",
            "status": ex.status if ex else "-",
        })
    return run.report("serve", rows, list(rows[0]))


def cmd_bench(run: Run, args) -> list[dict]:
    pipe = _pipeline(run)
    pairs = read_pairs(run.need("data", "eval_pairs.jsonl"))
    rows = bench(pipe, [(j.tokens, p.tokens) for j, p in pairs], run.cfg.bench_counts)
    return run.report("bench", rows, BENCH_COLUMNS)


def cmd_report(run: Run, args) -> list[dict]:
    name = args.name or "paths"
    return read_report(run.need("reports", f"{name}.jsonl"))


COMMANDS: dict[str, Callable] = {
    "datagen": cmd_datagen,
    "train-teacher": cmd_train_teacher,
    "distill-exp": cmd_distill_exp,
    "distill-cls": cmd_distill_cls,
    "run-path": cmd_run_path,
    "eval": cmd_eval,
    "serve": cmd_serve,
    "bench": cmd_bench,
    "report": cmd_report,
}


HELP = {
    "datagen": "generate the pair pool, seed records and classifier pairs",
    "train-teacher": "supervised fine-tuning of the teacher on the seed records",
    "distill-exp": "distill explanation students, one per divergence",
    "distill-cls": "train the fit classifier (or the ablation grid)",
    "run-path": "single-stage and two-stage distillation paths",
    "eval": "NLL and ROUGE of an explainer against teacher references",
    "serve": "fit labels (and explanations) for a pairs file",
    "bench": "latency and throughput under the request mix",
    "report": "print a saved report",
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fitdistill", description="fit-explanation distillation experiments")
    sub = ap.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name])
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the artifact directory")
        sp.add_argument("--format", choices=("table", "machine"), default="table")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("distill-exp",):
            sp.add_argument("--divergence", help="comma-separated divergence kinds (default from config)")
        if name == "distill-cls":
            sp.add_argument("--ablation", action="store_true", help="train the structure/pooling/interaction grid")
        if name == "eval":
            sp.add_argument("--checkpoint", help="explainer checkpoint to evaluate")
        if name == "serve":
            sp.add_argument("--input", help="pairs file (default: the evaluation pairs)")
            sp.add_argument("--explain", action="store_true", help="also decode explanations")
        if name == "report":
            sp.add_argument("--name", help="report name under reports/ (default: paths)")
    return ap


def execute(argv: list[str] | None = None) -> list[dict]:
    """Run one subcommand and return its report rows (raises on failure)."""
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    run = Run(cfg, Path(cfg.out))
    started = time.time()
    rows = COMMANDS[args.command](run, args)
    if args.command != "report":
        manifest = {
            "command": args.command,
            "config_digest": cfg.digest(),
            "seed": cfg.seed,
            "artifacts": run.artifacts,
            "wall_clock_s": round(time.time() - started, 3),
        }
        run.path("manifests", f"{args.command}.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if args.format == "machine":
        for r in rows:
            print(json.dumps(r, separators=(",", ":")))
    elif rows:
        print(format_table(rows, list(rows[0])), end="")
    return rows


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if ("-v" in argv or "--verbose" in argv) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        execute(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except Exception as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"fitdistill: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
