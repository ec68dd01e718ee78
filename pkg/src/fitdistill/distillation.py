"""Training loops: teacher SFT, white-box explanation distillation,
classifier distillation and multi-stage distillation paths.

All loops share one AdamW implementation and draw batch order from
``numpy.random.default_rng(seed)``, so runs are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, params_digest
from .domain import (
    EOS,
    VOCAB,
    ExampleRecord,
    FitLabel,
    JobPosting,
    MemberProfile,
    extract_requirements,
    oracle_assess,
    parse_explanation,
    render_prompt,
    IMPORTANCE_WEIGHT,
    VERDICT_CREDIT,
)
from .evaluation import ClassificationReport, RougeScores, classification_report, corpus_rouge
from .models import (
    EncoderClassifier,
    LanguageModel,
    ModelConfig,
    bind,
    bind_classifier,
    classifier_inputs,
    classifier_logits,
    greedy_decode_batch,
    init_classifier,
    init_model,
    lm_logits,
    pad_batch,
    predict_proba,
)
from .numerics import Tape
from .objectives import DivergenceKind, LossReport, LossWeights, class_nll, kd_term, row_mean_weights, sft_nll

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    epochs: int = 4
    batch_size: int = 16
    weight_decay: float = 0.01
    max_seq_len: int = 128
    seed: int = 0
    weights: LossWeights = LossWeights()
    divergence: DivergenceKind = DivergenceKind.TVD
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.epochs < 0 or self.batch_size <= 0 or self.max_seq_len <= 0:
            raise ValueError("epochs, batch_size and max_seq_len must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        object.__setattr__(self, "divergence", DivergenceKind.parse(self.divergence))

    def digest(self) -> str:
        d = asdict(self)
        d["divergence"] = self.divergence.value
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class AdamW:
    """AdamW with decoupled weight decay on matrices (biases, gains, vectors exempt)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and params[k].ndim >= 2:
                upd = upd + self.wd * params[k]
            params[k] = params[k] - self.lr * upd


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        return grads
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm <= max_norm:
        return grads
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}


# ---------------------------------------------------------------------------
# token batches
# ---------------------------------------------------------------------------


@dataclass
class Encoded:
    ids: list[int]  # prompt + target
    prompt_len: int


def encode_record(rec: ExampleRecord, max_seq_len: int) -> Encoded:
    ids = VOCAB.encode(rec.prompt + rec.target)
    if len(ids) > max_seq_len + 1:
        raise ValueError(f"record {rec.id} has {len(ids)} tokens; max_seq_len is {max_seq_len}")
    return Encoded(ids, len(rec.prompt))


def make_batch(items: Sequence[Encoded]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inputs (B, T), next-token targets (B, T) and target-position mask (B, T)."""
    T = max(len(e.ids) for e in items) - 1
    inputs = np.zeros((len(items), T), dtype=np.int64)
    targets = np.zeros((len(items), T), dtype=np.int64)
    mask = np.zeros((len(items), T), dtype=bool)
    for i, e in enumerate(items):
        n = len(e.ids) - 1
        inputs[i, :n] = e.ids[:-1]
        targets[i, :n] = e.ids[1:]
        mask[i, e.prompt_len - 1 : n] = True
    return inputs, targets, mask


def teacher_probs_for(teacher: LanguageModel, items: Sequence[Encoded], batch_size: int = 32) -> list[np.ndarray]:
    """Teacher next-token distributions under teacher forcing, one (T_i, V) array per item."""
    out: list[np.ndarray] = []
    for s in range(0, len(items), batch_size):
        chunk = items[s : s + batch_size]
        inputs, _, _ = make_batch(chunk)
        tape = Tape()
        logits = lm_logits(tape, bind(tape, teacher.params, False), teacher.config, inputs).value
        probs = nx.softmax_np(logits)
        out.extend(probs[i, : len(e.ids) - 1] for i, e in enumerate(chunk))
    return out


def _stack_teacher(probs: Sequence[np.ndarray], T: int) -> np.ndarray:
    V = probs[0].shape[-1]
    out = np.zeros((len(probs), T, V))
    out[:, :, 0] = 1.0  # padded rows: any valid distribution; they carry zero weight
    for i, p in enumerate(probs):
        out[i, : len(p)] = p
    return out


# ---------------------------------------------------------------------------
# explanation models
# ---------------------------------------------------------------------------


def _lm_loop(
    model: LanguageModel,
    data: Sequence[Encoded],
    cfg: TrainConfig,
    teacher_probs: Sequence[np.ndarray] | None,
    on_epoch: Callable[[int, LanguageModel], None] | None = None,
) -> list[LossReport]:
    """Shared optimisation loop.

    The objective is ``(l_sft * sft + l_kd * kd) / (l_sft + l_kd)``; with
    ``l_kd == 0`` the kd term is never built and the loop is exactly SFT.
    """
    if not data:
        raise ValueError("empty dataset")
    w_sft = cfg.weights.lambda_sft / (cfg.weights.lambda_sft + cfg.weights.lambda_kd)
    w_kd = cfg.weights.lambda_kd / (cfg.weights.lambda_sft + cfg.weights.lambda_kd)
    use_kd = teacher_probs is not None and w_kd > 0
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params, cfg.lr, cfg.weight_decay)
    reports = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        tot_sft = tot_kd = 0.0
        tokens = 0
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            inputs, targets, mask = make_batch([data[i] for i in idx])
            weights = row_mean_weights(mask)
            tape = Tape()
            p = bind(tape, model.params)
            logits = lm_logits(tape, p, model.config, inputs)
            sft = sft_nll(logits, targets, weights=weights)
            if use_kd:
                tp = _stack_teacher([teacher_probs[i] for i in idx], inputs.shape[1])
                kd = kd_term(cfg.divergence, None, logits, weights=weights, teacher_probs=tp)
                loss = sft * w_sft + kd * w_kd
                kd_val = float(kd.value)
            else:
                loss = sft
                kd_val = 0.0
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite loss in epoch {epoch} batch {b} (records {list(map(int, idx))})")
            grads = tape.backward(loss)
            named = {k: grads[v.id] for k, v in p.items() if v.id in grads}
            opt.step(model.params, _clip(named, cfg.grad_clip))
            tot_sft += float(sft.value) * len(idx)
            tot_kd += kd_val * len(idx)
            tokens += int(mask.sum())
        n = len(data)
        sft_m, kd_m = tot_sft / n, tot_kd / n
        rep = LossReport(sft_m, kd_m, cfg.weights.lambda_sft * sft_m + cfg.weights.lambda_kd * kd_m, tokens)
        log.info("epoch %d: sft %.4f kd %.4f", epoch, sft_m, kd_m)
        reports.append(rep)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return reports


def train_sft(
    model_config: ModelConfig,
    dataset: Sequence[ExampleRecord],
    cfg: TrainConfig,
    init: LanguageModel | None = None,
    **provenance,
) -> tuple[Checkpoint, list[LossReport]]:
    """Supervised fine-tuning on reference targets (token NLL)."""
    if not dataset:
        raise ValueError("empty dataset")
    model = init.copy(role="teacher") if init is not None else init_model(model_config, role="teacher")
    data = [encode_record(r, model.config.max_seq_len) for r in dataset]
    reports = _lm_loop(model, data, replace(cfg, weights=LossWeights(1.0, 0.0)), None)
    prov = {"stage": "sft", "config_digest": cfg.digest(), "final": asdict(reports[-1]) if reports else None}
    prov.update(provenance)
    return Checkpoint.from_model(model, **prov), reports


def distill_explanation(
    teacher: Checkpoint | LanguageModel,
    student_config: ModelConfig,
    dataset: Sequence[ExampleRecord],
    cfg: TrainConfig,
    init: LanguageModel | None = None,
    on_epoch: Callable[[int, LanguageModel], None] | None = None,
    **provenance,
) -> tuple[Checkpoint, list[LossReport]]:
    """Train a student on ``l_sft * NLL + l_kd * d(teacher, student)`` under teacher forcing."""
    tmodel = teacher.model("teacher") if isinstance(teacher, Checkpoint) else teacher
    if tmodel.config.vocab_size != student_config.vocab_size:
        raise ValueError(
            f"vocabulary mismatch: teacher {tmodel.config.vocab_size} vs student {student_config.vocab_size}"
        )
    if not dataset:
        raise ValueError("empty dataset")
    before = params_digest(tmodel.params)
    student = init.copy(role="student") if init is not None else init_model(student_config)
    data = [encode_record(r, min(student.config.max_seq_len, tmodel.config.max_seq_len)) for r in dataset]
    tprobs = teacher_probs_for(tmodel, data) if cfg.weights.lambda_kd > 0 else None
    reports = _lm_loop(student, data, cfg, tprobs, on_epoch)
    if params_digest(tmodel.params) != before:
        raise RuntimeError("teacher parameters changed during distillation")
    prov = {
        "stage": "distill",
        "divergence": cfg.divergence.value,
        "config_digest": cfg.digest(),
        "teacher_digest": before,
        "final": asdict(reports[-1]) if reports else None,
    }
    prov.update(provenance)
    return Checkpoint.from_model(student, **prov), reports


def evaluate_losses(
    student: LanguageModel,
    dataset: Sequence[ExampleRecord],
    teacher: LanguageModel | None = None,
    weights: LossWeights = LossWeights(),
    kind: DivergenceKind | str = DivergenceKind.TVD,
    batch_size: int = 32,
) -> tuple[LossReport, list[LossReport]]:
    """Corpus loss (mean over examples) and per-example reports on ``dataset``."""
    if not dataset:
        raise ValueError("empty dataset")
    kind = DivergenceKind.parse(kind)
    data = [encode_record(r, student.config.max_seq_len) for r in dataset]
    tprobs = teacher_probs_for(teacher, data, batch_size) if teacher is not None else None
    per: list[LossReport] = []
    for s in range(0, len(data), batch_size):
        chunk = data[s : s + batch_size]
        inputs, targets, mask = make_batch(chunk)
        tape = Tape()
        logits = lm_logits(tape, bind(tape, student.params, False), student.config, inputs)
        lv = logits.value
        for i, e in enumerate(chunk):
            row = mask[i]
            t2 = Tape()
            lg = t2.const(lv[i][row])
            sft = float(sft_nll(lg, targets[i][row], np.ones(row.sum(), bool)).value)
            kd = 0.0
            if tprobs is not None:
                tp = tprobs[s + i][row[: len(tprobs[s + i])]]
                kd = float(kd_term(kind, None, lg, np.ones(row.sum(), bool), teacher_probs=tp).value)
            per.append(LossReport(sft, kd, weights.lambda_sft * sft + weights.lambda_kd * kd, int(row.sum())))
    n = len(per)
    sft_m = sum(r.sft for r in per) / n
    kd_m = sum(r.kd for r in per) / n
    corpus = LossReport(sft_m, kd_m, sum(r.combined for r in per) / n, sum(r.token_count for r in per))
    return corpus, per


# ---------------------------------------------------------------------------
# label generation
# ---------------------------------------------------------------------------


def coverage_from_lines(lines) -> float:
    den = sum(IMPORTANCE_WEIGHT[l.importance] for l in lines)
    if den == 0:
        return 0.0
    return sum(VERDICT_CREDIT[l.verdict] * IMPORTANCE_WEIGHT[l.importance] for l in lines) / den


def generate_labels(
    teacher: Checkpoint | LanguageModel,
    inputs: Sequence[tuple[JobPosting, MemberProfile]],
    mode: str = "explanation",
    max_new: int = 48,
    compress: bool = True,
) -> list[ExampleRecord]:
    """Greedy-decode the teacher on each (job, profile) prompt.

    Every input yields one record, in input order.  Records whose output
    cannot be used get ``record.rejected`` set to a reason (``truncated`` or
    ``unparseable``); they are never dropped silently.
    """
    if mode not in ("explanation", "classification"):
        raise ValueError(f"unknown mode {mode!r}")
    tmodel = teacher.model("teacher") if isinstance(teacher, Checkpoint) else teacher
    prompts = []
    for job, prof in inputs:
        job_text = extract_requirements(job.tokens) if compress else job.tokens
        prompts.append(render_prompt(job_text, prof.tokens, max_len=tmodel.config.max_seq_len, reserve=1))
    outs = greedy_decode_batch(tmodel, [VOCAB.encode(p) for p in prompts], max_new)
    records = []
    for (job, prof), prompt, out in zip(inputs, prompts, outs):
        target = VOCAB.decode(out[len(prompt):])
        parsed = parse_explanation(target)
        reason = None
        if not parsed.complete:
            reason = "truncated"
        elif parsed.label is None or (mode == "explanation" and parsed.malformed):
            reason = "unparseable"
        label = parsed.label if parsed.label is not None else FitLabel.LOW
        rec = ExampleRecord(f"{job.id}|{prof.id}", "teacher-model", label, coverage_from_lines(parsed.lines), prompt, target)
        rec.rejected = reason
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------


@dataclass
class PairExample:
    job: list[str]
    profile: list[str]
    label: int

    def layout(self, structure: str) -> dict:
        return classifier_inputs(structure, VOCAB.encode(self.job), VOCAB.encode(self.profile))


def pair_examples(
    pairs: Sequence[tuple[JobPosting, MemberProfile]],
    labels: Sequence[int] | None = None,
    compress: bool | str = True,
    rng: np.random.Generator | None = None,
) -> list[PairExample]:
    """Classifier inputs; ``compress="mixed"`` renders each job compressed with probability 1/2."""
    out = []
    for i, (job, prof) in enumerate(pairs):
        if compress == "mixed":
            c = bool(rng.random() < 0.5) if rng is not None else i % 2 == 0
        else:
            c = bool(compress)
        jt = extract_requirements(job.tokens) if c else job.tokens
        lab = int(labels[i]) if labels is not None else int(oracle_assess(job, prof)[0].label)
        out.append(PairExample(list(jt), list(prof.tokens), lab))
    return out


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    accuracy: float
    weighted_f1: float


def evaluate_classifier(clf: EncoderClassifier, examples: Sequence[PairExample]) -> ClassificationReport:
    probs = predict_proba(clf, [e.layout(clf.structure) for e in examples])
    return classification_report(list(np.argmax(probs, axis=-1)), [e.label for e in examples])


def distill_classifier(
    encoder_config: ModelConfig,
    train: Sequence[PairExample],
    cfg: TrainConfig,
    structure: str = "seqcls",
    pooling: str = "last",
    interaction: str = "concat",
    heldout: Sequence[PairExample] | None = None,
    head_dim: int = 64,
    freeze_encoder: bool = False,
    trunk: dict[str, np.ndarray] | None = None,
    **provenance,
) -> tuple[Checkpoint, list[EpochMetrics]]:
    """Cross-entropy training of encoder + MLP head on teacher/oracle labels."""
    if not train:
        raise ValueError("empty dataset")
    if len({e.label for e in train}) < 2:
        log.warning("training set has a single class; weighted F1 will be degenerate")
    clf = init_classifier(encoder_config, structure, pooling, interaction, head_dim, freeze_encoder, trunk)
    layouts = [e.layout(structure) for e in train]
    labels = np.array([e.label for e in train])
    for lay in layouts:
        for toks in lay.values():
            if len(toks) > encoder_config.max_seq_len:
                raise ValueError(f"classifier input of {len(toks)} tokens exceeds max_seq_len")
    heldout = list(heldout) if heldout is not None else []
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(clf.params, cfg.lr, cfg.weight_decay)
    history = []

    def record(epoch: int, loss: float) -> None:
        if heldout:
            rep = evaluate_classifier(clf, heldout)
            history.append(EpochMetrics(epoch, loss, rep.accuracy, rep.weighted_f1))
        else:
            history.append(EpochMetrics(epoch, loss, float("nan"), float("nan")))

    if cfg.epochs == 0:
        record(0, float("nan"))
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s : s + cfg.batch_size]
            batch = {k: pad_batch([layouts[i][k] for i in idx]) for k in layouts[0]}
            tape = Tape()
            p = bind_classifier(tape, clf, train=True)
            loss = class_nll(nx.softmax(classifier_logits(tape, p, clf, batch)), labels[idx])
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite loss in epoch {epoch} batch {b}")
            grads = tape.backward(loss)
            named = {k: grads[v.id] for k, v in p.items() if v.id in grads}
            opt.step(clf.params, _clip(named, cfg.grad_clip))
            total += float(loss.value) * len(idx)
        record(epoch + 1, total / len(train))
        log.info("cls epoch %d: loss %.4f acc %.4f", epoch, history[-1].train_loss, history[-1].accuracy)
    prov = {"stage": "classifier", "config_digest": cfg.digest()}
    prov.update(provenance)
    return Checkpoint.from_model(clf, **prov), history


# ---------------------------------------------------------------------------
# multi-stage paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    student: ModelConfig
    train: TrainConfig
    teacher: str = "previous"  # "initial" | "previous" | "fresh-sft"


@dataclass(frozen=True)
class DistillPath:
    name: str
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a path needs at least one stage")
        for i, st in enumerate(self.stages):
            if st.teacher not in ("initial", "previous", "fresh-sft"):
                raise ValueError(f"stage {i}: unknown teacher source {st.teacher!r}")
            if i > 0 and st.teacher == "fresh-sft":
                raise ValueError(f"stage {i}: only the first stage may train from scratch")


@dataclass
class PathResult:
    name: str
    checkpoints: list[Checkpoint]
    scores: list[RougeScores]
    rows: list[dict]
    error: str | None = None


def teacher_references(teacher: LanguageModel, prompts: Sequence[list[str]], max_new: int = 48) -> list[list[str]]:
    """Greedy teacher outputs (including ``<eos>`` when produced) for each prompt."""
    outs = greedy_decode_batch(teacher, [VOCAB.encode(p) for p in prompts], max_new)
    return [VOCAB.decode(o[len(p):]) for o, p in zip(outs, prompts)]


def run_path(
    path: DistillPath,
    teacher: Checkpoint | None,
    seed_data: Sequence[ExampleRecord],
    eval_prompts: Sequence[list[str]],
    references: Sequence[list[str]],
    max_new: int = 48,
    on_checkpoint: Callable[[int, Checkpoint], None] | None = None,
) -> PathResult:
    """Execute stages in order; each stage's student teaches the next.

    The returned checkpoints start with the root teacher.  A failing stage
    stops the path; earlier checkpoints are kept and ``error`` is set.
    """
    from .evaluation import eval_explanations  # local: evaluation imports stay one-way

    result = PathResult(path.name, [], [], [])
    current = teacher
    if current is not None:
        result.checkpoints.append(current)
    for i, st in enumerate(path.stages):
        try:
            if st.teacher == "fresh-sft" or current is None:
                ckpt, _ = train_sft(st.student, seed_data, st.train, path=path.name, stage_index=i)
            else:
                src = teacher if st.teacher == "initial" else current
                ckpt, _ = distill_explanation(src, st.student, seed_data, st.train, path=path.name, stage_index=i)
        except Exception as exc:  # partial artifacts stay in result
            result.error = f"stage {i} failed: {exc}"
            log.error("path %s: %s", path.name, result.error)
            break
        if on_checkpoint is not None:
            on_checkpoint(i, ckpt)
        result.checkpoints.append(ckpt)
        current = ckpt
        scores = eval_explanations(ckpt.model(), eval_prompts, references, max_new)
        result.scores.append(scores)
        result.rows.append({
            "path": path.name,
            "teacher": (result.checkpoints[-2].config.label if len(result.checkpoints) > 1 else "-"),
            "student": ckpt.config.label,
            "divergence": st.train.divergence.value if st.teacher != "fresh-sft" else "-",
            **scores.summary(),
        })
    return result
