"""Serving surface: job compression, fit classification, on-demand explanation
and a latency/throughput benchmark over a mixed request stream."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .domain import (
    RATING,
    VOCAB,
    FitAssessment,
    FitLabel,
    ParsedExplanation,
    extract_requirements,
    is_requirement_line,
    parse_explanation,
    render_prompt,
    split_lines,
)
from .models import EncoderClassifier, LanguageModel, classifier_inputs, greedy_decode_batch, predict_proba

DEFAULT_MIX = (30, 4, 1)  # classification : summarization : explanation


@dataclass(frozen=True)
class PipelineConfig:
    classifier: str | None = None
    explainer: str | None = None
    summarizer: str | None = None
    compression: str = "rule"
    max_new: int = 48
    bench_counts: tuple[int, int, int] = DEFAULT_MIX
    bench_batch: int = 1

    def __post_init__(self):
        if self.compression not in ("rule", "model"):
            raise ValueError(f"compression must be 'rule' or 'model', got {self.compression!r}")
        if self.compression == "model" and not self.summarizer:
            raise ValueError("compression mode 'model' requires a summarizer checkpoint")
        if any(c < 0 for c in self.bench_counts):
            raise ValueError("bench counts must be nonnegative")
        for name in ("classifier", "explainer", "summarizer"):
            loc = getattr(self, name)
            if loc is not None and not Path(loc).exists():
                raise FileNotFoundError(f"{name} checkpoint not found: {loc}")


@dataclass
class Pipeline:
    """Loaded, read-only models plus settings."""

    classifier: EncoderClassifier | None = None
    explainer: LanguageModel | None = None
    summarizer: LanguageModel | None = None
    compression: str = "rule"
    max_new: int = 48

    @classmethod
    def load(cls, cfg: PipelineConfig) -> "Pipeline":
        def lm(loc):
            return load_checkpoint(loc).model() if loc else None

        clf = load_checkpoint(cfg.classifier).classifier_model() if cfg.classifier else None
        return cls(clf, lm(cfg.explainer), lm(cfg.summarizer), cfg.compression, cfg.max_new)


def _tokens(text: str | Sequence[str]) -> list[str]:
    toks = text.split() if isinstance(text, str) else list(text)
    VOCAB.encode(toks)  # raises on out-of-vocabulary words
    return toks


@dataclass
class ServeResult:
    fit: FitAssessment | None
    explanation: list[str] | None = None
    status: str = "ok"  # ok | malformed | truncated
    timings: dict[str, float] = field(default_factory=dict)
    compressed_ratio: float = 1.0


def summarize_job(job_text: str | Sequence[str], mode: str = "rule", summarizer: LanguageModel | None = None,
                  max_new: int = 64) -> tuple[list[str], float]:
    """Compressed requirement text and ``len(compressed) / len(original)``.

    Rule mode keeps the requirement lines verbatim.  Model mode greedy-decodes
    the extraction prompt with ``summarizer``.
    """
    toks = _tokens(job_text)
    if not toks:
        raise ValueError("empty job text")
    if mode == "rule":
        out = extract_requirements(toks)
    elif mode == "model":
        if summarizer is None:
            raise ValueError("model-mode summarization needs a summarizer checkpoint")
        prompt = render_prompt(toks, [], variant="extract")
        gen = greedy_decode_batch(summarizer, [VOCAB.encode(prompt)], max_new)[0][len(prompt):]
        out = VOCAB.decode(gen)
        if "<eos>" in out:
            out = out[: out.index("<eos>")]
        out = [t for line in split_lines(out) if is_requirement_line(line) for t in line]
    else:
        raise ValueError(f"unknown compression mode {mode!r}")
    return out, len(out) / len(toks)


def _summarize(pipe: Pipeline, job: Sequence[str]) -> tuple[list[str], float]:
    return summarize_job(job, pipe.compression, pipe.summarizer)


def serve_fit(pipe: Pipeline, job_text, profile_text, compress: bool = True) -> ServeResult:
    """Fit label from the classifier on (compressed job, profile)."""
    if pipe.classifier is None:
        raise ValueError("no classifier loaded")
    clf = pipe.classifier
    timings = {}
    t0 = time.perf_counter()
    job = _tokens(job_text)
    prof = _tokens(profile_text)
    if compress:
        job, ratio = _summarize(pipe, job)
    else:
        ratio = 1.0
    t1 = time.perf_counter()
    timings["summarize"] = t1 - t0
    lay = classifier_inputs(clf.structure, VOCAB.encode(job), VOCAB.encode(prof))
    longest = max(len(v) for v in lay.values())
    if longest > clf.config.max_seq_len:
        raise ValueError(f"input of {longest} tokens exceeds the classifier context {clf.config.max_seq_len}")
    probs = predict_proba(clf, [lay])[0]
    label = FitLabel(int(np.argmax(probs)))
    timings["classify"] = time.perf_counter() - t1
    return ServeResult(FitAssessment(label, RATING[label], float("nan")), None, "ok", timings, ratio)


def explanation_status(target: Sequence[str]) -> tuple[str, ParsedExplanation]:
    parsed = parse_explanation(target)
    if not parsed.complete:
        return "truncated", parsed
    if parsed.malformed or parsed.label is None or not parsed.lines:
        return "malformed", parsed
    return "ok", parsed


def serve_explanations(pipe: Pipeline, requests: Sequence[tuple], compress: bool = True) -> list[ServeResult]:
    """Batched explanation decoding; each result is flagged ok, malformed or truncated."""
    if pipe.explainer is None:
        raise ValueError("no explainer loaded")
    prompts, ratios = [], []
    for job_text, profile_text in requests:
        job = _tokens(job_text)
        if compress:
            job, ratio = _summarize(pipe, job)
        else:
            ratio = 1.0
        prompts.append(render_prompt(job, _tokens(profile_text), max_len=pipe.explainer.config.max_seq_len, reserve=1))
        ratios.append(ratio)
    t0 = time.perf_counter()
    outs = greedy_decode_batch(pipe.explainer, [VOCAB.encode(p) for p in prompts], pipe.max_new)
    elapsed = time.perf_counter() - t0
    results = []
    for prompt, out, ratio in zip(prompts, outs, ratios):
        text = VOCAB.decode(out[len(prompt):])
        status, parsed = explanation_status(text)
        fit = FitAssessment(parsed.label, RATING[parsed.label], float("nan")) if parsed.label is not None else None
        results.append(ServeResult(fit, text, status, {"explain": elapsed / max(1, len(prompts))}, ratio))
    return results


def serve_explanation(pipe: Pipeline, job_text, profile_text, compress: bool = True) -> ServeResult:
    return serve_explanations(pipe, [(job_text, profile_text)], compress)[0]


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

BENCH_COLUMNS = ("module", "requests", "mean_ms", "p95_ms", "qps", "relative", "served_qps", "served_relative")


def _p95(xs: Sequence[float]) -> float:
    return float(np.percentile(np.asarray(xs), 95, method="higher"))


def bench(pipe: Pipeline, requests: Sequence[tuple], counts: Sequence[int] = DEFAULT_MIX) -> list[dict]:
    """Replay classification, summarization and explanation requests, interleaved.

    ``requests`` is a pool of (job text, profile text) cycled in order.  Each
    request is timed on its own.  ``qps`` is per-module capacity
    (``1 / mean latency``); ``served_qps`` is requests completed per second of
    the whole replay, so it follows the workload mix.  Both are also given
    relative to the explanation module.
    """
    if len(counts) != 3 or any(c <= 0 for c in counts):
        raise ValueError("bench needs three positive request counts")
    if not requests:
        raise ValueError("empty request pool")
    modules = ("classification", "summarization", "explanation")
    # spread each module's requests evenly over the run, ties in module order
    events = sorted(((k + 0.5) / c, mi) for mi, c in enumerate(counts) for k in range(c))
    schedule = [modules[mi] for _, mi in events]
    lat: dict[str, list[float]] = {m: [] for m in modules}
    started = time.perf_counter()
    for i, m in enumerate(schedule):
        job, prof = requests[i % len(requests)]
        t0 = time.perf_counter()
        if m == "classification":
            serve_fit(pipe, job, prof)
        elif m == "summarization":
            _summarize(pipe, _tokens(job))
        else:
            serve_explanation(pipe, job, prof)
        lat[m].append(time.perf_counter() - t0)
    wall = time.perf_counter() - started
    base = 1.0 / float(np.mean(lat["explanation"]))
    rows = []
    for m in modules:
        mean = float(np.mean(lat[m]))
        rows.append({
            "module": m,
            "requests": len(lat[m]),
            "mean_ms": mean * 1e3,
            "p95_ms": _p95(lat[m]) * 1e3,
            "qps": 1.0 / mean,
            "relative": (1.0 / mean) / base if m != "explanation" else 1.0,
            "served_qps": len(lat[m]) / wall,
            "served_relative": len(lat[m]) / len(lat["explanation"]),
        })
    return rows
