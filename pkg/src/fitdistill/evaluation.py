"""Metrics: ROUGE-1/2/L on token ids, NLL, accuracy and weighted F1, report files.

ROUGE works on raw token sequences: no stemming, no stopwords.  Every
F-measure is the plain harmonic mean (beta = 1).  Corpus ROUGE is the
arithmetic mean of per-example F1.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

log = logging.getLogger(__name__)

LABELS = ("low", "medium", "high")


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    def swapped(self) -> "PRF":
        return PRF(self.recall, self.precision, self.f1)


def _prf(overlap: int, n_cand: int, n_ref: int) -> PRF:
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f)


def ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[Hashable], reference: Sequence[Hashable], n: int = 1) -> PRF:
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    c, r = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((c & r).values())
    return _prf(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[Hashable], reference: Sequence[Hashable]) -> PRF:
    return _prf(lcs_length(candidate, reference), len(candidate), len(reference))


@dataclass(frozen=True)
class RougeScores:
    rouge1: PRF
    rouge2: PRF
    rougeL: PRF
    mean_nll: float
    n: int = 0
    failures: int = 0

    def summary(self) -> dict:
        return {
            "nll": self.mean_nll,
            "rouge1": self.rouge1.f1,
            "rouge2": self.rouge2.f1,
            "rougeL": self.rougeL.f1,
        }


def corpus_rouge(candidates: Sequence[Sequence[Hashable]], references: Sequence[Sequence[Hashable]], mean_nll: float = 0.0, failures: int = 0) -> RougeScores:
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if not references:
        raise ValueError("empty evaluation set")
    rows = {"1": [], "2": [], "L": []}
    for c, r in zip(candidates, references):
        rows["1"].append(rouge_n(c, r, 1))
        rows["2"].append(rouge_n(c, r, 2))
        rows["L"].append(rouge_l(c, r))

    def avg(xs: list[PRF]) -> PRF:
        return PRF(*(float(np.mean([getattr(x, k) for x in xs])) for k in ("precision", "recall", "f1")))

    return RougeScores(avg(rows["1"]), avg(rows["2"]), avg(rows["L"]), float(mean_nll), len(references), failures)


def _strip_eos(tokens: Sequence[str]) -> list[str]:
    toks = list(tokens)
    return toks[: toks.index("<eos>")] if "<eos>" in toks else toks


def reference_nll(model, prompts: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> list[float]:
    """Per-example mean token NLL of each reference continuation (teacher forcing)."""
    from .domain import VOCAB
    from .models import lm_forward
    from .numerics import log_softmax_np

    out = []
    S = model.config.max_seq_len
    for prompt, ref in zip(prompts, references):
        ids = VOCAB.encode(list(prompt) + list(ref))[: S + 1]
        n_prompt = len(prompt)
        if not ref or n_prompt >= len(ids):
            raise ValueError("reference continuation is empty or does not fit the context")
        logp = log_softmax_np(lm_forward(model, ids[:-1]))
        pos = np.arange(n_prompt - 1, len(ids) - 1)
        picked = np.maximum(logp[pos, np.asarray(ids)[pos + 1]], np.log(1e-12))
        out.append(float(-picked.mean()))
    return out


def eval_explanations(model, prompts: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_new: int = 48) -> RougeScores:
    """Greedy-decode every prompt and score it against its reference.

    ``model`` is a language model or an lm checkpoint.  Examples whose decode
    fails are logged, scored 0 and counted in ``failures``.  ``<eos>`` is
    stripped from both sides before scoring.
    """
    from .domain import VOCAB
    from .models import greedy_decode_batch

    if hasattr(model, "kind"):
        model = model.model()
    if len(prompts) != len(references):
        raise ValueError(f"{len(prompts)} prompts for {len(references)} references")
    if not prompts:
        raise ValueError("empty evaluation set")
    S = model.config.max_seq_len
    ok = [i for i, p in enumerate(prompts) if 0 < len(p) < S]
    failures = len(prompts) - len(ok)
    for i in set(range(len(prompts))) - set(ok):
        log.warning("example %d: prompt of %d tokens cannot be decoded", i, len(prompts[i]))
    decoded = greedy_decode_batch(model, [VOCAB.encode(prompts[i]) for i in ok], max_new)
    cands: list[list[str]] = [[] for _ in prompts]
    for i, out in zip(ok, decoded):
        cands[i] = VOCAB.decode(out[len(prompts[i]):])
    nll = []
    for i in ok:
        try:
            nll.extend(reference_nll(model, [prompts[i]], [references[i]]))
        except ValueError as exc:
            log.warning("example %d: %s", i, exc)
    return corpus_rouge(
        [_strip_eos(c) for c in cands],
        [_strip_eos(r) for r in references],
        float(np.mean(nll)) if nll else float("nan"),
        failures,
    )


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


@dataclass
class ClassificationReport:
    accuracy: float
    weighted_f1: float
    per_category: dict[str, PRF]
    support: dict[str, int]
    confusion: list[list[int]]  # rows: true label, cols: predicted

    @property
    def macro_f1(self) -> float:
        return float(np.mean([self.per_category[c].f1 for c in LABELS]))


def classification_report(predictions: Sequence[int], labels: Sequence[int]) -> ClassificationReport:
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise ValueError("empty label set")
    conf = np.zeros((3, 3), dtype=int)
    for p, t in zip(predictions, labels):
        conf[int(t), int(p)] += 1
    per, support = {}, {}
    for c, name in enumerate(LABELS):
        tp = conf[c, c]
        per[name] = _prf(int(tp), int(conf[:, c].sum()), int(conf[c, :].sum()))
        support[name] = int(conf[c, :].sum())
    n = len(labels)
    if sum(1 for s in support.values() if s) < 2:
        log.warning("fewer than two classes present; weighted F1 is degenerate")
    wf1 = sum(support[c] * per[c].f1 for c in LABELS if support[c]) / n
    return ClassificationReport(float(np.trace(conf) / n), float(wf1), per, support, conf.tolist())


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

EXPLANATION_COLUMNS = ("path", "teacher", "student", "divergence", "nll", "rouge1", "rouge2", "rougeL")
CLASSIFICATION_COLUMNS = ("backbone", "structure", "pooling", "interaction", "accuracy", "weighted_f1")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if not rows:
        raise ValueError("no rows to format")
    columns = list(columns or rows[0].keys())
    for r in rows:
        if set(r) != set(columns):
            raise ValueError(f"row columns {sorted(r)} differ from {sorted(columns)}")
    cells = [[_fmt(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"


def emit_report(rows: Sequence[dict], destination: str | Path, columns: Sequence[str] | None = None) -> tuple[Path, Path]:
    """Write ``<dest>.txt`` (aligned table) and ``<dest>.jsonl`` (one row per line)."""
    columns = list(columns or rows[0].keys()) if rows else list(columns or [])
    table = format_table(rows, columns)
    dest = Path(destination)
    try:
        dest.parent.mkdir(parents=True, exist_ok=True)
        txt, jl = dest.with_suffix(".txt"), dest.with_suffix(".jsonl")
        txt.write_text(table, encoding="utf-8")
        with open(jl, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps({c: r[c] for c in columns}, separators=(",", ":")) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {dest}: {exc}") from exc
    return txt, jl


def read_report(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
