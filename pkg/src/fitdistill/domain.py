"""Synthetic job/profile domain, rule-based fit oracle and dataset assembly.

Text is lowercase, whitespace-delimited words over a closed vocabulary.
Every job or profile line ends with ``;``.  A job requirement line reads
``required <skill> <n> years ;`` or ``preferred <skill> <n> years ;``; any
other job line is filler (perks, culture, benefits).

Fit rule, per requirement of the job:

* skill present with ``years >= minimum``       -> met (credit 1)
* skill present with ``0 < years < minimum``    -> partial (credit 0.5)
* otherwise (absent, or zero years)             -> unmet (credit 0)

``coverage = sum(credit * w) / sum(w)`` with ``w = 2`` for required and
``w = 1`` for preferred lines.  High iff coverage >= 0.75, Medium iff
0.4 <= coverage < 0.75, Low otherwise.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>")

SKILLS = (
    "python", "java", "sql", "excel", "sales", "marketing", "design", "finance",
    "spanish", "cloud", "security", "testing", "leadership", "writing", "statistics", "linux",
)
MAX_YEARS = 15
NUMBERS = tuple(str(i) for i in range(MAX_YEARS + 1))

# filler lines; each is a template with one ``{}`` slot filled from its word list
NOISE_TEMPLATES = (
    ("we offer {} work to every employee ;", ("flexible", "remote")),
    ("enjoy free {} and gym access ;", ("lunch", "parking")),
    ("our team values open {} ;", ("communication", "feedback")),
    ("competitive salary and annual {} ;", ("bonus", "equity")),
    ("join a fast growing {} company ;", ("global", "friendly")),
    ("health dental and {} coverage for all ;", ("vision", "family")),
    ("modern office near the city {} ;", ("center", "park")),
    ("we host weekly team {} ;", ("events", "lunches")),
    ("learning budget for every {} ;", ("employee", "team")),
    ("we celebrate diverse {} and ideas ;", ("backgrounds", "voices")),
)

_TASK = "task : rate profile fit ;".split()
_EXTRACT = "extract : requirements from job ; job :".split()
_EVALUATE = "evaluate : profile against requirements ; profile :".split()
_REASON = "reason : each requirement then fit ;".split()
_OUTPUT = "output : one line each then fit ;".split()
_X_TASK = "task : extract requirements ;".split()
_X_OUTPUT = "output : requirement lines only ;".split()

PROMPT_SECTIONS = ("task", "extract", "evaluate", "reason", "output")

EXPLANATION_WORDS = ("required", "preferred", "years", "needs", "has", "met", "partial", "unmet",
                     "fit", "low", "medium", "high", "rating")


def _build_vocab() -> tuple[str, ...]:
    words: list[str] = list(SPECIALS)
    seen = set(words)

    def add(ws: Iterable[str]):
        for w in ws:
            if w not in seen and w != "{}":
                seen.add(w)
                words.append(w)

    add([";", ":"])
    add(SKILLS)
    add(NUMBERS)
    add(EXPLANATION_WORDS)
    for sec in (_TASK, _EXTRACT, _EVALUATE, _REASON, _OUTPUT, _X_TASK, _X_OUTPUT):
        add(sec)
    for tmpl, slot in NOISE_TEMPLATES:
        add(tmpl.split())
        add(slot)
    return tuple(words)


class Vocab:
    """Closed word-level vocabulary with four reserved specials."""

    def __init__(self, words: Sequence[str] | None = None):
        self.words = tuple(words) if words is not None else _build_vocab()
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, tokens: Sequence[str] | str) -> list[int]:
        if isinstance(tokens, str):
            tokens = tokens.split()
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise ValueError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[int(i)] for i in ids]


VOCAB = Vocab()


class FitLabel(enum.IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2

    @property
    def word(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, s: "str | int | FitLabel") -> "FitLabel":
        if isinstance(s, str):
            try:
                return cls[s.upper()]
            except KeyError:
                raise ValueError(f"unknown fit label {s!r}") from None
        return cls(int(s))


RATING = {FitLabel.LOW: 1 / 6, FitLabel.MEDIUM: 1 / 2, FitLabel.HIGH: 5 / 6}
HIGH_AT = 0.75
MEDIUM_AT = 0.4
IMPORTANCE_WEIGHT = {"required": 2.0, "preferred": 1.0}
VERDICT_CREDIT = {"met": 1.0, "partial": 0.5, "unmet": 0.0}


def label_for(coverage: float) -> FitLabel:
    if coverage >= HIGH_AT:
        return FitLabel.HIGH
    if coverage >= MEDIUM_AT:
        return FitLabel.MEDIUM
    return FitLabel.LOW


# ---------------------------------------------------------------------------
# domain objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Requirement:
    skill: str
    min_years: int
    importance: str  # required | preferred

    def tokens(self) -> list[str]:
        return [self.importance, self.skill, str(self.min_years), "years", ";"]


@dataclass(frozen=True)
class JobPosting:
    id: str
    requirements: tuple[Requirement, ...]
    noise: tuple[tuple[str, ...], ...]
    order: tuple[tuple[str, int], ...]  # ("req" | "noise", index) in rendering order

    def __post_init__(self):
        if not self.requirements:
            raise ValueError("a job needs at least one requirement")
        skills = [r.skill for r in self.requirements]
        if len(set(skills)) != len(skills):
            raise ValueError("requirement skills must be distinct")

    def lines(self) -> list[list[str]]:
        out = []
        for kind, i in self.order:
            out.append(self.requirements[i].tokens() if kind == "req" else list(self.noise[i]))
        return out

    @property
    def tokens(self) -> list[str]:
        return [t for line in self.lines() for t in line]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "requirements": [[r.skill, r.min_years, r.importance] for r in self.requirements],
            "noise": [" ".join(n) for n in self.noise],
            "order": [[k, i] for k, i in self.order],
        }

    @classmethod
    def from_json(cls, d: dict) -> "JobPosting":
        return cls(
            id=d["id"],
            requirements=tuple(Requirement(s, int(y), imp) for s, y, imp in d["requirements"]),
            noise=tuple(tuple(n.split()) for n in d["noise"]),
            order=tuple((k, int(i)) for k, i in d["order"]),
        )


@dataclass(frozen=True)
class MemberProfile:
    id: str
    skills: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [s for s, _ in self.skills]
        if len(set(names)) != len(names):
            raise ValueError("profile skills must be distinct")
        if any(y < 0 for _, y in self.skills):
            raise ValueError("profile years must be nonnegative")

    @property
    def tokens(self) -> list[str]:
        return [t for s, y in self.skills for t in (s, str(y), "years", ";")]

    def years(self, skill: str) -> int:
        return dict(self.skills).get(skill, 0)

    def has(self, skill: str) -> bool:
        return any(s == skill for s, _ in self.skills)

    def to_json(self) -> dict:
        return {"id": self.id, "skills": [[s, y] for s, y in self.skills]}

    @classmethod
    def from_json(cls, d: dict) -> "MemberProfile":
        return cls(id=d["id"], skills=tuple((s, int(y)) for s, y in d["skills"]))


@dataclass(frozen=True)
class FitAssessment:
    label: FitLabel
    rating: float
    coverage: float

    @classmethod
    def from_coverage(cls, coverage: float) -> "FitAssessment":
        label = label_for(coverage)
        return cls(label, RATING[label], coverage)

    @classmethod
    def from_label(cls, label: FitLabel, coverage: float = float("nan")) -> "FitAssessment":
        return cls(label, RATING[label], coverage)


@dataclass(frozen=True)
class ExplanationLine:
    skill: str
    importance: str
    min_years: int
    years: int
    verdict: str  # met | partial | unmet

    def tokens(self) -> list[str]:
        return [self.skill, self.importance, "needs", str(self.min_years), "has", str(self.years),
                self.verdict, ";"]


@dataclass(frozen=True)
class Explanation:
    lines: tuple[ExplanationLine, ...]
    label: FitLabel

    def tokens(self) -> list[str]:
        body = [t for line in self.lines for t in line.tokens()]
        return body + ["fit", ":", self.label.word]


@dataclass
class ExampleRecord:
    id: str
    source: str  # oracle | teacher-model | filtered
    label: FitLabel
    coverage: float
    prompt: list[str]
    target: list[str]  # ends with <eos> when complete

    def to_json(self) -> dict:
        # field order is part of the file format
        return {
            "id": self.id,
            "source": self.source,
            "label": self.label.word,
            "coverage": self.coverage,
            "prompt_tokens": self.prompt,
            "target_tokens": self.target,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExampleRecord":
        return cls(
            id=d["id"],
            source=d["source"],
            label=FitLabel.parse(d["label"]),
            coverage=float(d["coverage"]),
            prompt=list(d["prompt_tokens"]),
            target=list(d["target_tokens"]),
        )

    @property
    def job_id(self) -> str:
        return self.id.split("|")[0]

    @property
    def profile_id(self) -> str:
        return self.id.split("|")[1]


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _check_range(name: str, lo: int, hi: int) -> None:
    if lo < 0 or hi < lo:
        raise ValueError(f"infeasible {name} range ({lo}, {hi})")


def gen_job(
    rng: np.random.Generator,
    catalog_size: int = len(SKILLS),
    req_range: tuple[int, int] = (2, 4),
    noise_range: tuple[int, int] = (6, 10),
    years_range: tuple[int, int] = (1, 8),
    preferred_prob: float = 0.4,
    job_id: str = "j0",
) -> JobPosting:
    _check_range("requirement count", *req_range)
    _check_range("noise count", *noise_range)
    _check_range("years", *years_range)
    if req_range[0] < 1:
        raise ValueError("requirement count range must start at 1 or more")
    if not 1 <= catalog_size <= len(SKILLS):
        raise ValueError(f"catalog size must be in 1..{len(SKILLS)}")
    if catalog_size < req_range[1]:
        raise ValueError(
            f"catalog size {catalog_size} is smaller than max requirement count {req_range[1]}"
        )
    if years_range[1] > 10:
        raise ValueError("minimum years must be at most 10")
    n_req = int(rng.integers(req_range[0], req_range[1] + 1))
    n_noise = int(rng.integers(noise_range[0], noise_range[1] + 1))
    skills = rng.choice(catalog_size, size=n_req, replace=False)
    reqs = tuple(
        Requirement(
            SKILLS[int(s)],
            int(rng.integers(years_range[0], years_range[1] + 1)),
            "preferred" if rng.random() < preferred_prob else "required",
        )
        for s in skills
    )
    noise = []
    for _ in range(n_noise):
        tmpl, slot = NOISE_TEMPLATES[int(rng.integers(len(NOISE_TEMPLATES)))]
        noise.append(tuple(tmpl.format(slot[int(rng.integers(len(slot)))]).split()))
    kinds = ["req"] * n_req + ["noise"] * n_noise
    kinds = [kinds[int(i)] for i in rng.permutation(len(kinds))]
    # requirements are indexed in rendering order
    counts = {"req": 0, "noise": 0}
    order = []
    for k in kinds:
        order.append((k, counts[k]))
        counts[k] += 1
    return JobPosting(job_id, reqs, tuple(noise), tuple(order))


def gen_profile(
    rng: np.random.Generator,
    catalog_size: int = len(SKILLS),
    skill_range: tuple[int, int] = (1, 5),
    years_range: tuple[int, int] = (1, 12),
    focus: JobPosting | None = None,
    focus_prob: float = 0.7,
    profile_id: str = "p0",
) -> MemberProfile:
    """Random profile; with ``focus`` it mimics a recommended member for that job.

    Under ``focus`` each requirement skill of the job is included with
    probability ``focus_prob`` with years drawn around its minimum, then the
    profile is topped up with random skills to the drawn count.
    """
    _check_range("skill count", *skill_range)
    _check_range("years", *years_range)
    if skill_range[1] > catalog_size:
        raise ValueError(f"catalog size {catalog_size} is smaller than max skill count {skill_range[1]}")
    if years_range[1] > MAX_YEARS:
        raise ValueError(f"profile years must be at most {MAX_YEARS}")
    n = int(rng.integers(skill_range[0], skill_range[1] + 1))
    chosen: dict[str, int] = {}
    if focus is not None:
        for r in focus.requirements:
            if len(chosen) >= n:
                break
            if rng.random() < focus_prob:
                lo = max(years_range[0], r.min_years - 3)
                hi = min(years_range[1], r.min_years + 3)
                chosen[r.skill] = int(rng.integers(lo, max(lo, hi) + 1))
    pool = [SKILLS[i] for i in rng.permutation(catalog_size)]
    for s in pool:
        if len(chosen) >= n:
            break
        if s not in chosen:
            chosen[s] = int(rng.integers(years_range[0], years_range[1] + 1))
    items = list(chosen.items())
    perm = rng.permutation(len(items)) if items else []
    return MemberProfile(profile_id, tuple(items[int(i)] for i in perm))


def oracle_assess(job: JobPosting, profile: MemberProfile) -> tuple[FitAssessment, Explanation]:
    lines = []
    num = den = 0.0
    for r in job.requirements:
        years = profile.years(r.skill)
        if profile.has(r.skill) and years >= r.min_years and years > 0:
            verdict = "met"
        elif profile.has(r.skill) and 0 < years < r.min_years:
            verdict = "partial"
        elif profile.has(r.skill) and r.min_years == 0:
            verdict = "met"
        else:
            verdict = "unmet"
        w = IMPORTANCE_WEIGHT[r.importance]
        num += VERDICT_CREDIT[verdict] * w
        den += w
        lines.append(ExplanationLine(r.skill, r.importance, r.min_years, years, verdict))
    fit = FitAssessment.from_coverage(num / den)
    return fit, Explanation(tuple(lines), fit.label)


# ---------------------------------------------------------------------------
# prompts and compression
# ---------------------------------------------------------------------------


def split_lines(tokens: Sequence[str]) -> list[list[str]]:
    lines, cur = [], []
    for t in tokens:
        cur.append(t)
        if t == ";":
            lines.append(cur)
            cur = []
    if cur:
        lines.append(cur)
    return lines


def is_requirement_line(line: Sequence[str]) -> bool:
    return len(line) == 5 and line[0] in IMPORTANCE_WEIGHT and line[1] in SKILLS and line[-1] == ";"


def extract_requirements(job_tokens: Sequence[str]) -> list[str]:
    """Keep exactly the requirement lines, in order."""
    return [t for line in split_lines(job_tokens) if is_requirement_line(line) for t in line]


def render_prompt(
    job_tokens: Sequence[str],
    profile_tokens: Sequence[str],
    *,
    variant: str = "full",
    rating: FitLabel | None = None,
    max_len: int | None = None,
    reserve: int = 0,
) -> list[str]:
    """Structured prompt as word tokens, starting with ``<bos>`` and ending with ``<sep>``.

    ``variant="full"`` emits the five sections task, extract (with the job
    text), evaluate (with the profile text), reason, output.
    ``variant="extract"`` is the extraction subtask: job text only.
    """
    if variant == "full":
        reason = list(_REASON)
        if rating is not None:
            reason += ["rating", ":", rating.word, ";"]
        toks = ["<bos>", *_TASK, *_EXTRACT, *job_tokens, *_EVALUATE, *profile_tokens, *reason, *_OUTPUT, "<sep>"]
    elif variant == "extract":
        toks = ["<bos>", *_X_TASK, *_EXTRACT, *job_tokens, *_X_OUTPUT, "<sep>"]
    else:
        raise ValueError(f"unknown prompt variant {variant!r}")
    if max_len is not None and len(toks) > max_len - reserve:
        raise ValueError(f"prompt has {len(toks)} tokens; limit is {max_len - reserve}")
    return toks


def prompt_sections(prompt: Sequence[str]) -> list[str]:
    """Section headers found in a rendered prompt, in order."""
    heads = []
    for i in range(len(prompt) - 1):
        if prompt[i] in PROMPT_SECTIONS and prompt[i + 1] == ":" and (i == 0 or prompt[i - 1] in ("<bos>", ";")):
            heads.append(prompt[i])
    return heads


def make_record(
    job: JobPosting,
    profile: MemberProfile,
    *,
    compress: bool = True,
    with_rating: bool = False,
    source: str = "oracle",
) -> ExampleRecord:
    fit, expl = oracle_assess(job, profile)
    job_text = extract_requirements(job.tokens) if compress else job.tokens
    prompt = render_prompt(job_text, profile.tokens, rating=fit.label if with_rating else None)
    return ExampleRecord(f"{job.id}|{profile.id}", source, fit.label, fit.coverage, prompt, expl.tokens() + ["<eos>"])


def make_extraction_record(job: JobPosting) -> ExampleRecord:
    """Extraction subtask sample (full job text -> requirement lines)."""
    return ExampleRecord(
        f"{job.id}|-", "oracle", FitLabel.LOW, 0.0,
        render_prompt(job.tokens, [], variant="extract"),
        extract_requirements(job.tokens) + ["<eos>"],
    )


# ---------------------------------------------------------------------------
# parsing model output
# ---------------------------------------------------------------------------


@dataclass
class ParsedExplanation:
    lines: list[ExplanationLine] = field(default_factory=list)
    label: FitLabel | None = None
    complete: bool = False  # ended with <eos>
    malformed: bool = False


def parse_explanation(target: Sequence[str]) -> ParsedExplanation:
    toks = list(target)
    out = ParsedExplanation()
    if toks and toks[-1] == "<eos>":
        out.complete = True
        toks = toks[:-1]
    if "<eos>" in toks:
        toks = toks[: toks.index("<eos>")]
    body, fit = toks, None
    if len(toks) >= 3 and toks[-3:-1] == ["fit", ":"]:
        body, fit = toks[:-3], toks[-1]
    if fit in ("low", "medium", "high"):
        out.label = FitLabel.parse(fit)
    else:
        out.malformed = True
    for line in split_lines(body):
        ok = (
            len(line) == 8
            and line[1] in IMPORTANCE_WEIGHT
            and line[2] == "needs"
            and line[4] == "has"
            and line[6] in VERDICT_CREDIT
            and line[7] == ";"
            and line[3].isdigit()
            and line[5].isdigit()
        )
        if not ok:
            out.malformed = True
            continue
        out.lines.append(ExplanationLine(line[0], line[1], int(line[3]), int(line[5]), line[6]))
    return out


def parse_fit_line(target: Sequence[str]) -> FitLabel | None:
    """Label from the ``fit : <label>`` line, or None when unparseable."""
    toks = list(target)
    if "<eos>" in toks:
        toks = toks[: toks.index("<eos>")]
    for i in range(len(toks) - 2, 0, -1):
        if toks[i - 1] == "fit" and toks[i] == ":" and toks[i + 1] in ("low", "medium", "high"):
            return FitLabel.parse(toks[i + 1])
    return None


# ---------------------------------------------------------------------------
# filtering, sampling and dataset assembly
# ---------------------------------------------------------------------------


Lookup = dict[str, "JobPosting | MemberProfile"]


def make_lookup(jobs: Iterable[JobPosting], profiles: Iterable[MemberProfile]) -> dict:
    return {"jobs": {j.id: j for j in jobs}, "profiles": {p.id: p for p in profiles}}


def quality_filter(records: Sequence[ExampleRecord], lookup: dict) -> tuple[list[ExampleRecord], list[tuple[ExampleRecord, str]]]:
    """Automatic proxy for human review.

    Rejection reasons, checked in order: ``truncated`` (no ``<eos>``),
    ``hallucinated-skill`` (a line names a skill the job does not require),
    ``label-mismatch`` (record label differs from the oracle), ``malformed``
    (unparseable lines, missing requirements or a fit line disagreeing with
    the record label).
    """
    kept, rejected = [], []
    for rec in records:
        try:
            job = lookup["jobs"][rec.job_id]
            prof = lookup["profiles"][rec.profile_id]
        except (KeyError, IndexError):
            raise KeyError(f"record {rec.id!r} references an unknown job or profile") from None
        parsed = parse_explanation(rec.target)
        req_skills = {r.skill for r in job.requirements}
        oracle_fit, _ = oracle_assess(job, prof)
        if not parsed.complete:
            reason = "truncated"
        elif any(line.skill not in req_skills for line in parsed.lines):
            reason = "hallucinated-skill"
        elif rec.label != oracle_fit.label:
            reason = "label-mismatch"
        elif (
            parsed.malformed
            or parsed.label != rec.label
            or sorted(line.skill for line in parsed.lines) != sorted(req_skills)
        ):
            reason = "malformed"
        else:
            kept.append(rec)
            continue
        rejected.append((rec, reason))
    return kept, rejected


def stratified_sample(pool: Sequence[ExampleRecord], per_category: int, rng: np.random.Generator) -> list[ExampleRecord]:
    """Exactly ``per_category`` records of each label, shuffled."""
    if per_category < 0:
        raise ValueError("per_category must be nonnegative")
    picked: list[ExampleRecord] = []
    for label in FitLabel:
        members = sorted((r for r in pool if r.label == label), key=lambda r: r.id)
        if len(members) < per_category:
            raise ValueError(
                f"pool has {len(members)} {label.word} records, need {per_category}"
            )
        idx = rng.choice(len(members), size=per_category, replace=False) if per_category else []
        picked.extend(members[int(i)] for i in idx)
    perm = rng.permutation(len(picked)) if picked else []
    return [picked[int(i)] for i in perm]


@dataclass
class DomainConfig:
    catalog_size: int = len(SKILLS)
    req_range: tuple[int, int] = (2, 4)
    noise_range: tuple[int, int] = (6, 10)
    job_years_range: tuple[int, int] = (1, 8)
    skill_range: tuple[int, int] = (1, 5)
    profile_years_range: tuple[int, int] = (1, 12)
    focus_prob: float = 0.7
    compress_prompts: bool = True
    with_rating: bool = False


def gen_pairs(
    rng: np.random.Generator, n: int, cfg: DomainConfig = DomainConfig(), prefix: str = ""
) -> tuple[list[JobPosting], list[MemberProfile]]:
    """``n`` (job, recommended profile) pairs with fresh ids."""
    jobs, profiles = [], []
    for i in range(n):
        job = gen_job(rng, cfg.catalog_size, cfg.req_range, cfg.noise_range, cfg.job_years_range,
                      job_id=f"{prefix}j{i:05d}")
        prof = gen_profile(rng, cfg.catalog_size, cfg.skill_range, cfg.profile_years_range,
                           focus=job, focus_prob=cfg.focus_prob, profile_id=f"{prefix}p{i:05d}")
        jobs.append(job)
        profiles.append(prof)
    return jobs, profiles


def negative_pairs(
    rng: np.random.Generator, jobs: Sequence[JobPosting], profiles: Sequence[MemberProfile], count: int
) -> list[tuple[JobPosting, MemberProfile]]:
    """Extra Low examples from job/profile pairs with disjoint skills."""
    out = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > 100 * max(1, count):
            raise ValueError("could not find enough disjoint-skill pairs")
        j = jobs[int(rng.integers(len(jobs)))]
        p = profiles[int(rng.integers(len(profiles)))]
        if not {r.skill for r in j.requirements} & {s for s, _ in p.skills}:
            out.append((j, p))
    return out


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_records(path: str | Path, records: Iterable[ExampleRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")


def read_records(path: str | Path) -> list[ExampleRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ExampleRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def write_pool(path: str | Path, jobs: Iterable[JobPosting], profiles: Iterable[MemberProfile]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for j in jobs:
            fh.write(json.dumps({"job": j.to_json()}, separators=(",", ":")) + "\n")
        for p in profiles:
            fh.write(json.dumps({"profile": p.to_json()}, separators=(",", ":")) + "\n")


def read_pool(path: str | Path) -> dict:
    jobs, profiles = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if "job" in d:
                jobs.append(JobPosting.from_json(d["job"]))
            else:
                profiles.append(MemberProfile.from_json(d["profile"]))
    return make_lookup(jobs, profiles)


def write_pairs(path: str | Path, pairs: Iterable[tuple[JobPosting, MemberProfile]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for j, p in pairs:
            fh.write(json.dumps({"job": j.to_json(), "profile": p.to_json()}, separators=(",", ":")) + "\n")


def read_pairs(path: str | Path) -> list[tuple[JobPosting, MemberProfile]]:
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [(JobPosting.from_json(d["job"]), MemberProfile.from_json(d["profile"])) for d in rows]


def balanced_pairs(
    rng: np.random.Generator, per_category: int, cfg: DomainConfig = DomainConfig(), prefix: str = ""
) -> list[tuple[JobPosting, MemberProfile]]:
    """``per_category`` oracle-labelled pairs of each fit label, shuffled."""
    by: dict[FitLabel, list] = {label: [] for label in FitLabel}
    made = 0
    while any(len(v) < per_category for v in by.values()):
        if made > 50 * max(1, per_category) * 3:
            raise ValueError("generator settings cannot fill every fit category")
        jobs, profs = gen_pairs(rng, per_category, cfg, prefix=f"{prefix}{made // per_category if per_category else 0}-")
        made += per_category
        for j, p in zip(jobs, profs):
            label = oracle_assess(j, p)[0].label
            if len(by[label]) < per_category:
                by[label].append((j, p))
    out = [x for label in FitLabel for x in by[label]]
    return [out[int(i)] for i in rng.permutation(len(out))]
