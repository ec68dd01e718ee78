"""Experiment configuration: flat ``key = value`` files.

Keys use dots (``teacher.layers``); each maps to the dataclass field with
the dots replaced by underscores.  Blank lines and ``#`` comments are
ignored.  Unknown keys and malformed values are errors.

Key table (defaults in brackets):

================================  ==================================================
seed [0]                          master seed for data generation and training
out [runs/default]                artifact root
data.pool_size [3000]             base pool of (job, profile) pairs
data.seed_per_category [171]      stratified draw per label before truncation
data.seed_size [512]              records kept in the seed set
data.eval_size [128]              held-out explanation evaluation pairs
data.cls_per_category [1000]      balanced classifier training pairs per label
data.cls_eval_per_category [200]  balanced classifier held-out pairs per label
data.compress_prompts [true]      render explanation prompts from compressed jobs
data.with_rating [false]          append the oracle rating to explanation prompts
teacher.layers/dim/heads/mlp      teacher size [4, 64, 4, 256]
teacher.lr [0.002]                teacher learning rate
teacher.epochs [4]                teacher epochs
student.layers/dim/heads/mlp      final student size [1, 32, 4, 128]
mid.layers/dim/heads/mlp          intermediate student for two-stage paths [2, 48, 4, 192]
student.lr [0.008]                student learning rate
student.epochs [8]                student epochs
distill.divergence [TVD]          FKL | JS | TVD | SKL
distill.lambda_sft [0.1]          weight on the reference NLL
distill.lambda_kd [0.9]           weight on the divergence term
train.batch_size [16]
train.weight_decay [0.01]
train.grad_clip [1.0]             global gradient-norm clip (0 disables)
max_seq_len [128]                 language-model context
cls.layers/dim/heads/mlp          classifier trunk size [2, 32, 4, 128]
cls.max_seq_len [192]
cls.lr [0.001]
cls.epochs [4]
cls.batch_size [16]
cls.head_dim [64]
cls.structure [seqcls]            seqcls | twotower
cls.pooling [last]                last | mean
cls.interaction [concat]          concat | dot
cls.freeze_encoder [false]
cls.compress [mixed]              true | false | mixed job rendering for training
cls.labels [oracle]               oracle | teacher
cls.ablation_epochs [2]           epochs per configuration in the ablation grid
pipeline.compression [rule]       rule | model
pipeline.max_new [48]             decode budget for explanations
bench.counts [30,4,1]             classification, summarization, explanation requests
teacher_ckpt []                   override for the teacher checkpoint path
explainer_ckpt []                 override for the explainer checkpoint path
classifier_ckpt []                override for the classifier checkpoint path
================================  ==================================================
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .domain import VOCAB, DomainConfig
from .models import ModelConfig
from .objectives import DivergenceKind, LossWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data_pool_size: int = 3000
    data_seed_per_category: int = 171
    data_seed_size: int = 512
    data_eval_size: int = 128
    data_cls_per_category: int = 1000
    data_cls_eval_per_category: int = 200
    data_compress_prompts: bool = True
    data_with_rating: bool = False
    teacher_layers: int = 4
    teacher_dim: int = 64
    teacher_heads: int = 4
    teacher_mlp: int = 256
    teacher_lr: float = 2e-3
    teacher_epochs: int = 4
    student_layers: int = 1
    student_dim: int = 32
    student_heads: int = 4
    student_mlp: int = 128
    mid_layers: int = 2
    mid_dim: int = 48
    mid_heads: int = 4
    mid_mlp: int = 192
    student_lr: float = 8e-3
    student_epochs: int = 8
    distill_divergence: str = "TVD"
    distill_lambda_sft: float = 0.1
    distill_lambda_kd: float = 0.9
    train_batch_size: int = 16
    train_weight_decay: float = 0.01
    train_grad_clip: float = 1.0
    max_seq_len: int = 128
    cls_layers: int = 2
    cls_dim: int = 32
    cls_heads: int = 4
    cls_mlp: int = 128
    cls_max_seq_len: int = 192
    cls_lr: float = 1e-3
    cls_epochs: int = 4
    cls_batch_size: int = 16
    cls_head_dim: int = 64
    cls_structure: str = "seqcls"
    cls_pooling: str = "last"
    cls_interaction: str = "concat"
    cls_freeze_encoder: bool = False
    cls_compress: str = "mixed"
    cls_labels: str = "oracle"
    cls_ablation_epochs: int = 2
    pipeline_compression: str = "rule"
    pipeline_max_new: int = 48
    bench_counts: tuple[int, int, int] = (30, 4, 1)
    teacher_ckpt: str = ""
    explainer_ckpt: str = ""
    classifier_ckpt: str = ""

    def __post_init__(self):
        DivergenceKind.parse(self.distill_divergence)
        LossWeights(self.distill_lambda_sft, self.distill_lambda_kd)
        choices = {
            "cls_structure": ("seqcls", "twotower"),
            "cls_pooling": ("last", "mean"),
            "cls_interaction": ("concat", "dot"),
            "cls_compress": ("true", "false", "mixed"),
            "cls_labels": ("oracle", "teacher"),
            "pipeline_compression": ("rule", "model"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{_key(name)} must be one of {', '.join(allowed)}, got {getattr(self, name)!r}")
        if self.data_seed_size > 3 * self.data_seed_per_category:
            raise ConfigError("data.seed_size exceeds 3 * data.seed_per_category")

    # derived objects -------------------------------------------------------

    def model(self, prefix: str) -> ModelConfig:
        seq = self.cls_max_seq_len if prefix == "cls" else self.max_seq_len
        return ModelConfig(
            vocab_size=len(VOCAB),
            max_seq_len=seq,
            num_layers=getattr(self, f"{prefix}_layers"),
            model_dim=getattr(self, f"{prefix}_dim"),
            num_heads=getattr(self, f"{prefix}_heads"),
            mlp_dim=getattr(self, f"{prefix}_mlp"),
            seed=self.seed,
        )

    def domain(self) -> DomainConfig:
        return DomainConfig(compress_prompts=self.data_compress_prompts, with_rating=self.data_with_rating)

    def weights(self) -> LossWeights:
        return LossWeights(self.distill_lambda_sft, self.distill_lambda_kd)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(dataclasses.asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _key(field_name: str) -> str:
    for section in ("data", "teacher", "student", "mid", "distill", "train", "cls", "pipeline", "bench"):
        if field_name.startswith(section + "_"):
            return section + "." + field_name[len(section) + 1 :]
    return field_name


_FIELDS = {_key(f.name): f for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ.startswith("tuple"):
            vals = tuple(int(x) for x in raw.split(","))
            if len(vals) != 3:
                raise ValueError(raw)
            return vals
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ})") from None


def parse_config(text: str, source: str = "<string>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = _convert(key, raw, _FIELDS[key].type)
    return values


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Defaults, then the file (if any), then keyword overrides (field names)."""
    kwargs = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        kwargs = {_FIELDS[k].name: v for k, v in parse_config(p.read_text(encoding="utf-8"), str(p)).items()}
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
