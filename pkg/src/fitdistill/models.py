"""Tiny decoder-only language models and encoder classifiers built on them.

Architecture: learned token and absolute position embeddings, ``num_layers``
pre-LayerNorm blocks (causal multi-head attention, GELU MLP), a final
LayerNorm and an untied output projection.  Token 0 is padding and is masked
out as an attention key.

Parameter count for vocab ``V``, context ``S``, width ``d``, MLP width
``m`` and ``L`` layers::

    V*d + S*d + L*(4*d*d + 2*d*m + 9*d + m) + 2*d + d*V + V

(per layer: two LayerNorms 4d, fused qkv d*3d + 3d, output d*d + d,
MLP d*m + m + m*d + d).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .domain import BOS, EOS, PAD, SEP
from .numerics import Tape, Tensor, Var


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 127
    max_seq_len: int = 128
    num_layers: int = 2
    model_dim: int = 32
    num_heads: int = 4
    mlp_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "max_seq_len", "num_layers", "model_dim", "num_heads", "mlp_dim"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise ValueError(
                f"ModelConfig.model_dim ({self.model_dim}) must be a multiple of num_heads ({self.num_heads})"
            )
        if self.max_seq_len < 2:
            raise ValueError("ModelConfig.max_seq_len must be at least 2")

    @property
    def label(self) -> str:
        return f"L{self.num_layers}d{self.model_dim}"


def param_count(cfg: ModelConfig) -> int:
    V, S, d, m, L = cfg.vocab_size, cfg.max_seq_len, cfg.model_dim, cfg.mlp_dim, cfg.num_layers
    return V * d + S * d + L * (4 * d * d + 2 * d * m + 9 * d + m) + 2 * d + d * V + V


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.model_dim, cfg.mlp_dim
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq_len, d)}
    for i in range(cfg.num_layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wqkv": (d, 3 * d), p + "attn.bqkv": (3 * d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, m), p + "mlp.b1": (m,),
            p + "mlp.w2": (m, d), p + "mlp.b2": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "out.w": (d, cfg.vocab_size), "out.b": (cfg.vocab_size,)})
    return shapes


def _init_params(shapes: dict[str, tuple[int, ...]], rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, std, size=shape)
    return params


@dataclass
class LanguageModel:
    config: ModelConfig
    params: dict[str, Tensor]
    role: str = "student"

    def copy(self, role: str | None = None) -> "LanguageModel":
        return LanguageModel(self.config, {k: v.copy() for k, v in self.params.items()}, role or self.role)


def init_model(config: ModelConfig, role: str = "student") -> LanguageModel:
    rng = np.random.default_rng(config.seed)
    return LanguageModel(config, _init_params(param_shapes(config), rng), role)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def pad_batch(seqs: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ValueError(f"expected a nonempty (batch, length) token array, got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range for vocab_size {cfg.vocab_size}")


def bind(tape: Tape, params: dict[str, Tensor], trainable: bool = True, prefix: str = "") -> dict[str, Var]:
    return {k: tape.leaf(v, requires_grad=trainable) for k, v in params.items() if k.startswith(prefix)}


def trunk_forward(tape: Tape, p: dict[str, Var], cfg: ModelConfig, tokens: np.ndarray, prefix: str = "") -> Var:
    """Hidden states after the final LayerNorm, shape (B, T, d)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(cfg, tokens)
    B, T = tokens.shape
    d, H = cfg.model_dim, cfg.num_heads
    dh = d // H
    x = nx.embedding(p[prefix + "tok_emb"], tokens) + nx.take(p[prefix + "pos_emb"], (slice(0, T),))
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    keypad = tokens == PAD
    blocked = causal[None, None, :, :] | keypad[:, None, None, :]
    # a query that can see no key (only possible for pad rows) attends to itself
    blocked &= ~np.all(blocked, axis=-1, keepdims=True) | ~np.eye(T, dtype=bool)[None, None]
    mask = tape.const(np.where(blocked, nx.NEG_INF, 0.0))
    scale = tape.const(np.array(1.0 / np.sqrt(dh)))
    for i in range(cfg.num_layers):
        q_ = f"{prefix}h{i}."
        h = nx.layer_norm(x, p[q_ + "ln1.g"], p[q_ + "ln1.b"])
        qkv = h @ p[q_ + "attn.wqkv"] + p[q_ + "attn.bqkv"]
        qkv = nx.transpose(nx.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
        q = nx.take(qkv, (0,))
        k = nx.take(qkv, (1,))
        v = nx.take(qkv, (2,))
        att = nx.softmax((q @ nx.transpose(k, (0, 1, 3, 2))) * scale + mask)
        y = nx.reshape(nx.transpose(att @ v, (0, 2, 1, 3)), (B, T, d))
        x = x + (y @ p[q_ + "attn.wo"] + p[q_ + "attn.bo"])
        h = nx.layer_norm(x, p[q_ + "ln2.g"], p[q_ + "ln2.b"])
        x = x + (nx.gelu(h @ p[q_ + "mlp.w1"] + p[q_ + "mlp.b1"]) @ p[q_ + "mlp.w2"] + p[q_ + "mlp.b2"])
    return nx.layer_norm(x, p[prefix + "lnf.g"], p[prefix + "lnf.b"])


def lm_logits(tape: Tape, p: dict[str, Var], cfg: ModelConfig, tokens: np.ndarray) -> Var:
    h = trunk_forward(tape, p, cfg, tokens)
    return h @ p["out.w"] + p["out.b"]


def lm_forward(model: LanguageModel, tokens: Sequence[int]) -> Tensor:
    """Next-token logits for every position of one sequence, shape (T, V)."""
    tape = Tape()
    toks = np.asarray(tokens, dtype=np.int64)[None, :]
    return lm_logits(tape, bind(tape, model.params, False), model.config, toks).value[0]


def lm_forward_batch(model: LanguageModel, tokens: np.ndarray) -> Tensor:
    tape = Tape()
    return lm_logits(tape, bind(tape, model.params, False), model.config, tokens).value


def _last_logits(model: LanguageModel, seqs: list[list[int]]) -> Tensor:
    tape = Tape()
    p = bind(tape, model.params, False)
    tokens = pad_batch(seqs)
    h = trunk_forward(tape, p, model.config, tokens).value
    last = h[np.arange(len(seqs)), [len(s) - 1 for s in seqs]]
    return last @ model.params["out.w"] + model.params["out.b"]


def greedy_decode_batch(
    model: LanguageModel, prompts: Sequence[Sequence[int]], max_new: int, eos: int = EOS, batch_size: int = 64
) -> list[list[int]]:
    """Temperature-0 decoding; ties go to the lowest token id.

    Returns prompt + generated tokens.  Generation stops at ``eos``, after
    ``max_new`` tokens, or at the context limit.
    """
    if max_new < 0:
        raise ValueError("max_new must be nonnegative")
    S = model.config.max_seq_len
    for pr in prompts:
        if len(pr) < 1:
            raise ValueError("empty prompt")
        if max_new > 0 and len(pr) >= S:
            raise ValueError(f"prompt of length {len(pr)} leaves no room to generate (max_seq_len {S})")
    outs = [list(pr) for pr in prompts]
    for start in range(0, len(outs), batch_size):
        chunk = list(range(start, min(start + batch_size, len(outs))))
        live = list(chunk)
        for _ in range(max_new):
            live = [i for i in live if len(outs[i]) < S]
            if not live:
                break
            logits = _last_logits(model, [outs[i] for i in live])
            nxt = np.argmax(logits, axis=-1)
            still = []
            for i, t in zip(live, nxt):
                outs[i].append(int(t))
                if int(t) != eos:
                    still.append(i)
            live = still
    return outs


def lm_greedy_decode(model: LanguageModel, prompt: Sequence[int], max_new: int, eos: int = EOS) -> list[int]:
    return greedy_decode_batch(model, [prompt], max_new, eos)[0]


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------

STRUCTURES = ("seqcls", "twotower")
POOLINGS = ("last", "mean")
INTERACTIONS = ("concat", "dot")
NUM_CLASSES = 3


@dataclass
class EncoderClassifier:
    """Encoder trunk(s) plus MLP head producing a Low/Medium/High distribution.

    ``seqcls`` keeps one trunk under ``enc.``; ``twotower`` keeps ``job.``
    and ``profile.`` trunks.  The head lives under ``head.``.
    """

    config: ModelConfig
    params: dict[str, Tensor]
    structure: str = "seqcls"
    pooling: str = "last"
    interaction: str = "concat"
    head_dim: int = 64
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.interaction not in INTERACTIONS:
            raise ValueError(f"unknown interaction {self.interaction!r}")

    @property
    def towers(self) -> tuple[str, ...]:
        return ("enc.",) if self.structure == "seqcls" else ("job.", "profile.")

    @property
    def head_in(self) -> int:
        d = self.config.model_dim
        return 2 * d if self.structure == "twotower" and self.interaction == "concat" else d

    def copy(self) -> "EncoderClassifier":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


def _trunk_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v for k, v in param_shapes(cfg).items() if not k.startswith("out.")}


def init_classifier(
    config: ModelConfig,
    structure: str = "seqcls",
    pooling: str = "last",
    interaction: str = "concat",
    head_dim: int = 64,
    freeze_encoder: bool = False,
    trunk: dict[str, Tensor] | None = None,
) -> EncoderClassifier:
    """Fresh classifier; ``trunk`` optionally seeds every tower from LM parameters."""
    clf = EncoderClassifier(config, {}, structure, pooling, interaction, head_dim, freeze_encoder)
    rng = np.random.default_rng(config.seed)
    for tower in clf.towers:
        base = _init_params(_trunk_shapes(config), rng)
        if trunk is not None:
            base = {k: np.array(trunk[k], dtype=np.float64) for k in base}
        clf.params.update({tower + k: v for k, v in base.items()})
    clf.params["head.w1"] = rng.normal(0.0, 0.02, size=(clf.head_in, head_dim))
    clf.params["head.b1"] = np.zeros(head_dim)
    clf.params["head.w2"] = np.zeros((head_dim, NUM_CLASSES))
    clf.params["head.b2"] = np.zeros(NUM_CLASSES)
    return clf


def pool_weights(tokens: np.ndarray, pooling: str) -> np.ndarray:
    """(B, T, 1) weights over positions: one-hot last non-pad, or uniform over non-pads."""
    live = tokens != PAD
    counts = live.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("cannot pool an empty sequence")
    if pooling == "mean":
        w = live / counts[:, None]
    else:
        w = np.zeros(tokens.shape)
        last = tokens.shape[1] - 1 - np.argmax(live[:, ::-1], axis=1)
        w[np.arange(len(tokens)), last] = 1.0
    return w[:, :, None]


def pooled(tape: Tape, p: dict[str, Var], clf: EncoderClassifier, tokens: np.ndarray, tower: str) -> Var:
    h = trunk_forward(tape, p, clf.config, tokens, prefix=tower)
    return nx.vsum(h * tape.const(pool_weights(np.asarray(tokens), clf.pooling)), axis=1)


def head_logits(p: dict[str, Var], h: Var) -> Var:
    return nx.gelu(h @ p["head.w1"] + p["head.b1"]) @ p["head.w2"] + p["head.b2"]


def bind_classifier(tape: Tape, clf: EncoderClassifier, train: bool = False) -> dict[str, Var]:
    out = {}
    for k, v in clf.params.items():
        trainable = train and (k.startswith("head.") or not clf.freeze_encoder)
        out[k] = tape.leaf(v, requires_grad=trainable)
    return out


def classifier_logits(tape: Tape, p: dict[str, Var], clf: EncoderClassifier, batch: dict) -> Var:
    """Head logits for a batch.

    ``batch`` holds ``pair`` (B, T) for seqcls, or ``job`` and ``profile``
    token arrays for twotower.
    """
    if clf.structure == "seqcls":
        h = pooled(tape, p, clf, batch["pair"], "enc.")
    else:
        hj = pooled(tape, p, clf, batch["job"], "job.")
        hp = pooled(tape, p, clf, batch["profile"], "profile.")
        h = nx.concat([hj, hp], axis=-1) if clf.interaction == "concat" else hj * hp
    return head_logits(p, h)


def encode_pooled(clf: EncoderClassifier, tokens: Sequence[int], tower: str | None = None) -> Tensor:
    """Pooled embedding ``h`` (length model_dim) of one token sequence."""
    if len(tokens) == 0:
        raise ValueError("cannot encode an empty sequence")
    tape = Tape()
    p = bind_classifier(tape, clf)
    return pooled(tape, p, clf, np.asarray(tokens, dtype=np.int64)[None, :], tower or clf.towers[0]).value[0]


def classify(clf: EncoderClassifier, h: Sequence[float]) -> Tensor:
    """Softmax of the MLP head over Low/Medium/High."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (clf.head_in,):
        raise ValueError(f"embedding has shape {h.shape}, head expects ({clf.head_in},)")
    tape = Tape()
    p = bind_classifier(tape, clf)
    return nx.softmax(head_logits(p, tape.const(h[None, :]))).value[0]


def two_tower_score(
    clf: EncoderClassifier, job_tokens: Sequence[int], profile_tokens: Sequence[int], interaction: str | None = None
) -> Tensor:
    if clf.structure != "twotower":
        raise ValueError("two_tower_score needs a twotower classifier")
    hj = encode_pooled(clf, job_tokens, "job.")
    hp = encode_pooled(clf, profile_tokens, "profile.")
    if hj.shape != hp.shape:
        raise ValueError(f"tower dims differ: {hj.shape} vs {hp.shape}")
    inter = interaction or clf.interaction
    return classify(clf, np.concatenate([hj, hp]) if inter == "concat" else hj * hp)


def classifier_inputs(clf_structure: str, job_ids: Sequence[int], profile_ids: Sequence[int]) -> dict:
    """Token layouts: seqcls ``<bos> profile <sep> job <sep>``; towers ``<bos> x <sep>``.

    The profile comes first so that, under causal attention, every job
    requirement can look back at the matching profile entry.
    """
    if clf_structure == "seqcls":
        return {"pair": [BOS, *profile_ids, SEP, *job_ids, SEP]}
    return {"job": [BOS, *job_ids, SEP], "profile": [BOS, *profile_ids, SEP]}


def predict_proba(clf: EncoderClassifier, examples: Sequence[dict], batch_size: int = 128) -> Tensor:
    """Class distributions for examples laid out by :func:`classifier_inputs`."""
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = {k: pad_batch([e[k] for e in chunk]) for k in chunk[0]}
        tape = Tape()
        p = bind_classifier(tape, clf)
        out.append(nx.softmax_np(classifier_logits(tape, p, clf, batch).value))
    return np.concatenate(out) if out else np.zeros((0, NUM_CLASSES))
