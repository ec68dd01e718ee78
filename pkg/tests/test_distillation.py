import logging
from dataclasses import replace

import numpy as np
import pytest

from fitdistill.checkpoint import (
    Checkpoint,
    CheckpointError,
    from_bytes,
    load_checkpoint,
    params_digest,
    save_checkpoint,
    to_bytes,
)
from fitdistill.distillation import (
    AdamW,
    DistillPath,
    PairExample,
    Stage,
    TrainConfig,
    distill_classifier,
    distill_explanation,
    encode_record,
    evaluate_losses,
    generate_labels,
    make_batch,
    pair_examples,
    run_path,
    train_sft,
)
from fitdistill.domain import SKILLS, VOCAB, balanced_pairs, gen_pairs, make_record
from fitdistill.evaluation import eval_explanations
from fitdistill.models import ModelConfig, init_model
from fitdistill.objectives import DivergenceKind, LossWeights

TINY = ModelConfig(vocab_size=len(VOCAB), max_seq_len=128, num_layers=1, model_dim=16, num_heads=2, mlp_dim=32)
TINY2 = replace(TINY, num_layers=2, seed=1)


def records(n, seed=0):
    jobs, profs = gen_pairs(np.random.default_rng(seed), n)
    return [make_record(j, p) for j, p in zip(jobs, profs)]


def same_params(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def data():
    return records(24)


@pytest.fixture(scope="module")
def teacher(data):
    ckpt, _ = train_sft(TINY2, data, TrainConfig(lr=5e-3, epochs=2, batch_size=8))
    return ckpt


def test_make_batch_masks_target_positions():
    rec = records(1)[0]
    enc = encode_record(rec, 128)
    inputs, targets, mask = make_batch([enc])
    assert inputs.shape == targets.shape == (1, len(enc.ids) - 1)
    assert mask.sum() == len(rec.target)
    assert VOCAB.decode(targets[0][mask[0]]) == rec.target


def test_adamw_decays_matrices_only():
    params = {"w": np.ones((2, 2)), "b": np.ones(2)}
    opt = AdamW(params, lr=0.1, weight_decay=0.5)
    opt.step(params, {"w": np.zeros((2, 2)), "b": np.zeros(2)})
    assert np.allclose(params["w"], 1 - 0.1 * 0.5) and np.array_equal(params["b"], np.ones(2))


def test_zero_learning_rate_leaves_parameters(data):
    ckpt, _ = train_sft(TINY, data[:8], TrainConfig(lr=0.0, epochs=1, batch_size=4))
    assert same_params(ckpt.params, init_model(TINY).params)


def test_training_is_deterministic(data):
    cfg = TrainConfig(lr=3e-3, epochs=1, batch_size=8)
    a, ra = train_sft(TINY, data, cfg)
    b, rb = train_sft(TINY, data, cfg)
    assert same_params(a.params, b.params) and ra == rb
    assert to_bytes(a) == to_bytes(b)


def test_single_record_memorisation():
    rec = records(1, seed=3)[0]
    ckpt, _ = train_sft(TINY, [rec] * 200, TrainConfig(lr=1e-2, epochs=1, batch_size=1))
    final, _ = evaluate_losses(ckpt.model(), [rec])
    assert final.sft < 0.05


def test_nan_loss_aborts_naming_batch(data):
    bad = init_model(TINY)
    bad.params["out.b"][:] = np.nan
    with pytest.raises(FloatingPointError, match="batch 0"):
        train_sft(TINY, data[:4], TrainConfig(epochs=1), init=bad)


@pytest.mark.parametrize("kind", list(DivergenceKind))
def test_teacher_clone_has_zero_kd(teacher, data, kind):
    clone = teacher.model().copy()
    corpus, per = evaluate_losses(clone, data, teacher.model(), LossWeights(0.0, 1.0), kind)
    assert corpus.kd < 1e-10 and all(r.kd < 1e-10 for r in per)


def test_distillation_keeps_teacher_frozen(teacher, data):
    before = params_digest(teacher.params)
    ckpt, reports = distill_explanation(teacher, TINY, data, TrainConfig(lr=5e-3, epochs=1, batch_size=8))
    assert params_digest(teacher.params) == before
    assert ckpt.provenance["teacher_digest"] == before
    assert len(reports) == 1 and reports[0].kd > 0


def test_vocabulary_mismatch_rejected(teacher, data):
    with pytest.raises(ValueError, match="vocabulary"):
        distill_explanation(teacher, replace(TINY, vocab_size=200), data, TrainConfig(epochs=1))


def test_zero_kd_weight_matches_sft(teacher, data):
    cfg = TrainConfig(lr=4e-3, epochs=2, batch_size=8, weights=LossWeights(1.0, 0.0))
    sft, rs = train_sft(TINY, data, cfg)
    dist, rd = distill_explanation(teacher, TINY, data, cfg)
    assert same_params(sft.params, dist.params)
    assert [r.sft for r in rs] == [r.sft for r in rd]


def test_corpus_loss_is_mean_of_examples(teacher, data):
    student = init_model(TINY)
    for kind in DivergenceKind:
        corpus, per = evaluate_losses(student, data, teacher.model(), LossWeights(0.3, 0.7), kind)
        assert abs(corpus.combined - np.mean([r.combined for r in per])) < 1e-10
        assert abs(corpus.combined - (0.3 * corpus.sft + 0.7 * corpus.kd)) < 1e-10


def test_generate_labels_empty_and_deterministic(teacher):
    assert generate_labels(teacher, []) == []
    pairs = balanced_pairs(np.random.default_rng(0), 2)
    a = generate_labels(teacher, pairs, max_new=12)
    b = generate_labels(teacher, pairs, max_new=12)
    assert [(r.id, r.target, r.rejected) for r in a] == [(r.id, r.target, r.rejected) for r in b]
    assert len(a) == len(pairs)
    assert all(r.rejected in ("truncated", "unparseable") for r in a)  # 12 tokens cannot hold an explanation
    with pytest.raises(ValueError):
        generate_labels(teacher, pairs, mode="poetry")


# --- classifiers -----------------------------------------------------------


def separable(n, seed):
    # the label is fixed by which third of the skill catalog the single job token comes from
    r = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = int(r.integers(15))
        out.append(PairExample([SKILLS[s]], [SKILLS[int(r.integers(16))]], s // 5))
    return out


CLS = ModelConfig(vocab_size=len(VOCAB), max_seq_len=32, num_layers=1, model_dim=16, num_heads=2, mlp_dim=32)


def test_separable_toy_is_learned():
    ckpt, hist = distill_classifier(CLS, separable(300, 0), TrainConfig(lr=3e-3, epochs=8, batch_size=16),
                                    heldout=separable(200, 1))
    assert hist[-1].accuracy >= 0.99


def test_zero_epochs_returns_initial_classifier():
    ckpt, hist = distill_classifier(CLS, separable(30, 0), TrainConfig(epochs=0), heldout=separable(30, 1))
    assert len(hist) == 1 and hist[0].epoch == 0
    probs = ckpt.classifier_model()
    assert np.all(probs.params["head.w2"] == 0)


def test_single_class_warns(caplog):
    data = [PairExample(["python"], ["java"], 1)] * 8
    with caplog.at_level(logging.WARNING):
        distill_classifier(CLS, data, TrainConfig(epochs=1))
    assert "single class" in caplog.text


@pytest.mark.parametrize("structure,pooling,interaction",
                         [("seqcls", "last", "concat"), ("seqcls", "mean", "concat"),
                          ("twotower", "mean", "concat"), ("twotower", "mean", "dot")])
def test_every_combination_trains(structure, pooling, interaction):
    pairs = balanced_pairs(np.random.default_rng(0), 6)
    ex = pair_examples(pairs, compress=True)
    cfg = replace(CLS, max_seq_len=64)
    ckpt, hist = distill_classifier(cfg, ex, TrainConfig(epochs=1), structure, pooling, interaction, heldout=ex)
    assert 0 <= hist[-1].accuracy <= 1
    clf = ckpt.classifier_model()
    assert (clf.structure, clf.pooling, clf.interaction) == (structure, pooling, interaction)


def test_pair_examples_modes():
    pairs = balanced_pairs(np.random.default_rng(0), 4)
    full = pair_examples(pairs, compress=False)
    short = pair_examples(pairs, compress=True)
    assert [e.label for e in full] == [e.label for e in short]
    assert all(len(s.job) < len(f.job) for s, f in zip(short, full))
    mixed = pair_examples(pairs, compress="mixed", rng=np.random.default_rng(0))
    assert {len(m.job) for m in mixed} <= {len(e.job) for e in full + short}


# --- paths -----------------------------------------------------------------


def test_single_stage_sft_path_equals_train_sft(data):
    cfg = TrainConfig(lr=3e-3, epochs=1, batch_size=8)
    path = DistillPath("solo", (Stage(TINY, cfg, teacher="fresh-sft"),))
    prompts = [r.prompt for r in data[:3]]
    refs = [r.target for r in data[:3]]
    res = run_path(path, None, data, prompts, refs, max_new=8)
    direct, _ = train_sft(TINY, data, cfg)
    assert res.error is None and len(res.checkpoints) == 1
    assert same_params(res.checkpoints[0].params, direct.params)


def test_two_stage_path_rows_match_evaluation(teacher, data):
    cfg = TrainConfig(lr=3e-3, epochs=1, batch_size=8)
    path = DistillPath("two", (Stage(replace(TINY, model_dim=24, num_heads=2, mlp_dim=48), cfg), Stage(TINY, cfg)))
    prompts = [r.prompt for r in data[:4]]
    refs = [r.target for r in data[:4]]
    res = run_path(path, teacher, data, prompts, refs, max_new=10)
    assert res.error is None and len(res.checkpoints) == 3 and len(res.rows) == 2
    for row, ck in zip(res.rows, res.checkpoints[1:]):
        again = eval_explanations(ck.model(), prompts, refs, 10).summary()
        for key in ("rouge1", "rouge2", "rougeL", "nll"):
            assert abs(row[key] - again[key]) <= 1e-12


def test_failing_stage_keeps_partial_results(teacher, data):
    cfg = TrainConfig(lr=3e-3, epochs=1, batch_size=8)
    bad = replace(TINY, vocab_size=len(VOCAB) + 1)
    path = DistillPath("broken", (Stage(TINY, cfg), Stage(bad, cfg)))
    res = run_path(path, teacher, data, [data[0].prompt], [data[0].target], max_new=4)
    assert res.error and "stage 1" in res.error
    assert len(res.checkpoints) == 2 and len(res.rows) == 1


def test_path_validation():
    with pytest.raises(ValueError):
        DistillPath("empty", ())
    with pytest.raises(ValueError):
        DistillPath("x", (Stage(TINY, TrainConfig()), Stage(TINY, TrainConfig(), teacher="fresh-sft")))


# --- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, teacher):
    loc = save_checkpoint(teacher, tmp_path / "t.ckpt")
    back = load_checkpoint(loc)
    assert same_params(back.params, teacher.params)
    assert back.config == teacher.config and back.provenance == teacher.provenance
    assert to_bytes(back) == to_bytes(teacher)


def test_corrupted_checkpoint_fails_digest(teacher):
    blob = bytearray(to_bytes(teacher))
    blob[-3] ^= 0x40
    with pytest.raises(CheckpointError, match="digest"):
        from_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        from_bytes(bytes(blob[: len(blob) // 2]))


def test_checkpoint_versions(teacher, caplog):
    with caplog.at_level(logging.WARNING):
        back = from_bytes(to_bytes(teacher, version=(1, 5)))
    assert "newer" in caplog.text and same_params(back.params, teacher.params)
    with pytest.raises(CheckpointError):
        from_bytes(to_bytes(teacher, version=(2, 0)))


def test_classifier_checkpoint_round_trip(tmp_path):
    ckpt, _ = distill_classifier(CLS, separable(20, 0), TrainConfig(epochs=1))
    back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "c.ckpt"))
    a, b = ckpt.classifier_model(), back.classifier_model()
    assert same_params(a.params, b.params) and (a.structure, a.pooling) == (b.structure, b.pooling)
    assert isinstance(back, Checkpoint)
