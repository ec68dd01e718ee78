import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.distance import jensenshannon
from scipy.stats import entropy

from fitdistill import numerics as nx
from fitdistill.numerics import ShapeError, Tape, finite_difference_check
from fitdistill.objectives import (
    DivergenceKind,
    LossReport,
    LossWeights,
    class_nll,
    classification_loss,
    divergence,
    explanation_loss,
    kd_loss,
    kd_term,
    sft_loss,
    sft_nll,
)

KINDS = list(DivergenceKind)


def _dist(rng, n, sharp=1.0):
    return nx.softmax_np(rng.normal(scale=sharp, size=n))


# --- values ----------------------------------------------------------------

def test_sft_perfect_prediction():
    targets = np.array([1, 0, 3])
    logits = np.full((3, 4), -50.0)
    logits[np.arange(3), targets] = 50.0
    assert sft_loss(logits, targets, np.ones(3, bool)) <= 1e-6


def test_sft_uniform_is_log_vocab():
    assert sft_loss(np.zeros((5, 7)), np.arange(5), np.ones(5, bool)) == pytest.approx(math.log(7), abs=1e-12)


def test_sft_two_position_mean():
    # position 0: p(target)=1/2; position 1: p(target)=1/4
    logits = np.log(np.array([[0.5, 0.5, 1e-300, 1e-300], [0.25, 0.25, 0.25, 0.25]]) + 0.0)
    value = sft_loss(logits, np.array([0, 2]), np.array([True, True]))
    assert value == pytest.approx(1.5 * math.log(2), abs=1e-9)
    assert value == pytest.approx(1.039721, abs=1e-6)


def test_sft_mask_and_errors():
    logits = np.zeros((3, 4))
    logits[2, 1] = 100
    assert sft_loss(logits, np.array([0, 0, 1]), np.array([False, False, True])) < 1e-12
    with pytest.raises(ValueError):
        sft_loss(logits, np.array([0, 0, 1]), np.zeros(3, bool))
    with pytest.raises(ShapeError):
        sft_loss(logits, np.array([0, 0]), np.ones(2, bool))


@pytest.mark.parametrize("kind", KINDS)
def test_divergence_of_identical_is_zero(kind, rng):
    p = _dist(rng, 9)
    assert divergence(kind, p, p) < 1e-10


def test_divergence_closed_forms():
    assert divergence("TVD", [1, 0], [0, 1]) == pytest.approx(1.0)
    assert divergence("JS", [1, 0], [0, 1]) == pytest.approx(math.log(2), abs=1e-12)
    assert divergence("JS", [1, 0], [0, 1]) == pytest.approx(0.693147, abs=1e-6)
    fkl = 0.9 * math.log(1.5) + 0.1 * math.log(0.25)
    assert divergence("FKL", [0.9, 0.1], [0.6, 0.4]) == pytest.approx(fkl, abs=1e-14)
    assert divergence("FKL", [0.9, 0.1], [0.6, 0.4]) == pytest.approx(0.226289, abs=1e-6)


def test_divergence_input_errors():
    with pytest.raises(ValueError):
        divergence("FKL", [0.5, 0.5], [1.0])
    with pytest.raises(ValueError):
        divergence("FKL", [1.2, -0.2], [0.5, 0.5])
    with pytest.raises(ValueError):
        divergence("FKL", [0.5, 0.5 + 1e-6], [0.5, 0.5])
    with pytest.raises(ValueError):
        DivergenceKind.parse("RKL")
    assert DivergenceKind.parse("js") is DivergenceKind.JS


def test_divergences_agree_with_scipy(rng):
    for _ in range(200):
        n = int(rng.integers(2, 65))
        p, q = _dist(rng, n, 2.0), _dist(rng, n, 2.0)
        assert divergence("FKL", p, q) == pytest.approx(entropy(p, q), abs=1e-12)
        assert divergence("SKL", p, q) == pytest.approx(entropy(p, q) + entropy(q, p), abs=1e-12)
        assert divergence("JS", p, q) == pytest.approx(jensenshannon(p, q) ** 2, abs=1e-12)
        assert divergence("TVD", p, q) == pytest.approx(0.5 * np.abs(p - q).sum(), abs=1e-14)


def test_fkl_is_asymmetric_somewhere(rng):
    gaps = [abs(divergence("FKL", p, q) - divergence("FKL", q, p))
            for p, q in ((_dist(rng, 5, 3), _dist(rng, 5, 3)) for _ in range(50))]
    assert max(gaps) > 1e-3


probs = st.integers(2, 16).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(0, 1), min_size=n, max_size=n).filter(lambda v: sum(v) > 1e-3),
        st.lists(st.floats(0, 1), min_size=n, max_size=n).filter(lambda v: sum(v) > 1e-3),
    )
)


def _norm(v):
    a = np.array(v, dtype=float)
    return a / a.sum()


@given(probs)
def test_divergence_properties(pair):
    p, q = _norm(pair[0]), _norm(pair[1])
    vals = {k: divergence(k, p, q) for k in KINDS}
    assert all(v >= 0 for v in vals.values())
    assert vals[DivergenceKind.JS] <= math.log(2) + 1e-12
    assert vals[DivergenceKind.TVD] <= 1 + 1e-12
    for k in ("JS", "TVD", "SKL"):
        assert abs(divergence(k, q, p) - vals[DivergenceKind(k)]) <= 1e-12 * max(1.0, vals[DivergenceKind(k)])
    skl = divergence("FKL", p, q) + divergence("FKL", q, p)
    assert abs(vals[DivergenceKind.SKL] - skl) <= 1e-12 * max(1.0, skl)


# --- kd ---------------------------------------------------------------------

@pytest.mark.parametrize("kind", KINDS)
def test_kd_zero_for_identical_logits(kind, rng):
    z = rng.normal(size=(6, 11))
    assert kd_loss(kind, z, z, np.ones(6, bool)) < 1e-10


def test_kd_single_position_matches_divergence():
    teacher = np.zeros((1, 2))
    student = np.array([[math.log(3), 0.0]])
    value = kd_loss("FKL", teacher, student, np.ones(1, bool))
    assert value == pytest.approx(divergence("FKL", [0.5, 0.5], [0.75, 0.25]), abs=1e-15)


def test_kd_shape_mismatch():
    with pytest.raises(ShapeError):
        kd_loss("JS", np.zeros((2, 3)), np.zeros((2, 4)), np.ones(2, bool))


def test_kd_teacher_gets_no_gradient(rng):
    t = Tape()
    s = t.leaf(rng.normal(size=(3, 5)))
    loss = kd_term("FKL", rng.normal(size=(3, 5)), s, np.ones(3, bool))
    g = t.backward(loss)
    assert set(g) == {s.id, loss.id}


def _tie_free(rng, n):
    while True:
        tz, sz = rng.normal(size=n), rng.normal(size=n)
        if np.min(np.abs(nx.softmax_np(tz) - nx.softmax_np(sz))) > 1e-3:
            return tz, sz


@pytest.mark.parametrize("kind", KINDS)
def test_kd_gradient_fd(kind):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        T, V = 3, 6
        pairs = [_tie_free(rng, V) for _ in range(T)]
        teacher = np.stack([p[0] for p in pairs])
        student = np.stack([p[1] for p in pairs])
        mask = np.array([True, seed % 2 == 0, True])
        worst = max(worst, finite_difference_check(lambda t, x: kd_term(kind, teacher, x, mask), student))
    assert worst < 1e-4


def test_sft_gradient_fd():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        targets = rng.integers(0, 7, size=4)
        mask = rng.random(4) < 0.8
        mask[0] = True
        worst = max(worst, finite_difference_check(lambda t, x: sft_nll(x, targets, mask), rng.normal(size=(4, 7))))
    assert worst < 1e-4


def test_classification_gradient_fd():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 3, size=5)
        worst = max(worst, finite_difference_check(lambda t, x: class_nll(nx.softmax(x), labels), rng.normal(size=(5, 3))))
    assert worst < 1e-4


# --- combined and classification -------------------------------------------

def test_loss_weights_validation():
    assert LossWeights() == LossWeights(0.1, 0.9)
    with pytest.raises(ValueError):
        LossWeights(-0.1, 1.0)
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0)


def test_explanation_loss_linear_combination():
    w = LossWeights(0.1, 0.9)
    assert w.lambda_sft * 2.0 + w.lambda_kd * 1.0 == pytest.approx(1.1)
    rng = np.random.default_rng(3)
    t, s = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    y, m = rng.integers(0, 6, 4), np.ones(4, bool)
    rep = explanation_loss(t, s, y, m, w, "JS")
    assert isinstance(rep, LossReport) and rep.token_count == 4
    assert rep.combined == pytest.approx(0.1 * rep.sft + 0.9 * rep.kd, abs=1e-12)
    rep0 = explanation_loss(t, s, y, m, LossWeights(1.0, 0.0), "JS")
    assert rep0.combined == rep0.sft == sft_loss(s, y, m)


def test_explanation_loss_teacher_clone():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(5, 8))
    greedy = np.argmax(z, axis=-1)
    rep = explanation_loss(z, z.copy(), greedy, np.ones(5, bool), LossWeights(), "SKL")
    assert rep.kd < 1e-10
    assert rep.combined == pytest.approx(0.1 * rep.sft, abs=1e-10)


def test_classification_loss_values():
    assert classification_loss([0, 1, 0], 1) < 1e-10
    assert classification_loss([1 / 3, 1 / 3, 1 / 3], 2) == pytest.approx(math.log(3), abs=1e-12)
    assert classification_loss([0.7, 0.2, 0.1], 1) == pytest.approx(-math.log(0.2), abs=1e-12)
    assert classification_loss([0.7, 0.2, 0.1], 1) == pytest.approx(1.609438, abs=1e-6)
    with pytest.raises(ValueError):
        classification_loss([0.5, 0.6, -0.1], 0)
    with pytest.raises(ValueError):
        classification_loss([0.5, 0.5], 0)
