"""Tests for the training losses and negative samplers."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remex.autodiff import Tape, Tensor, check_gradients, parameter
from remex.data import (CooccurrenceMatrix, KnowledgeGraph, RelationVocab,
                        Triplet)
from remex.errors import SamplingError
from remex.losses import (ModalLogits, bce_loss, best_logit, corrupt_negatives,
                          kl_div, remap_b_loss, remap_m_loss,
                          sample_negatives, softmax_normalize)

EPS = 1e-7


def probs(*xs):
    return Tensor(np.clip(np.array(xs, dtype=np.float64), EPS, 1 - EPS))


# -------------------------------------------------------------------- bce

def test_bce_uniform_probability():
    loss = bce_loss(probs(0.5, 0.5, 0.5), np.array([1.0, 0.0, 1.0]))
    assert np.allclose(loss.data, 3 * np.log(2), atol=1e-12)


def test_bce_perfect_prediction_is_tiny():
    r = np.array([1.0, 0.0, 1.0])
    loss = bce_loss(probs(*r), r)
    assert 0.0 <= float(loss.data) < 1e-6


def test_bce_scalar_oracle():
    p = 1.0 / (1.0 + np.exp(-1.0))
    loss = bce_loss(probs(p), np.array([1.0]))
    assert np.allclose(loss.data, 0.31326, atol=1e-5)
    assert np.allclose(loss.data, -np.log(p), atol=1e-12)


def test_bce_gradient():
    p = parameter(np.array([0.3, 0.6, 0.9]), "p", dtype=np.float64)
    r = np.array([0.0, 1.0, 1.0])
    assert check_gradients(lambda: bce_loss(p, r), [p], step=1e-6) < 1e-6


# -------------------------------------------------------- softmax normalize

def test_softmax_normalize_uniform():
    d = softmax_normalize(probs(0.5, 0.5, 0.5))
    assert np.allclose(d.data, 1 / 3, atol=1e-12)


def test_softmax_normalize_oracle():
    d = softmax_normalize(Tensor(np.array([1.0, 0.0, 0.0])))
    assert np.allclose(d.data, [0.57612, 0.21194, 0.21194], atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_softmax_normalize_preserves_argmax_and_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(EPS, 1 - EPS, size=4)
    d = softmax_normalize(Tensor(p))
    assert np.argmax(d.data) == np.argmax(p)
    assert abs(d.data.sum() - 1.0) < 1e-9


# --------------------------------------------------------------------- kl

def test_kl_identical_is_zero():
    d = probs(0.2, 0.3, 0.5)
    assert float(kl_div(d, d).data) == 0.0


def test_kl_hand_oracle():
    a = Tensor(np.array([0.25, 0.75]))
    b = Tensor(np.array([0.5, 0.5]))
    expect = 0.5 * np.log(2) + 0.5 * np.log(2 / 3)
    assert np.allclose(kl_div(a, b).data, expect, atol=1e-12)
    assert np.allclose(kl_div(a, b).data, 0.14384, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_kl_symmetric_sum_positive_for_distinct(seed):
    rng = np.random.default_rng(seed)
    a = rng.dirichlet(np.ones(3))
    b = rng.dirichlet(np.ones(3))
    total = float(kl_div(Tensor(a), Tensor(b)).data) \
        + float(kl_div(Tensor(b), Tensor(a)).data)
    if np.abs(a - b).max() > 1e-6:
        assert total > 0.0
    assert total >= -1e-12


# ---------------------------------------------------------------- remap_m

def test_remap_m_zero_weight_is_bitwise_base():
    lt, lg = Tensor(np.float64(1.25)), Tensor(np.float64(0.75))
    d1, d2 = probs(0.3, 0.7), probs(0.6, 0.4)
    loss = remap_m_loss(lt, lg, d1, d2, 0.0)
    assert float(loss.data) == 2.0


def test_remap_m_equal_distributions_add_nothing():
    lt, lg = Tensor(np.float64(0.5)), Tensor(np.float64(0.25))
    d = probs(0.2, 0.8)
    loss = remap_m_loss(lt, lg, d, d, 3.5)
    assert float(loss.data) == 0.75


def test_remap_m_two_direction_oracle():
    # dists [0.25, 0.75] vs [0.5, 0.5]: the two KL directions are
    # 0.143841 and 0.130812 nats; their sum rides on top of L^T + L^G.
    lt, lg = Tensor(np.float64(1.0)), Tensor(np.float64(2.0))
    d_t = Tensor(np.array([0.25, 0.75]))
    d_g = Tensor(np.array([0.5, 0.5]))
    loss = remap_m_loss(lt, lg, d_t, d_g, 1.0)
    k1 = 0.5 * np.log(2) + 0.5 * np.log(2 / 3)
    k2 = 0.25 * np.log(0.25 / 0.5) + 0.75 * np.log(0.75 / 0.5)
    assert np.allclose(loss.data, 3.0 + k1 + k2, atol=1e-12)
    assert np.allclose(loss.data, 3.0 + 0.274653, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 5.0))
def test_remap_m_dominates_base_loss(seed, lam):
    rng = np.random.default_rng(seed)
    d_t = rng.dirichlet(np.ones(3))
    d_g = rng.dirichlet(np.ones(3))
    lt, lg = Tensor(np.float64(0.4)), Tensor(np.float64(0.6))
    loss = float(remap_m_loss(lt, lg, Tensor(d_t), Tensor(d_g), lam).data)
    assert loss >= 1.0 - 1e-12
    if np.abs(d_t - d_g).max() > 1e-6:
        assert loss > 1.0


# -------------------------------------------------------------- best logit

def test_best_logit_examples():
    r1 = np.array([1.0])
    r0 = np.array([0.0])
    assert best_logit(probs(0.8), probs(0.6), r1).data[0] == \
        pytest.approx(0.8)
    assert best_logit(probs(0.8), probs(0.6), r0).data[0] == \
        pytest.approx(0.6)


def test_best_logit_tie_takes_text():
    p_t = parameter(np.array([0.7]), "pt", dtype=np.float64)
    p_g = parameter(np.array([0.7]), "pg", dtype=np.float64)
    r = np.array([1.0])
    with Tape() as tape:
        out = best_logit(p_t, p_g, r)
    tape.backward(out)
    assert out.data[0] == 0.7
    assert p_t.grad[0] == 1.0 and p_g.grad[0] == 0.0


def test_best_logit_four_case_table():
    # enumerate orderings x labels, both coordinates at once
    for hi, lo in [(0.9, 0.2), (0.55, 0.45)]:
        for r_k in (0.0, 1.0):
            for text_is_hi in (True, False):
                p_t = probs(hi if text_is_hi else lo)
                p_g = probs(lo if text_is_hi else hi)
                got = best_logit(p_t, p_g, np.array([r_k])).data[0]
                assert got == pytest.approx(hi if r_k else lo)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_best_logit_never_worsens_supervised_term(seed):
    rng = np.random.default_rng(seed)
    p_t = np.clip(rng.uniform(size=3), EPS, 1 - EPS)
    p_g = np.clip(rng.uniform(size=3), EPS, 1 - EPS)
    r = rng.integers(0, 2, size=3).astype(float)
    p_b = best_logit(Tensor(p_t), Tensor(p_g), r).data
    for k in range(3):
        if r[k] == 1.0:
            assert -np.log(p_b[k]) <= min(-np.log(p_t[k]),
                                          -np.log(p_g[k])) + 1e-12
        else:
            assert -np.log1p(-p_b[k]) <= min(-np.log1p(-p_t[k]),
                                             -np.log1p(-p_g[k])) + 1e-12


# ---------------------------------------------------------------- remap_b

def test_remap_b_zero_weight_is_bitwise_base():
    lt, lg = Tensor(np.float64(0.5)), Tensor(np.float64(1.5))
    loss = remap_b_loss(lt, lg, probs(0.4), probs(0.9), np.array([1.0]), 0.0)
    assert float(loss.data) == 2.0


def test_remap_b_identical_modalities_reduce_to_supervised_terms():
    p = probs(0.7, 0.2, 0.4)
    r = np.array([1.0, 0.0, 0.0])
    lt, lg = Tensor(np.float64(0.3)), Tensor(np.float64(0.7))
    lam = 2.0
    loss = remap_b_loss(lt, lg, p, p, r, lam)
    expect = 1.0 + lam * float(bce_loss(p, r).data)
    assert np.allclose(loss.data, expect, atol=1e-12)


def test_remap_b_straight_line_oracle():
    p_t = np.array([0.8, 0.3, 0.55])
    p_g = np.array([0.6, 0.45, 0.2])
    r = np.array([1.0, 0.0, 1.0])
    lam = 1.5
    lt, lg = Tensor(np.float64(0.9)), Tensor(np.float64(1.1))
    loss = remap_b_loss(lt, lg, Tensor(p_t), Tensor(p_g), r, lam)

    p_b = np.where(r == 1.0, np.maximum(p_t, p_g), np.minimum(p_t, p_g))
    l_b = -np.sum(r * np.log(p_b) + (1 - r) * np.log(1 - p_b))

    def sm(x):
        e = np.exp(x - x.max())
        return e / e.sum()

    d_b, d_t, d_g = sm(p_b), sm(p_t), sm(p_g)
    kl1 = np.sum(d_t * np.log(d_t / d_b))
    kl2 = np.sum(d_g * np.log(d_g / d_b))
    expect = 0.9 + 1.1 + lam * (l_b + kl1 + kl2)
    assert np.allclose(loss.data, expect, atol=1e-10)


def test_remap_b_gradients_flow_to_both_modalities():
    p_t = parameter(np.array([0.8, 0.3]), "pt", dtype=np.float64)
    p_g = parameter(np.array([0.6, 0.45]), "pg", dtype=np.float64)
    r = np.array([1.0, 0.0])
    zero = Tensor(np.float64(0.0))

    def loss():
        return remap_b_loss(zero, zero, p_t, p_g, r, 1.0)

    assert check_gradients(loss, [p_t, p_g], step=1e-7) < 1e-6
    assert p_t.grad is not None and np.any(p_t.grad != 0)
    assert p_g.grad is not None and np.any(p_g.grad != 0)


def test_modal_logits_container():
    p_t, p_g = probs(0.8, 0.3), probs(0.6, 0.45)
    plain = ModalLogits.from_probs(p_t, p_g)
    assert plain.p_best is None
    assert abs(plain.dist_text.data.sum() - 1.0) < 1e-9
    assert abs(plain.dist_graph.data.sum() - 1.0) < 1e-9
    with pytest.raises(ValueError):
        ModalLogits.from_probs(p_t, p_g, with_best=True)
    full = ModalLogits.from_probs(p_t, p_g, r=np.array([1.0, 0.0]),
                                  with_best=True)
    assert full.p_best is not None
    assert np.allclose(full.p_best.data, [0.8, 0.3], atol=1e-12)
    assert abs(full.dist_best.data.sum() - 1.0) < 1e-9


# ------------------------------------------------------- negative sampling

def cooc_fixture():
    m = CooccurrenceMatrix()
    m.set("A", "B", 10)
    m.set("A", "C", 1)
    m.set("B", "C", 2)
    m.set("A", "D", 0)
    return m


def test_sample_negatives_threshold_zero_is_empty():
    with pytest.warns(UserWarning):
        got = sample_negatives(cooc_fixture(), set(), threshold=0, n=2, seed=0)
    assert got == []


def test_sample_negatives_enumeration():
    m = CooccurrenceMatrix()
    m.set("A", "B", 10)
    m.set("A", "C", 1)
    got = sample_negatives(m, set(), threshold=5, n=1, seed=0)
    assert got == [("A", "C")]


def test_sample_negatives_excludes_positives_in_either_direction():
    got = sample_negatives(cooc_fixture(), {("C", "A")}, threshold=5, n=2,
                           seed=0)
    assert ("A", "C") not in got and ("C", "A") not in got


def test_sample_negatives_deterministic_and_distinct():
    m = CooccurrenceMatrix()
    for i in range(20):
        m.set("A", f"N{i:02d}", 1)
    a = sample_negatives(m, set(), threshold=5, n=8, seed=3)
    b = sample_negatives(m, set(), threshold=5, n=8, seed=3)
    c = sample_negatives(m, set(), threshold=5, n=8, seed=4)
    assert a == b
    assert len(set(a)) == 8
    assert a != c


def test_sample_negatives_small_pool_returns_all_with_warning():
    with pytest.warns(UserWarning):
        got = sample_negatives(cooc_fixture(), set(), threshold=5, n=50,
                               seed=0)
    assert set(got) == {("A", "C"), ("B", "C"), ("A", "D")}


# ------------------------------------------------------ corrupt negatives

def kg_fixture(edges):
    vocab = RelationVocab()
    return KnowledgeGraph([Triplet(*e) for e in edges], vocab)


def test_corrupt_negatives_exhausted_pool():
    kg = kg_fixture([("A", "MC", "B")])
    with pytest.raises(SamplingError):
        corrupt_negatives(kg, Triplet("A", "MC", "B"), 1, seed=0)


def test_corrupt_negatives_single_candidate():
    kg = kg_fixture([("A", "MC", "B"), ("B", "DDx", "C")])
    got = corrupt_negatives(kg, Triplet("A", "MC", "B"), 4, seed=0)
    assert all(t == Triplet("A", "MC", "C") for t in got)
    assert len(got) == 4


def test_corrupt_negatives_deterministic_and_valid():
    edges = [("A", "MC", "B"), ("B", "DDx", "C"), ("C", "MBC", "D"),
             ("A", "DDx", "D")]
    kg = kg_fixture(edges)
    trip = Triplet("A", "MC", "B")
    a = corrupt_negatives(kg, trip, 6, seed=5)
    b = corrupt_negatives(kg, trip, 6, seed=5)
    assert a == b
    for t in a:
        assert t.subject == "A" and t.relation == "MC"
        assert t.object != "A"
        assert not kg.has_edge(t.subject, t.relation, t.object)
