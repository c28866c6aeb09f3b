import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leaffm.data import Instance, InstanceTable
from leaffm.errors import ConfigError, FeatureLookupError
from leaffm.params import ModelConfig, ParameterSet, build_parameters
from leaffm.scoring import (
    fm_interaction_bruteforce, fm_interaction_fast, fm_interaction_pairwise, forward, predict_logits, score,
    score_ffm, score_fm, score_leaf,
)

import reference as ref

VARIANTS = ["fm", "ffm", "la_fm", "ls_fm", "lp_fm"]


def model(variant, vocab=(4, 5, 3, 6), d=3, seed=0, **kw):
    c = ModelConfig(variant=variant, per_field_vocab=vocab, d=d, **kw)
    return c, ref.randomize(build_parameters(c), np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# interaction kernels

def test_interaction_example_single_pair():
    assert fm_interaction_fast([([1.0, 2.0], 1.0), ([3.0, -1.0], 2.0)]) == pytest.approx(2.0)


def test_interaction_empty_and_single():
    assert fm_interaction_fast([]) == 0.0
    assert fm_interaction_fast([([1.0, 2.0], 3.0)]) == 0.0


def test_interaction_orthogonal_vectors():
    vecs = np.eye(4)
    assert fm_interaction_fast(vecs, np.array([1.0, 2.0, 3.0, 4.0])) == 0.0


def test_fast_matches_bruteforce_many():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, d = rng.integers(0, 12), rng.integers(1, 8)
        V, x = rng.normal(size=(n, d)), rng.normal(size=n)
        assert abs(fm_interaction_fast(V, x) - fm_interaction_bruteforce(V, x)) < 1e-10


def test_pairwise_matches_fast_batched():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(7, 9, 4))
    np.testing.assert_allclose(fm_interaction_pairwise(A), fm_interaction_fast(A), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_interaction_permutation_invariant(n, d, seed):
    rng = np.random.default_rng(seed)
    V, x = rng.normal(size=(n, d)), rng.normal(size=n)
    perm = rng.permutation(n)
    assert abs(fm_interaction_fast(V, x) - fm_interaction_fast(V[perm], x[perm])) < 1e-10


# ---------------------------------------------------------------------------
# model scores

def test_scalar_fm_example():
    # w0=0, w=(0.5, 0), v=(1, 0) and (0, 1): interaction is 0, logit 0.5
    c = ModelConfig(variant="fm", per_field_vocab=(1, 1), d=2)
    params = ParameterSet(np.zeros(1), np.array([0.5, 0.0]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    out = score_fm(Instance(1, [(0, 0, 1.0), (1, 0, 1.0)]), params, c)
    assert out.interaction == 0.0 and out.logit == 0.5
    assert out.probability == pytest.approx(0.6224593312)


def test_empty_instance_is_bias():
    for variant in VARIANTS:
        c, params = model(variant)
        out = score(Instance(0, []), params, c)
        assert out.logit == float(params.w0[0]) and out.linear == 0.0 and out.interaction == 0.0


def test_ffm_single_field_pair_example():
    # field 0 slot 0 is its partner field 1; set it orthogonal to field 1's slot for field 0
    c = ModelConfig(variant="ffm", per_field_vocab=(1, 1), d=2)
    params = build_parameters(c)
    params.V[0, 0] = [1.0, 0.0]
    params.V[1, 0] = [0.0, 1.0]
    assert score_ffm(Instance(0, [(0, 0, 1.0), (1, 0, 1.0)]), params, c).interaction == 0.0
    params.V[1, 0] = [2.0, 5.0]
    assert score_ffm(Instance(0, [(0, 0, 1.0), (1, 0, 3.0)]), params, c).interaction == 6.0


@pytest.mark.parametrize("variant", VARIANTS)
def test_score_matches_literal_equation(variant):
    rng = np.random.default_rng(2)
    kw = dict(r=2, p=3, u=1 if variant == "lp_fm" else 2)
    c, params = model(variant, seed=3, **kw)
    for _ in range(50):
        inst = ref.random_instance(rng, c.per_field_vocab, 0.25)
        assert abs(score(inst, params, c).logit - ref.logit(inst, params, c)) < 1e-10


@pytest.mark.parametrize("activation", ["relu", "identity"])
def test_la_identity_and_relu_literal(activation):
    rng = np.random.default_rng(4)
    c, params = model("la_fm", seed=5, u=3, activation=activation)
    table = InstanceTable.from_instances([ref.random_instance(rng, c.per_field_vocab) for _ in range(40)], c.f)
    logits = forward(table, params, c)[0].logit
    for i, inst in enumerate(table):
        assert abs(logits[i] - ref.logit(inst, params, c)) < 1e-10


def test_batch_equals_single():
    rng = np.random.default_rng(6)
    c, params = model("lp_fm", seed=7)
    table = ref.random_table(rng, c.per_field_vocab, 33)
    batch = predict_logits(table, params, c, chunk=8)
    for i, inst in enumerate(table):
        assert batch[i] == pytest.approx(score_leaf(inst, params, c).logit, abs=1e-13)


def test_la_u0_equals_fm():
    rng = np.random.default_rng(8)
    c_la, params = model("la_fm", u=0, seed=9)
    c_fm = c_la.with_(variant="fm")
    fm_params = ParameterSet(params.w0, params.w, params.V)
    table = ref.random_table(rng, c_la.per_field_vocab, 100)
    np.testing.assert_allclose(predict_logits(table, params, c_la), predict_logits(table, fm_params, c_fm),
                               atol=1e-12, rtol=0)


def test_la_pair_count():
    # u+1 vectors per present feature; the interaction sums over all C((u+1)k, 2) pairs
    c, params = model("la_fm", u=2, seed=10)
    inst = Instance(0, [(0, 1, 1.0), (2, 0, 1.0), (3, 5, 1.0)])
    _, cache = forward(InstanceTable.from_instances([inst], c.f), params, c)
    n_active = int(np.sum(np.abs(cache.active[0]).sum(axis=1) > 0))
    assert n_active == 9
    assert math.comb(n_active, 2) == 36


def test_absent_field_contributes_nothing():
    c, params = model("ls_fm", seed=11)
    a = score(Instance(0, [(0, 1, 1.0), (1, 2, 0.5)]), params, c).logit
    b = score(Instance(0, [(0, 1, 1.0), (1, 2, 0.5), (3, 0, 0.0)]), params, c).logit
    assert a == pytest.approx(b, abs=1e-14)


def test_lookup_errors():
    c, params = model("fm")
    with pytest.raises(FeatureLookupError):
        score(Instance(0, [(1, 5, 1.0)]), params, c)
    with pytest.raises(FeatureLookupError):
        forward(InstanceTable(np.zeros((1, 3), dtype=int), np.ones((1, 3)), [0]), params, c)


def test_variant_specific_entry_points():
    c, params = model("fm")
    with pytest.raises(ConfigError):
        score_leaf(Instance(0, []), params, c)
    with pytest.raises(ConfigError):
        score_ffm(Instance(0, []), params, c)
    c2, p2 = model("la_fm")
    with pytest.raises(ConfigError):
        score_fm(Instance(0, []), p2, c2)


def test_scoring_does_not_mutate():
    rng = np.random.default_rng(12)
    c, params = model("lp_fm", seed=13)
    before = params.copy()
    predict_logits(ref.random_table(rng, c.per_field_vocab, 20), params, c)
    for (name, a), (_, b) in zip(params.named_tensors(), before.named_tensors()):
        assert a.tobytes() == b.tobytes(), name
