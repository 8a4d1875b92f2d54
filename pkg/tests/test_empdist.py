import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxrec import empdist
from ctxrec.empdist import (AttributeDistribution, divergence_matrix, estimate,
                            js, js_joint, kl, pooled_distribution)
from ctxrec.synthlog import (AttributeSchema, ContextKey, GeneratorConfig,
                             RecordSet, generate)

ONE_FIELD = AttributeSchema(fields=(("category", 2),))
THREE_VALS = AttributeSchema(fields=(("category", 3),))


def dist(schema, *vectors):
    return AttributeDistribution.from_vectors(schema, vectors)


def records_with_attrs(schema, ctx_ids, attr_rows, clicks=None):
    n = len(ctx_ids)
    contexts = tuple(ContextKey((f"m{i}", "h", "s", False))
                     for i in range(max(ctx_ids) + 1))
    clicks = np.ones(n, dtype=bool) if clicks is None else np.asarray(clicks)
    return RecordSet(schema, contexts, np.zeros(n, dtype=int),
                     np.zeros(n, dtype=int), np.arange(1, n + 1),
                     np.array(ctx_ids), np.array(attr_rows), clicks)


# --- estimation --------------------------------------------------------------

def test_estimate_direct_frequency():
    recs = records_with_attrs(ONE_FIELD, [0, 0, 0, 0], [[0], [0], [0], [1]])
    d = estimate(recs, ONE_FIELD, alpha=1e-6)
    np.testing.assert_allclose(d[recs.contexts[0]].vectors[0], [0.75, 0.25], atol=1e-5)


def test_estimate_additive_smoothing_hand_case():
    # counts [0, 0, 4] with alpha=1: (0+1)/(4+3), (0+1)/7, (4+1)/7
    recs = records_with_attrs(THREE_VALS, [0] * 4, [[2]] * 4)
    d = estimate(recs, THREE_VALS, alpha=1.0)
    np.testing.assert_allclose(d[recs.contexts[0]].vectors[0],
                               [1 / 7, 1 / 7, 5 / 7], atol=1e-12)


def test_estimate_skips_contexts_without_clicks():
    recs = records_with_attrs(ONE_FIELD, [0, 1], [[0], [1]], clicks=[True, False])
    d = estimate(recs, ONE_FIELD)
    assert recs.contexts[1] not in d
    assert d[recs.contexts[0]].support_count == 1


def test_estimate_low_support_blends_with_pool():
    recs = records_with_attrs(ONE_FIELD, [0] * 10 + [1] * 2,
                              [[0]] * 10 + [[1]] * 2)
    pool = pooled_distribution(recs, ONE_FIELD, alpha=1e-6)
    d = estimate(recs, ONE_FIELD, alpha=1e-6, min_support=5, pool=pool)
    w = 2 / (2 + 5)
    local = np.array([1e-6 / (2 + 2e-6), (2 + 1e-6) / (2 + 2e-6)])
    expect = w * local + (1 - w) * pool.vectors[0]
    np.testing.assert_allclose(d[recs.contexts[1]].vectors[0], expect, atol=1e-12)
    # ample support: no blending
    np.testing.assert_allclose(d[recs.contexts[0]].vectors[0][0], 1.0, atol=1e-5)


def test_estimate_matches_planted_truth_at_scale():
    cfg = GeneratorConfig(users=1, contexts_per_user=4, groups=2, seq_len=100000,
                          noise=0.0, neg_per_click=0, attr_cards=(6, 4, 3, 3),
                          ctx_weight_conc=50.0)
    recs, truth = generate(cfg, seed=21)
    d = estimate(recs, cfg.schema())
    for ctx, ad in d.items():
        g = truth.group_of(ctx)
        assert ad.l1_to(truth.group_dists[g]) < 0.02


# --- divergences --------------------------------------------------------------

def test_kl_identity_is_exact_zero():
    p = dist(ONE_FIELD, [0.3, 0.7])
    assert kl(p, p) == 0.0
    assert js(p, p) == 0.0


def test_kl_hand_value():
    p = dist(ONE_FIELD, [0.75, 0.25])
    q = dist(ONE_FIELD, [0.25, 0.75])
    expect = 0.5 * math.log(3.0)
    assert kl(p, q) == pytest.approx(expect, abs=1e-12)
    assert js(p, q) == pytest.approx(expect, abs=1e-12)
    assert js(p, q) == js(q, p)


def test_kl_rejects_schema_mismatch():
    p = dist(ONE_FIELD, [0.5, 0.5])
    q = dist(THREE_VALS, [0.2, 0.3, 0.5])
    with pytest.raises(ValueError):
        kl(p, q)


def test_kl_field_order_invariance():
    two = AttributeSchema(fields=(("a", 2), ("b", 3)))
    two_rev = AttributeSchema(fields=(("b", 3), ("a", 2)))
    p = dist(two, [0.2, 0.8], [0.1, 0.3, 0.6])
    q = dist(two, [0.6, 0.4], [0.3, 0.3, 0.4])
    pr = dist(two_rev, [0.1, 0.3, 0.6], [0.2, 0.8])
    qr = dist(two_rev, [0.3, 0.3, 0.4], [0.6, 0.4])
    assert kl(p, q) == pytest.approx(kl(pr, qr), abs=1e-12)


@st.composite
def simplex_pair(draw, card=5):
    def vec():
        raw = draw(st.lists(st.floats(0.01, 10.0), min_size=card, max_size=card))
        arr = np.array(raw)
        return arr / arr.sum()
    return vec(), vec()


@given(simplex_pair())
@settings(max_examples=200, deadline=None)
def test_js_nonnegative_and_symmetric(pair):
    p = dist(AttributeSchema(fields=(("category", 5),)), pair[0])
    q = dist(AttributeSchema(fields=(("category", 5),)), pair[1])
    v, w = js(p, q), js(q, p)
    assert v >= 0.0
    assert v == w  # bitwise symmetry by construction
    if np.allclose(pair[0], pair[1], atol=1e-15):
        assert v == pytest.approx(0.0, abs=1e-12)


def test_kl_nonnegative_over_random_pairs():
    rng = np.random.default_rng(33)
    schema = AttributeSchema(fields=(("category", 8),))
    for _ in range(1000):
        p = dist(schema, rng.dirichlet(np.ones(8)) + 1e-9)
        q = dist(schema, rng.dirichlet(np.ones(8)) + 1e-9)
        assert kl(p, q) >= 0.0


def test_smoothing_monotonicity_with_zero_counts():
    recs_p = records_with_attrs(THREE_VALS, [0] * 4, [[2]] * 4)
    recs_q = records_with_attrs(THREE_VALS, [0] * 4, [[0]] * 4)
    vals = {}
    for alpha in (1e-6, 1e-3, 1.0):
        p = estimate(recs_p, THREE_VALS, alpha=alpha)[recs_p.contexts[0]]
        q = estimate(recs_q, THREE_VALS, alpha=alpha)[recs_q.contexts[0]]
        vals[alpha] = js(p, q)
        assert math.isfinite(vals[alpha])
    assert vals[1.0] < vals[1e-6]


# --- joint mode: factorization gap --------------------------------------------

def test_joint_divergence_on_independent_fields():
    # the generator draws fields independently, so the joint KL must be close
    # to the SUM of marginal KLs, i.e. n_fields times the factorized mean
    cfg = GeneratorConfig(users=1, contexts_per_user=2, groups=2, seq_len=40000,
                          noise=0.0, neg_per_click=0, attr_cards=(5, 4),
                          ctx_weight_conc=50.0)
    recs, _ = generate(cfg, seed=17)
    schema = cfg.schema()
    marg = estimate(recs, schema)
    joint = empdist.estimate_joint(recs, schema)
    c0, c1 = sorted(marg.keys())
    factored = js(marg[c0], marg[c1])
    jointv = js_joint(joint[c0], joint[c1])
    assert jointv == pytest.approx(2 * factored, rel=0.15, abs=0.02)


def test_joint_mode_rejects_many_fields():
    cfg = GeneratorConfig(users=1, seq_len=10, neg_per_click=0)
    recs, _ = generate(cfg, seed=1)
    with pytest.raises(ValueError):
        empdist.estimate_joint(recs, cfg.schema())


# --- divergence matrix ---------------------------------------------------------

def test_matrix_single_context():
    recs = records_with_attrs(ONE_FIELD, [0, 0], [[0], [1]])
    dm = divergence_matrix(estimate(recs, ONE_FIELD))
    assert dm.values.shape == (1, 1)
    assert dm.values[0, 0] == 0.0


def test_matrix_structure():
    cfg = GeneratorConfig(users=1, contexts_per_user=6, groups=3, seq_len=3000,
                          noise=0.0, neg_per_click=0, attr_cards=(6, 4, 3, 3),
                          ctx_weight_conc=50.0)
    recs, _ = generate(cfg, seed=23)
    dm = divergence_matrix(estimate(recs, cfg.schema()))
    np.testing.assert_array_equal(dm.values, dm.values.T)
    np.testing.assert_array_equal(np.diag(dm.values), 0.0)
    assert (dm.values >= 0).all()


def test_matrix_separates_planted_groups():
    cfg = GeneratorConfig(users=1, contexts_per_user=9, groups=3, seq_len=6000,
                          noise=0.0, neg_per_click=0, attr_cards=(8, 6, 4, 4),
                          ctx_weight_conc=50.0)
    recs, truth = generate(cfg, seed=29)
    dists = estimate(recs, cfg.schema())
    dm = divergence_matrix(dists)
    groups = np.array([truth.group_of(c) for c in dm.contexts])
    same = dm.values[groups[:, None] == groups[None, :]]
    same = same[same > 0]  # off-diagonal
    cross = dm.values[groups[:, None] != groups[None, :]]
    assert same.mean() < cross.mean()
    # Fig-2-style stronger property: every within-group pair below every cross pair
    assert same.max() < cross.min()


def test_matrix_cache_roundtrip(tmp_path):
    cfg = GeneratorConfig(users=2, contexts_per_user=4, groups=2, seq_len=500,
                          noise=0.0, neg_per_click=0, attr_cards=(5, 4, 3, 3))
    recs, _ = generate(cfg, seed=31)
    first = empdist.user_divergences(recs, cfg.schema(), cache_dir=tmp_path)
    again = empdist.user_divergences(recs, cfg.schema(), cache_dir=tmp_path)
    for u in first:
        np.testing.assert_array_equal(first[u].values, again[u].values)
        assert first[u].contexts == again[u].contexts
    assert len(list(tmp_path.glob("*.div"))) == 2
