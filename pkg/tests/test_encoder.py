import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxrec import autodiff as ad
from ctxrec import encoder
from ctxrec.autodiff import Parameter
from ctxrec.gradcheck import check_scalar_fn
from ctxrec.model import ContextMatchModel, ModelConfig
from ctxrec.synthlog import AttributeSchema, ContextKey

SCHEMA = AttributeSchema(fields=(("category", 3), ("price", 2)))
CONTEXTS = tuple(ContextKey((m, "h", "s", False)) for m in ("a", "b", "c"))


def tiny_model(seed=0, **cfg):
    defaults = dict(dim=4, n_prototypes=2, gat_layers=1)
    defaults.update(cfg)
    return ContextMatchModel(SCHEMA, CONTEXTS, n_users=3, n_pois=6,
                             cfg=ModelConfig(**defaults), seed=seed)


# --- personalization ---------------------------------------------------------

def test_personalized_zero_user_equals_global_row():
    m = tiny_model()
    m.user_emb.data[1] = 0.0
    out = encoder.personalized(m, 1, "context", [2])
    np.testing.assert_array_equal(out.data, m.ctx_emb.data[2:3])


def test_personalized_gradient_is_identity():
    m = tiny_model()
    out = encoder.personalized(m, 0, "context", [1])
    ad.backward(ad.sum_all(out))
    np.testing.assert_array_equal(m.user_emb.grad[0], np.ones(4))
    np.testing.assert_array_equal(m.ctx_emb.grad[1], np.ones(4))


def test_personalized_two_users_differ_by_user_rows():
    m = tiny_model()
    a = encoder.personalized(m, 0, "context", [1])
    b = encoder.personalized(m, 2, "context", [1])
    np.testing.assert_allclose(a.data - b.data,
                               m.user_emb.data[0:1] - m.user_emb.data[2:3],
                               atol=1e-15)


def test_personalized_rejects_unknown_ids():
    m = tiny_model()
    with pytest.raises(ValueError):
        encoder.personalized(m, 99, "context", [0])
    with pytest.raises(ValueError):
        encoder.personalized(m, 0, "context", [99])
    with pytest.raises(ValueError):
        encoder.personalized(m, 0, "nope", [0])


# --- decoding ----------------------------------------------------------------

@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_decode_outputs_valid_distributions(seed):
    m = tiny_model()
    reps = ad.constant(np.random.default_rng(seed).normal(0, 3, size=(4, 4)))
    probs = encoder.decode(m, reps).data
    assert (probs > 0).all() and (probs < 1).all()
    for start, stop in SCHEMA.field_slices():
        np.testing.assert_allclose(probs[:, start:stop].sum(axis=1), 1.0, atol=1e-9)


def test_decode_raw_mode_skips_normalization():
    m = tiny_model(raw_decode=True)
    probs = encoder.decode(m, ad.constant(np.ones((2, 4)))).data
    assert not np.allclose(probs[:, :3].sum(axis=1), 1.0)
    assert ((0 < probs) & (probs < 1)).all()  # bare sigmoids


# --- learned divergence and similarity ----------------------------------------

def test_estimated_divergence_identity_and_symmetry():
    m = tiny_model()
    rng = np.random.default_rng(3)
    x = ad.constant(rng.normal(size=(1, 4)))
    y = ad.constant(rng.normal(size=(1, 4)))
    assert encoder.estimated_divergence(m, x, x).item() == pytest.approx(0.0, abs=1e-12)
    dxy = encoder.estimated_divergence(m, x, y).item()
    dyx = encoder.estimated_divergence(m, y, x).item()
    assert dxy == dyx
    assert dxy >= 0.0


def test_pairwise_divergence_matrix_symmetric():
    m = tiny_model()
    reps = ad.constant(np.random.default_rng(5).normal(size=(5, 4)))
    full = encoder.pairwise_divergence(m, encoder.decode(m, reps)).data
    np.testing.assert_array_equal(full, full.T)
    np.testing.assert_allclose(np.diag(full), 0.0, atol=1e-12)
    assert (full > -1e-12).all()


def test_estimated_divergence_gradient():
    m = tiny_model()
    rng = np.random.default_rng(7)
    x = Parameter(rng.normal(size=(1, 4)))
    y = Parameter(rng.normal(size=(1, 4)))
    leaves = [x, y] + m.decoder.parameters()
    assert check_scalar_fn(
        lambda: encoder.estimated_divergence(m, x, y), leaves) < 1e-4


def test_similarity_identity_is_one():
    m = tiny_model()
    x = ad.constant(np.random.default_rng(9).normal(size=(1, 4)))
    assert encoder.similarity(m, x, x).item() == pytest.approx(1.0, abs=1e-9)


def test_similarity_inner_product_ablation():
    m = tiny_model(sim_mode="ip")
    x = ad.constant([[1.0, 0.0, 2.0, 0.0]])
    y = ad.constant([[3.0, 1.0, 0.5, 0.0]])
    assert encoder.similarity(m, x, y).item() == pytest.approx(4.0)
    block = encoder.cross_similarity(m, x, y)
    assert block.data[0, 0] == pytest.approx(4.0)


def test_similarity_monotone_in_divergence():
    m = tiny_model()
    rng = np.random.default_rng(11)
    reps = ad.constant(rng.normal(size=(4, 4)))
    div = encoder.pairwise_divergence(m, encoder.decode(m, reps)).data
    sim = encoder.similarity_matrix(m, reps).data
    np.testing.assert_allclose(sim, 1.0 - div, atol=1e-12)


# --- losses --------------------------------------------------------------------

def test_alignment_loss_zero_when_targets_match():
    m = tiny_model()
    ctx_ids = np.array([0, 1, 2])
    reps = encoder.personalized(m, 0, "context", ctx_ids)
    target = encoder.pairwise_divergence(m, encoder.decode(m, reps)).data
    loss = encoder.alignment_loss(m, 0, ctx_ids, target)
    assert loss.item() == pytest.approx(0.0, abs=1e-15)


def test_alignment_loss_single_context_warns():
    m = tiny_model()
    with pytest.warns(UserWarning):
        loss = encoder.alignment_loss(m, 0, [0], np.zeros((1, 1)))
    assert loss.item() == 0.0


def test_alignment_loss_lower_bound_with_constant_estimates():
    m = tiny_model()
    m.ctx_emb.data[:] = m.ctx_emb.data[0]  # identical rows: all pairs decode equal
    rng = np.random.default_rng(13)
    g = np.abs(rng.normal(size=(3, 3)))
    g = 0.5 * (g + g.T)
    np.fill_diagonal(g, 0.0)
    loss = encoder.alignment_loss(m, 0, [0, 1, 2], g).item()
    assert loss >= np.var(g) - 1e-9
    assert loss == pytest.approx(np.mean(g ** 2), abs=1e-9)


def test_alignment_loss_gradient():
    m = tiny_model()
    target = np.abs(np.random.default_rng(15).normal(size=(3, 3)))
    target = 0.5 * (target + target.T)
    np.fill_diagonal(target, 0.0)
    leaves = [m.ctx_emb, m.user_emb] + m.decoder.parameters()
    assert check_scalar_fn(
        lambda: encoder.alignment_loss(m, 0, [0, 1, 2], target), leaves) < 1e-4


def test_independence_loss_single_prototype_is_zero():
    m = tiny_model(n_prototypes=1)
    assert encoder.independence_loss(m, 0).item() == pytest.approx(0.0, abs=1e-12)


def test_independence_loss_identical_rows_is_maximum():
    m = tiny_model()
    m.proto_emb.data[:] = m.proto_emb.data[0]
    assert encoder.independence_loss(m, 0).item() == pytest.approx(0.0, abs=1e-12)
    m2 = tiny_model(seed=1)
    assert encoder.independence_loss(m2, 0).item() <= 0.0


def test_independence_loss_gradient():
    # decoder weights are frozen inside this loss; embeddings carry the gradient
    m = tiny_model()
    leaves = [m.proto_emb, m.user_emb]
    assert check_scalar_fn(lambda: encoder.independence_loss(m, 0), leaves) < 1e-4


def test_independence_loss_leaves_decoder_alone():
    m = tiny_model()
    from ctxrec import autodiff as ad
    loss = encoder.independence_loss(m, 0)
    ad.backward(loss)
    assert all(w.grad is None for w in m.decoder.parameters())
    assert m.proto_emb.grad is not None


def test_anchor_loss_zero_at_exact_match():
    m = tiny_model()
    reps = encoder.personalized(m, 0, "context", [0, 1])
    emp = encoder.decode(m, reps).data
    assert encoder.anchor_loss(m, 0, [0, 1], emp).item() == pytest.approx(0.0, abs=1e-9)
