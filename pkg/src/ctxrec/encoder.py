"""Probability encoder: personalized representations, decoded attribute
distributions, learned divergence/similarity, and the encoder-side losses."""
from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ContextMatchModel


def personalized(model: ContextMatchModel, user_id: int, kind: str, indices) -> Tensor:
    """Rows of the global table plus the user's embedding row.

    kind "context": u + c_hat_i; kind "prototype": o_hat_i + u. Differentiable
    into both tables.
    """
    if kind == "context":
        table = model.ctx_emb
    elif kind == "prototype":
        table = model.proto_emb
    else:
        raise ValueError(f"unknown personalization kind {kind!r}")
    if not 0 <= user_id < model.n_users:
        raise ValueError(f"unknown user id {user_id}")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError(f"unknown {kind} index for table of {table.data.shape[0]} rows")
    return ad.add(ad.rows(table, idx), ad.rows(model.user_emb, [user_id]))


def all_prototypes(model: ContextMatchModel, user_id: int) -> Tensor:
    return personalized(model, user_id, "prototype", np.arange(model.cfg.n_prototypes))


def decode(model: ContextMatchModel, reps: Tensor, frozen_decoder: bool = False) -> Tensor:
    """Map representations (N, d) to attribute distributions (N, total_dim).

    Sigmoid MLP output, then each field block is normalized to a probability
    vector with a small additive floor so downstream logs stay finite. The
    raw_decode ablation skips normalization and returns bare sigmoids.
    """
    out = model.decoder.forward(reps, frozen=frozen_decoder)
    if model.cfg.raw_decode:
        return out
    floor = model.cfg.norm_floor
    blocks = []
    for start, stop in model.schema.field_slices():
        block = ad.add_scalar(ad.slice_cols(out, start, stop), floor)
        blocks.append(ad.div(block, ad.row_sum(block)))
    return ad.concat_cols(blocks)


def pairwise_divergence(model: ContextMatchModel, probs: Tensor) -> Tensor:
    """All-pairs symmetrized KL between decoded rows, mean over fields.

    Entry (i, j) = 0.5 * (KL_i_j + KL_j_i) where each directed KL is the mean
    over attribute fields of sum_v p_i(v) ln(p_i(v)/p_j(v)).
    """
    slices = model.schema.field_slices()
    directed = None
    for start, stop in slices:
        p = ad.slice_cols(probs, start, stop)
        logp = ad.log(p)
        ent = ad.row_sum(ad.mul(p, logp))             # (N, 1): sum_v p ln p
        cross = ad.matmul(p, ad.transpose(logp))      # (N, N): sum_v p_i ln p_j
        k = ad.sub(ent, cross)
        directed = k if directed is None else ad.add(directed, k)
    directed = ad.scale(directed, 1.0 / len(slices))
    return ad.scale(ad.add(directed, ad.transpose(directed)), 0.5)


def estimated_divergence(model: ContextMatchModel, rep_i: Tensor, rep_j: Tensor) -> Tensor:
    """Differentiable symmetrized KL between two decoded representations."""
    probs = decode(model, ad.concat_rows([rep_i, rep_j]))
    full = pairwise_divergence(model, probs)
    return ad.slice_cols(ad.slice_rows(full, 0, 1), 1, 2)


def similarity_matrix(model: ContextMatchModel, reps: Tensor,
                      frozen_decoder: bool = False) -> Tensor:
    """Pairwise similarity between representations, per the configured mode."""
    if model.cfg.sim_mode == "ip":
        return ad.matmul(reps, ad.transpose(reps))
    probs = decode(model, reps, frozen_decoder=frozen_decoder)
    return ad.add_scalar(ad.neg(pairwise_divergence(model, probs)), 1.0)


def similarity(model: ContextMatchModel, rep_i: Tensor, rep_j: Tensor) -> Tensor:
    if model.cfg.sim_mode == "ip":
        return ad.dot(rep_i, rep_j)
    return ad.add_scalar(ad.neg(estimated_divergence(model, rep_i, rep_j)), 1.0)


def cross_similarity(model: ContextMatchModel, reps_a: Tensor, reps_b: Tensor,
                     frozen_decoder: bool = False) -> Tensor:
    """Similarity block between two representation sets: (len a, len b)."""
    if model.cfg.sim_mode == "ip":
        return ad.matmul(reps_a, ad.transpose(reps_b))
    na = reps_a.data.shape[0]
    probs = decode(model, ad.concat_rows([reps_a, reps_b]),
                   frozen_decoder=frozen_decoder)
    full = pairwise_divergence(model, probs)
    block = ad.slice_cols(ad.slice_rows(full, 0, na), na, na + reps_b.data.shape[0])
    return ad.add_scalar(ad.neg(block), 1.0)


def alignment_loss(model: ContextMatchModel, user_id: int, ctx_ids,
                   target: np.ndarray) -> Tensor:
    """Mean squared gap between estimated and log-data divergences, all ordered
    pairs including the zero diagonal."""
    ctx_ids = np.asarray(ctx_ids).reshape(-1)
    if ctx_ids.size < 2:
        warnings.warn(f"user {user_id}: alignment loss over a single context is zero")
        return ad.constant(0.0)
    reps = personalized(model, user_id, "context", ctx_ids)
    est = pairwise_divergence(model, decode(model, reps))
    return ad.mean_all(ad.square(ad.sub(est, ad.constant(target))))


def independence_loss(model: ContextMatchModel, user_id: int) -> Tensor:
    """Negative mean pairwise divergence over the user's personalized prototypes;
    minimizing it spreads prototypes apart.

    The decoder is held frozen here: this term owns the prototype embeddings
    only. Letting it reshape the shared decoder hands an unbounded objective
    the keys to the alignment geometry, which it will happily destroy.
    """
    reps = all_prototypes(model, user_id)
    est = pairwise_divergence(model, decode(model, reps, frozen_decoder=True))
    return ad.neg(ad.mean_all(est))


def anchor_loss(model: ContextMatchModel, user_id: int, ctx_ids,
                empirical: np.ndarray) -> Tensor:
    """Cross-entropy pull of decoded distributions toward the log-data ones.

    Pairwise divergences identify distributions only up to a relabeling of
    attribute values; this small anchor pins the labeling so decoded outputs
    are directly comparable to log-data estimates.
    """
    reps = personalized(model, user_id, "context", np.asarray(ctx_ids).reshape(-1))
    probs = decode(model, reps)
    emp = np.asarray(empirical)
    ce = ad.neg(ad.mean_all(ad.mul(ad.constant(emp), ad.log(probs))))
    const = float(np.mean(emp * np.log(np.maximum(emp, 1e-300))))
    return ad.add_scalar(ce, const)  # KL(emp || decoded), up to field averaging
