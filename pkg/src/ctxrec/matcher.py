"""Stage one: short-term preference encoding, target-context prototype gating,
and the end-to-end training loop over the combined loss."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import empdist, encoder, tempograph
from .autodiff import Tensor
from .config import TrainConfig
from .model import ContextMatchModel, ModelConfig
from .synthlog import RecordSet, build_user_views
from .util import rng_for

SCORE_FLOOR = 1e-7


def short_term(model: ContextMatchModel, poi_ids) -> Tensor:
    """Final GRU state over the given recent PoI ids; zero vector if empty."""
    ids = np.asarray(poi_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        warnings.warn("empty behavior window: short-term state is zero")
        return ad.constant(np.zeros((1, model.cfg.dim)))
    return model.gru.run(ad.rows(model.poi_emb, ids))


def gate_inputs(model: ContextMatchModel, otilde: Tensor, ctilde_targets: Tensor,
                l: Tensor, squash: bool = True,
                frozen_decoder: bool = False) -> Tensor:
    """Gate probabilities beta, shape (prototypes, targets).

    beta_i = sim(o_i, c_t) * sigmoid(o_i . l), squashed into (0, 1) for the
    Gumbel gate. squash=False keeps the raw inner product (numerically
    fragile; the smooth clamp still bounds the result).
    """
    sim = encoder.cross_similarity(model, otilde, ctilde_targets,
                                   frozen_decoder=frozen_decoder)
    drive = ad.matmul(otilde, ad.transpose(l))
    if squash:
        drive = ad.sigmoid(drive)
    return ad.smooth_clamp(ad.mul(sim, drive))


def gate_targets(model: ContextMatchModel, otilde: Tensor, ctilde_t: Tensor,
                 l: Tensor, tau: float, rng: np.random.Generator | None):
    """Gate vector for one target context.

    Training (rng given): straight-through Gumbel samples. Inference: the
    deterministic threshold, with the best-probability prototype forced open
    if everything gated shut.
    """
    beta = gate_inputs(model, otilde, ctilde_t, l)
    gate = ad.gumbel_binary_gate(beta, tau, hard=True, rng=rng)
    if rng is None and not np.any(gate.data > 0.5):
        forced = np.zeros_like(gate.data)
        forced[int(np.argmax(beta.data)), 0] = 1.0
        gate = ad.constant(forced)
    return gate, beta


def _bce_matrix(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Elementwise binary cross entropy; scores affinely clamped into
    (SCORE_FLOOR, 1 - SCORE_FLOOR) so the gradient never dies at the rails."""
    s = ad.add_scalar(ad.scale(scores, 1.0 - 2 * SCORE_FLOOR), SCORE_FLOOR)
    y = ad.constant(labels)
    pos = ad.mul(y, ad.log(s))
    negp = ad.mul(ad.add_scalar(ad.neg(y), 1.0), ad.log(ad.add_scalar(ad.neg(s), 1.0)))
    return ad.neg(ad.add(pos, negp))


def rec_loss(model: ContextMatchModel, otilde: Tensor, gates: Tensor,
             target_cols: np.ndarray, cand_ids: np.ndarray,
             labels: np.ndarray, mode: str = "gated") -> Tensor:
    """Gated cross entropy over a batch, per prototype and sample.

    "gated" (training default): per sample, the gate-weighted mean cross
    entropy of sigmoid(o_i . v) over the selected prototypes. The mean makes
    the straight-through gate gradient two-sided: opening a prototype that
    beats the current ensemble lowers the loss, opening a worse one raises
    it. (A plain sum gives d loss / d gate = bce >= 0, which closes every
    gate.) "all": every prototype contributes the cross entropy of
    gate * sigmoid(o_i . v); closed gates then pin scores to the clamp floor,
    which swamps the objective with a reward for opening every gate - kept
    for comparison, not used by the trainer.
    """
    cands = ad.rows(model.poi_emb, cand_ids)
    affinity = ad.sigmoid(ad.matmul(otilde, ad.transpose(cands)))  # (O, B)
    gate_cols = _gather_cols(gates, target_cols)                   # (O, B)
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64).reshape(1, -1),
                        (affinity.data.shape))
    if mode == "gated":
        weighted = ad.mul(gate_cols, _bce_matrix(affinity, y))
        ones = ad.constant(np.ones((1, gate_cols.data.shape[0])))
        col_tot = ad.matmul(ones, weighted)                        # (1, B)
        col_norm = ad.matmul(ones, gate_cols)
        per_sample = ad.div(col_tot, ad.add_scalar(col_norm, 1e-12))
        return ad.scale(ad.sum_all(per_sample), 1.0 / len(cand_ids))
    if mode == "all":
        per = _bce_matrix(ad.mul(gate_cols, affinity), y)
        return ad.scale(ad.sum_all(per), 1.0 / len(cand_ids))
    raise ValueError(f"unknown rec_loss mode {mode!r}")


def _gather_cols(t: Tensor, cols: np.ndarray) -> Tensor:
    return ad.transpose(ad.rows(ad.transpose(t), cols))


@dataclass
class EpochStats:
    epoch: int
    rec: float
    mse: float
    ind: float
    total: float
    tau: float


def _empirical_anchors(train_records: RecordSet, views: dict,
                       pool_blend: int = 100) -> dict:
    """Per user: (context ids with click support, their anchor distributions).

    The anchor blends the user's own per-context estimate with the
    cross-user estimate for the same context, weighted s/(s + pool_blend) by
    the user's support s. Low-support estimates carry sampling noise that
    makes every downstream similarity wobble; the cross-user estimate
    denoises them and fades out as per-user support grows.
    """
    schema = train_records.schema
    pool = empdist.pooled_distribution(train_records, schema)
    clicks = train_records.clicks_only()
    ctx_pooled = {}
    for c in np.unique(clicks.ctx_id):
        mask = clicks.ctx_id == c
        vecs = []
        for f, card in enumerate(schema.cards):
            counts = np.bincount(clicks.attrs[mask, f], minlength=card).astype(float)
            vecs.append((counts + empdist.DEFAULT_ALPHA)
                        / (counts.sum() + empdist.DEFAULT_ALPHA * card))
        ctx_pooled[int(c)] = np.concatenate(vecs)

    anchors = {}
    for u, view in views.items():
        dists = empdist.estimate(train_records.for_user(u), schema, pool=pool)
        known, rows = [], []
        for g in view.ctx_ids:
            key = train_records.contexts[g]
            if key not in dists:
                continue
            own = dists[key]
            w = own.support_count / (own.support_count + pool_blend)
            rows.append(w * own.flat() + (1 - w) * ctx_pooled[int(g)])
            known.append(g)
        anchors[u] = (np.array(known), np.stack(rows) if rows else None)
    return anchors


def divergence_targets(train_records: RecordSet, views: dict, cache_dir=None) -> dict:
    """Per user, the log-data divergence matrix indexed in view context order."""
    schema = train_records.schema
    matrices = empdist.user_divergences(train_records, schema, cache_dir=cache_dir)
    out = {}
    for u, view in views.items():
        if u not in matrices:
            continue
        dm = matrices[u]
        pos = {c: i for i, c in enumerate(dm.contexts)}
        keys = [train_records.contexts[g] for g in view.ctx_ids]
        if any(k not in pos for k in keys):  # context with no clicked support
            idx = [pos[k] for k in keys if k in pos]
            known = np.array([view.ctx_ids[i] for i, k in enumerate(keys) if k in pos])
            sub = dm.values[np.ix_(idx, idx)]
            out[u] = (known, sub)
        else:
            idx = [pos[k] for k in keys]
            out[u] = (view.ctx_ids.copy(), dm.values[np.ix_(idx, idx)])
    return out


def _model_config(cfg: TrainConfig) -> ModelConfig:
    return ModelConfig(dim=cfg.dim, n_prototypes=cfg.n_prototypes,
                       gat_layers=cfg.gat_layers, sim_mode=cfg.sim_mode,
                       use_gta=cfg.use_gta)


def _flat_sym_kl(schema, p: np.ndarray, q: np.ndarray) -> float:
    total = 0.0
    for a, b in schema.field_slices():
        total += float(np.sum(p[a:b] * (np.log(p[a:b]) - np.log(q[a:b]))))
        total += float(np.sum(q[a:b] * (np.log(q[a:b]) - np.log(p[a:b]))))
    return 0.5 * total / len(schema.cards)


def _seed_prototypes(model: ContextMatchModel, views: dict, anchors: dict,
                     rng: np.random.Generator):
    """Centroid seeding by leader clustering of the log-data distributions.

    Contexts whose observed attribute distributions sit within the gate's own
    "same preference" radius (divergence < 0.5) are grouped greedily,
    best-supported first; each cluster seeds one prototype at the member mean
    in embedding space. Surplus prototypes are pushed demonstrably outside
    every context's similarity radius. Without this step, random prototypes
    never beat each other by more than a cluster diameter, so same-cluster
    contexts straddle argmax boundaries and scatter across near-equivalent
    prototypes.
    """
    n_ctx = model.ctx_emb.data.shape[0]
    emp_sum: dict[int, np.ndarray] = {}
    emp_n: dict[int, int] = {}
    for u, (known, emp) in anchors.items():
        if emp is None:
            continue
        for row, c in enumerate(known):
            c = int(c)
            emp_sum[c] = emp_sum.get(c, 0.0) + emp[row]
            emp_n[c] = emp_n.get(c, 0) + 1
    supported = sorted(emp_sum, key=lambda c: (-emp_n[c], c))
    emp_mean = {c: emp_sum[c] / emp_n[c] for c in supported}

    leaders: list[list[int]] = []
    for c in supported:
        for members in leaders:
            if _flat_sym_kl(model.schema, emp_mean[members[0]], emp_mean[c]) < 0.5:
                members.append(c)
                break
        else:
            leaders.append([c])
    leaders.sort(key=len, reverse=True)
    o = model.cfg.n_prototypes
    for i, members in enumerate(leaders[:o]):
        model.proto_emb.data[i] = (
            model.ctx_emb.data[members].mean(axis=0)
            + 0.01 * rng.standard_normal(model.cfg.dim))

    mean_user = model.user_emb.data.mean(axis=0, keepdims=True)
    emp_matrix = np.stack([emp_mean[c] for c in supported]) if supported else None

    def max_sim_to_contexts(row):
        if emp_matrix is None:
            return -1.0
        probs = encoder.decode(model, ad.constant(row.reshape(1, -1) + mean_user)).data
        stack = ad.constant(np.vstack([probs, emp_matrix]))
        d = encoder.pairwise_divergence(model, stack).data
        return 1.0 - d[0, 1:].min()

    # surplus prototypes start demonstrably outside every context's
    # similarity radius; otherwise they crowd the argmax and gates with noise
    ctx_mean = model.ctx_emb.data.mean(axis=0)
    for i in range(len(leaders), o):
        delta = rng.standard_normal(model.cfg.dim)
        row = ctx_mean + delta
        for _ in range(12):
            if max_sim_to_contexts(row) < -0.5:
                break
            delta *= 2.0
            row = ctx_mean + delta
        model.proto_emb.data[i] = row


def _alignment_epoch(model, views, targets, lr: float, ind_weight: float,
                     order_rng, use_mse: bool = True, use_ind: bool = True,
                     anchors: dict | None = None, anchor_weight: float = 0.0) -> float:
    params = model.parameters()
    total = 0.0
    for u in order_rng.permutation(sorted(views.keys())):
        u = int(u)
        parts = []
        if use_mse and u in targets:
            ctx_known, gt = targets[u]
            parts.append(encoder.alignment_loss(model, u, ctx_known, gt))
        if use_ind:
            parts.append(ad.scale(encoder.independence_loss(model, u), ind_weight))
        if anchors and anchors.get(u, (None, None))[1] is not None:
            known, emp = anchors[u]
            parts.append(ad.scale(encoder.anchor_loss(model, u, known, emp),
                                  anchor_weight))
        if not parts:
            continue
        loss = parts[0]
        for p in parts[1:]:
            loss = ad.add(loss, p)
        ad.backward(loss)
        ad.adam_step(params, lr=lr)
        ad.zero_grads(params)
        total += loss.item()
    return total / max(1, len(views))


def train(train_records: RecordSet, cfg: TrainConfig, seed: int,
          log_epoch=None) -> tuple:
    """Full pipeline training.

    An alignment-only warm-up first shapes the encoder (the similarity is
    meaningless before the divergence alignment has moved; without it every
    gate opens and aggregation homogenizes the graph). The main epochs then
    run the complete per-user loop: rebuild the gated graph, aggregate, gate
    against each batch target, and step on
    rec + gamma * alignment + lambda * independence."""
    views = build_user_views(train_records)
    targets = divergence_targets(train_records, views)
    model = ContextMatchModel(
        train_records.schema, train_records.contexts,
        n_users=int(train_records.user.max()) + 1,
        n_pois=train_records.schema.n_pois,
        cfg=_model_config(cfg), seed=seed)
    params = model.parameters()
    order_rng = rng_for(seed, 20)
    history: list[EpochStats] = []
    anchors = _empirical_anchors(train_records, views)

    if cfg.use_mse:
        # Encoder warm-up before the combined loss. Pinning decodes to the
        # log-data distributions directly is what makes them consistent across
        # users: pairwise divergences alone leave every user's decodes free up
        # to a relabeling of attribute values. The pairwise term would also
        # fight this regressor early on, so it waits for the main phase; the
        # independence term would get thousands of unopposed steps and blow
        # prototypes off the data manifold, so it waits too.
        warm_anchors = anchors if cfg.anchor_weight > 0 else None
        for _ in range(cfg.warmup_epochs):
            _alignment_epoch(model, views, targets, cfg.lr, 0.0, order_rng,
                             use_mse=warm_anchors is None, use_ind=False,
                             anchors=warm_anchors,
                             anchor_weight=cfg.anchor_weight)
    _seed_prototypes(model, views, anchors, rng_for(seed, 23))

    fast = model.gru.parameters() + [model.poi_emb, model.user_emb]
    fast_ids = {id(p) for p in fast}
    slow = [p for p in params if id(p) not in fast_ids]

    user_ids = sorted(views.keys())
    for epoch in range(cfg.epochs):
        tau = max(cfg.tau_floor, cfg.tau * cfg.tau_anneal ** epoch)
        gate_rng = rng_for(seed, 21, epoch)
        sums = np.zeros(3)
        n_batches = 0
        for u in order_rng.permutation(user_ids):
            view = views[int(u)]
            n = len(view.sample_poi)
            take = min(cfg.samples_per_user, n)
            sel = order_rng.choice(n, size=take, replace=False) if take < n else np.arange(n)
            sel.sort()
            for off in range(0, take, cfg.batch_size):
                batch = sel[off:off + cfg.batch_size]
                loss_parts = _step(model, cfg, view, targets.get(int(u)),
                                   batch, tau, gate_rng)
                ad.backward(loss_parts[0])
                # gate calibration (GRU, item and user tables) trains at full
                # rate; the geometry carriers shaped by the warm-up move slowly
                ad.adam_step(fast, lr=cfg.main_lr)
                ad.adam_step(slow, lr=cfg.main_lr * cfg.slow_factor)
                ad.zero_grads(params)
                vals = [p.item() for p in loss_parts]
                if not np.isfinite(vals[0]):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, user {u}: {vals}")
                sums += vals[1:]
                n_batches += 1
        stats = EpochStats(epoch, *(sums / max(1, n_batches)),
                           total=float(sums.sum() / max(1, n_batches)), tau=tau)
        history.append(stats)
        if log_epoch:
            log_epoch(stats)
    return model, history


def _step(model, cfg: TrainConfig, view, target, batch_idx, tau, rng):
    # the decoder is trained by the alignment term alone; the rec objective
    # learns embeddings, graph weights and the GRU inside that fixed geometry
    graph = tempograph.build(model, view.user_id, view.ctx_ids,
                             view.adjacent_pairs, tau, rng=rng, gate_mode="hard",
                             frozen_decoder=True)
    otilde, ctilde = tempograph.aggregate(model, graph, frozen_decoder=True)
    l = short_term(model, view.click_poi[-cfg.recent_window:])

    batch_ctx = view.sample_ctx[batch_idx]
    local = {int(g): i for i, g in enumerate(view.ctx_ids)}
    distinct = sorted({int(c) for c in batch_ctx})
    col_of = {c: k for k, c in enumerate(distinct)}
    ctilde_targets = ad.transpose(_gather_cols(ad.transpose(ctilde),
                                               np.array([local[c] for c in distinct])))
    beta = gate_inputs(model, otilde, ctilde_targets, l, frozen_decoder=True)
    gates = ad.gumbel_binary_gate(beta, tau, hard=True, rng=rng)
    dead = ~np.any(gates.data > 0.5, axis=0)
    if dead.any():
        # the >=1-prototype guarantee also holds in training; otherwise
        # closing every gate silences the loss entirely
        force = np.zeros_like(gates.data)
        force[np.argmax(beta.data, axis=0)[dead], np.flatnonzero(dead)] = 1.0
        gates = ad.add(gates, ad.constant(force))

    cols = np.array([col_of[int(c)] for c in batch_ctx])
    rec = rec_loss(model, otilde, gates, cols, view.sample_poi[batch_idx],
                   view.sample_label[batch_idx])

    mse = ad.constant(0.0)
    if cfg.use_mse and target is not None:
        ctx_known, gt = target
        mse = encoder.alignment_loss(model, view.user_id, ctx_known, gt)
    ind = ad.constant(0.0)
    if cfg.use_ind:
        ind = encoder.independence_loss(model, view.user_id)
    total = ad.add(rec, ad.add(ad.scale(mse, cfg.gamma), ad.scale(ind, cfg.lam)))
    return total, rec, mse, ind


def train_alignment(train_records: RecordSet, cfg: TrainConfig, seed: int,
                    epochs: int | None = None, anchor_weight: float = 0.0,
                    use_ind: bool = True) -> tuple:
    """Alignment-dominant training: only the encoder-side losses, no graph.

    anchor_weight > 0 additionally pins decoded distributions to the log-data
    estimates (resolves the value-relabeling ambiguity of pure divergence
    matching; see encoder.anchor_loss).
    """
    views = build_user_views(train_records)
    targets = divergence_targets(train_records, views)
    model = ContextMatchModel(
        train_records.schema, train_records.contexts,
        n_users=int(train_records.user.max()) + 1,
        n_pois=train_records.schema.n_pois,
        cfg=_model_config(cfg), seed=seed)
    order_rng = rng_for(seed, 22)

    anchors = _empirical_anchors(train_records, views) if anchor_weight > 0 else {}

    history = []
    for _ in range(epochs if epochs is not None else cfg.epochs):
        history.append(_alignment_epoch(
            model, views, targets, cfg.lr, cfg.lam / cfg.gamma, order_rng,
            use_ind=use_ind, anchors=anchors, anchor_weight=anchor_weight))
    return model, history
