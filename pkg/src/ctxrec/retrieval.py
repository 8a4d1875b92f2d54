"""Second stage: assemble the context-matched sub-sequence once per request
(candidate-agnostic) and score candidates over it with target attention."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoder, matcher, tempograph
from .autodiff import Parameter, Tensor
from .model import ContextMatchModel
from .nn import Mlp
from .synthlog import ContextKey, UserView
from .util import rng_for


@dataclass
class SubSequence:
    poi: np.ndarray
    ctx_id: np.ndarray
    ts: np.ndarray
    degraded: bool = False  # True when the recent-window fallback was used

    def __len__(self):
        return len(self.poi)


@dataclass
class GsuCounters:
    """Exact operation counts for the candidate-agnostic retrieval claim."""

    requests: int = 0
    gate_select_calls: int = 0
    gsu_ops: int = 0       # r + |prototypes| + selected length, per request
    scored_candidates: int = 0


def aggregate_user(model: ContextMatchModel, view: UserView,
                   extra_rep: Tensor | None = None):
    """Inference-mode graph aggregation for one user."""
    graph = tempograph.build(model, view.user_id, view.ctx_ids,
                             view.adjacent_pairs, tau=1.0, rng=None,
                             extra_ctx_rep=extra_rep)
    otilde, ctilde = tempograph.aggregate(model, graph)
    return graph, otilde, ctilde


def assign_contexts(model: ContextMatchModel, view: UserView) -> dict:
    """Map each context to its best-similarity prototype (deterministic,
    lowest index wins ties); returns prototype -> set of global context ids."""
    _, otilde, ctilde = aggregate_user(model, view)
    sim = encoder.cross_similarity(model, otilde, ctilde).data
    best = np.argmax(sim, axis=0)
    out: dict[int, set] = {i: set() for i in range(model.cfg.n_prototypes)}
    for local, proto in enumerate(best):
        out[int(proto)].add(int(view.ctx_ids[local]))
    return out


def select_subsequence(view: UserView, gate_mask: np.ndarray, assignments: dict,
                       cap: int = 200, fallback_window: int = 50) -> SubSequence:
    """All history entries whose context belongs to an open prototype's set,
    most recent `cap` kept; falls back to the recent window when empty."""
    allowed: set = set()
    for proto, open_ in enumerate(gate_mask.reshape(-1)):
        if open_ >= 0.5:
            allowed |= assignments.get(int(proto), set())
    mask = np.isin(view.click_ctx, sorted(allowed)) if allowed else \
        np.zeros(len(view.click_ctx), dtype=bool)
    idx = np.flatnonzero(mask)
    degraded = idx.size == 0
    if degraded:
        idx = np.arange(len(view.click_poi))[-fallback_window:]
    if idx.size > cap:
        idx = idx[-cap:]
    return SubSequence(poi=view.click_poi[idx], ctx_id=view.click_ctx[idx],
                       ts=view.click_ts[idx], degraded=degraded)


def hard_context_subsequence(view: UserView, target_ctx: int, cap: int = 200,
                             fallback_window: int = 50) -> SubSequence:
    """Exact-context filtering: the single-prototype configuration."""
    return select_subsequence(view, np.ones(1), {0: {int(target_ctx)}},
                              cap=cap, fallback_window=fallback_window)


def recent_subsequence(view: UserView, window: int) -> SubSequence:
    idx = np.arange(len(view.click_poi))[-window:]
    return SubSequence(poi=view.click_poi[idx], ctx_id=view.click_ctx[idx],
                       ts=view.click_ts[idx])


def full_retriever(model: ContextMatchModel, views: dict, recent_window: int,
                   cap: int):
    """Stage-one retrieval closure: cached aggregation + per-request gating.

    The single-prototype configuration retains only the exact target context,
    which is how that setting is defined for comparison purposes.
    """
    if model.cfg.n_prototypes == 1:
        def retrieve_single(view, target_ctx):
            return hard_context_subsequence(
                view, target_ctx, cap=cap, fallback_window=recent_window)
        return retrieve_single

    cache = build_serve_cache(model, views)
    shorts = {u: matcher.short_term(model, v.click_poi[-recent_window:]).data
              for u, v in views.items()}
    cold: dict = {}

    def retrieve(view, target_ctx):
        entry = cache.users[view.user_id]
        cols = np.flatnonzero(entry.ctx_ids == target_ctx)
        if cols.size:
            sim_vec = entry.sim[:, int(cols[0])]
        else:
            # context known globally but new to this user: attach its trained
            # row to the graph and gate on the fly (the cold-start path)
            key = (view.user_id, int(target_ctx))
            if key not in cold:
                rep = encoder.personalized(model, view.user_id, "context",
                                           [int(target_ctx)])
                _, ot, ct = aggregate_user(model, view, extra_rep=rep)
                cold[key] = encoder.cross_similarity(
                    model, ot, ct).data[:, -1]
            sim_vec = cold[key]
        gates = _gate_from_sim(model, sim_vec, entry.otilde,
                               shorts[view.user_id])
        return select_subsequence(view, gates, entry.assignments,
                                  cap=cap, fallback_window=recent_window)

    return retrieve


# ---------------------------------------------------------------------------
# scoring heads

class PoiFeatures:
    """Attribute-bundle item embeddings: one table per attribute field plus a
    residual per-item table; an item's vector is the concatenation of its
    field-value rows and its id row."""

    def __init__(self, schema, field_dim: int, id_dim: int, seed: int):
        self.schema = schema
        self.attrs = schema.all_poi_attrs()
        rng = rng_for(seed, 35)
        self.field_tables = [Parameter(rng.uniform(0, 1, size=(card, field_dim)))
                             for card in schema.cards]
        self.id_table = Parameter(rng.uniform(0, 1, size=(schema.n_pois, id_dim)))
        self.dim = field_dim * len(schema.cards) + id_dim

    def parameters(self):
        return self.field_tables + [self.id_table]

    def embed(self, poi_ids: np.ndarray) -> Tensor:
        poi_ids = np.asarray(poi_ids, dtype=np.int64).reshape(-1)
        parts = [ad.rows(t, self.attrs[poi_ids, f])
                 for f, t in enumerate(self.field_tables)]
        parts.append(ad.rows(self.id_table, poi_ids))
        return ad.concat_cols(parts)


class AttentionHead:
    """Target attention over a sub-sequence: per-behavior features
    [cand | beh | cand*beh | cand-beh] -> logit, softmax pooling, then a
    CTR logit over [pooled | cand | pooled*cand]."""

    def __init__(self, schema, hidden: int, seed: int,
                 field_dim: int = 4, id_dim: int = 4):
        self.features = PoiFeatures(schema, field_dim, id_dim, seed)
        e = self.features.dim
        self.att = Mlp([4 * e, hidden, 1], rng_for(seed, 31))
        self.out = Mlp([3 * e, hidden, 1], rng_for(seed, 32))

    def parameters(self):
        return self.features.parameters() + self.att.parameters() + self.out.parameters()

    def scores(self, cand_ids: np.ndarray, beh_ids: np.ndarray) -> Tensor:
        """CTR scores in (0,1) for each candidate against one sub-sequence."""
        b, n = len(cand_ids), len(beh_ids)
        if n == 0:
            raise ValueError("scoring needs a non-empty sub-sequence")
        cand = self.features.embed(cand_ids)
        beh = self.features.embed(beh_ids)
        cand_x = ad.repeat_rows(cand, n)
        beh_x = ad.tile_rows(beh, b)
        feats = ad.concat_cols([cand_x, beh_x, ad.mul(cand_x, beh_x),
                                ad.sub(cand_x, beh_x)])
        logits = ad.reshape(self.att.forward(feats), b, n)
        alpha = ad.softmax_rows(logits)
        pooled = ad.matmul(alpha, beh)
        feats_out = ad.concat_cols([pooled, cand, ad.mul(pooled, cand)])
        return ad.sigmoid(self.out.forward(feats_out))


class PoolingHead:
    """No attention: mean-pooled history plus candidate through an MLP."""

    def __init__(self, schema, hidden: int, seed: int,
                 field_dim: int = 4, id_dim: int = 4):
        self.features = PoiFeatures(schema, field_dim, id_dim, seed)
        e = self.features.dim
        self.out = Mlp([3 * e, hidden, 1], rng_for(seed, 34))

    def parameters(self):
        return self.features.parameters() + self.out.parameters()

    def scores(self, cand_ids: np.ndarray, beh_ids: np.ndarray) -> Tensor:
        b, n = len(cand_ids), len(beh_ids)
        if n == 0:
            raise ValueError("scoring needs a non-empty history")
        cand = self.features.embed(cand_ids)
        pooled = ad.tile_rows(ad.scale(
            ad.matmul(ad.constant(np.ones((1, n))), self.features.embed(beh_ids)),
            1.0 / n), b)
        feats = ad.concat_cols([pooled, cand, ad.mul(pooled, cand)])
        return ad.sigmoid(self.out.forward(feats))


def score(head, cand_id: int, subseq: SubSequence) -> float:
    return float(head.scores(np.array([cand_id]), subseq.poi).data[0, 0])


# ---------------------------------------------------------------------------
# ESU training over frozen retrieval

def bce_loss(scores: Tensor, labels: np.ndarray) -> Tensor:
    s = ad.add_scalar(ad.scale(scores, 1.0 - 2e-7), 1e-7)
    y = ad.constant(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    pos = ad.mul(y, ad.log(s))
    neg = ad.mul(ad.add_scalar(ad.neg(y), 1.0),
                 ad.log(ad.add_scalar(ad.neg(s), 1.0)))
    return ad.neg(ad.sum_all(ad.add(pos, neg)))


def request_groups(views: dict, records) -> list:
    """Evaluation/training requests grouped by (user, target context):
    one retrieval serves every candidate in the group."""
    groups = []
    for u in sorted(views):
        sub = records.for_user(u)
        if not len(sub):
            continue
        for c in np.unique(sub.ctx_id):
            m = sub.ctx_id == c
            groups.append((u, int(c), sub.poi[m], sub.click[m].astype(np.float64)))
    return groups


def train_head(head, views: dict, train_records, retriever, seed: int,
               epochs: int = 8, lr: float = 1e-2, groups_per_batch: int = 16,
               samples_per_group: int = 96, behaviors_per_group: int = 64):
    """Fit a scoring head on train samples with a frozen retriever.

    retriever(view, target_ctx) -> SubSequence; evaluated once per
    (user, context) group and reused for all that group's candidates. Large
    groups are subsampled to samples_per_group candidates and
    behaviors_per_group sub-sequence entries, fresh each epoch; softmax
    pooling generalizes to full-length sub-sequences at evaluation.
    """
    groups = request_groups(views, train_records)
    subseqs = {}
    for u, c, _, _ in groups:
        if (u, c) not in subseqs:
            subseqs[(u, c)] = retriever(views[u], c)
    params = head.parameters()
    order_rng = rng_for(seed, 40)
    losses = []
    for _ in range(epochs):
        order = order_rng.permutation(len(groups))
        total, count = 0.0, 0
        for off in range(0, len(order), groups_per_batch):
            chunk = order[off:off + groups_per_batch]
            parts, n_samples = [], 0
            for gi in chunk:
                u, c, cands, labels = groups[gi]
                if len(cands) > samples_per_group:
                    pick = order_rng.choice(len(cands), size=samples_per_group,
                                            replace=False)
                    cands, labels = cands[pick], labels[pick]
                beh = subseqs[(u, c)].poi
                if len(beh) > behaviors_per_group:
                    keep = np.sort(order_rng.choice(len(beh),
                                                    size=behaviors_per_group,
                                                    replace=False))
                    beh = beh[keep]
                parts.append(bce_loss(head.scores(cands, beh), labels))
                n_samples += len(cands)
            loss = ad.scale(parts[0] if len(parts) == 1 else
                            _sum_tensors(parts), 1.0 / n_samples)
            ad.backward(loss)
            ad.adam_step(params, lr=lr)
            ad.zero_grads(params)
            total += loss.item() * n_samples
            count += n_samples
        losses.append(total / max(1, count))
    return losses


def _sum_tensors(parts):
    acc = parts[0]
    for p in parts[1:]:
        acc = ad.add(acc, p)
    return acc


def eval_scores(head, views: dict, records, retriever) -> tuple:
    """Score every record under the frozen retriever; returns (scores, labels)."""
    groups = request_groups(views, records)
    scores, labels = [], []
    for u, c, cands, y in groups:
        sub = retriever(views[u], c)
        s = head.scores(cands, sub.poi).data.reshape(-1)
        scores.append(s)
        labels.append(y)
    return np.concatenate(scores), np.concatenate(labels)


def held_out_logloss(head, views, records, retriever) -> float:
    s, y = eval_scores(head, views, records, retriever)
    s = np.clip(s, 1e-7, 1 - 1e-7)
    return float(-np.mean(y * np.log(s) + (1 - y) * np.log(1 - s)))


# ---------------------------------------------------------------------------
# serving

@dataclass
class UserCacheEntry:
    ctx_ids: np.ndarray
    otilde: np.ndarray
    ctilde: np.ndarray
    sim: np.ndarray          # (prototypes, contexts)
    assignments: dict


@dataclass
class ServeCache:
    users: dict = field(default_factory=dict)

    def save(self, path):
        named = {}
        for u, e in sorted(self.users.items()):
            named[f"u{u}/ctx_ids"] = e.ctx_ids.astype(np.float64).reshape(1, -1)
            named[f"u{u}/otilde"] = e.otilde
            named[f"u{u}/ctilde"] = e.ctilde
            named[f"u{u}/sim"] = e.sim
            named[f"u{u}/assign"] = _assignments_matrix(e)
        ad.save_tensors(path, named)

    @classmethod
    def load(cls, path) -> "ServeCache":
        named = ad.load_tensors(path)
        users = {}
        keys = sorted({k.split("/")[0] for k in named})
        for uk in keys:
            u = int(uk[1:])
            ctx_ids = named[f"{uk}/ctx_ids"].reshape(-1).astype(np.int64)
            assign_m = named[f"{uk}/assign"]
            assignments = {i: set(np.flatnonzero(assign_m[i]).tolist())
                           for i in range(assign_m.shape[0])}
            assignments = {p: {int(ctx_ids[j]) for j in js} for p, js in assignments.items()}
            users[u] = UserCacheEntry(ctx_ids=ctx_ids, otilde=named[f"{uk}/otilde"],
                                      ctilde=named[f"{uk}/ctilde"],
                                      sim=named[f"{uk}/sim"], assignments=assignments)
        return cls(users=users)


def _assignments_matrix(e: UserCacheEntry) -> np.ndarray:
    m = np.zeros((e.sim.shape[0], len(e.ctx_ids)))
    pos = {int(c): j for j, c in enumerate(e.ctx_ids)}
    for p, ctxs in e.assignments.items():
        for c in ctxs:
            m[p, pos[c]] = 1.0
    return m


def build_serve_cache(model: ContextMatchModel, views: dict) -> ServeCache:
    """Precompute aggregated rows and prototype-context similarities offline."""
    cache = ServeCache()
    for u, view in sorted(views.items()):
        _, otilde, ctilde = aggregate_user(model, view)
        sim = encoder.cross_similarity(model, otilde, ctilde).data
        best = np.argmax(sim, axis=0)
        assignments: dict[int, set] = {i: set() for i in range(model.cfg.n_prototypes)}
        for local, proto in enumerate(best):
            assignments[int(proto)].add(int(view.ctx_ids[local]))
        cache.users[u] = UserCacheEntry(
            ctx_ids=view.ctx_ids.copy(), otilde=otilde.data.copy(),
            ctilde=ctilde.data.copy(), sim=sim.copy(), assignments=assignments)
    return cache


def _gate_from_sim(model, sim_vec: np.ndarray, otilde: np.ndarray,
                   l: np.ndarray) -> np.ndarray:
    """Inference gate: threshold on smooth-clamped sim * sigmoid(o . l),
    argmax fallback. Identical arithmetic for cached and recomputed inputs."""
    sim_t = ad.constant(sim_vec.reshape(-1, 1))
    drive = ad.sigmoid(ad.constant(otilde @ l.reshape(-1, 1)))
    beta = ad.smooth_clamp(ad.mul(sim_t, drive)).data
    gates = (beta > 0.5).astype(np.float64)
    if not gates.any():
        gates[int(np.argmax(beta)), 0] = 1.0
    return gates.reshape(-1)


def serve(model: ContextMatchModel, head, view: UserView, ctx_key: ContextKey,
          candidates, cache: ServeCache | None = None,
          counters: GsuCounters | None = None, subseq_cap: int = 200,
          recent_window: int = 50, force_cold: bool = False) -> list:
    """Rank candidates for one request.

    Seen target contexts use the precomputed similarity cache when given;
    unknown contexts take the cold-start path: a fresh context row (mean of
    the user's known rows), attached to the graph and gated on the fly. The
    sub-sequence is selected exactly once and reused for all candidates.
    """
    if candidates is None or len(candidates) == 0:
        return []
    candidates = np.asarray(candidates, dtype=np.int64)
    global_id = model.ctx_index.get(ctx_key)
    seen = (global_id is not None and global_id in set(view.ctx_ids.tolist())
            and not force_cold)

    l = matcher.short_term(model, view.click_poi[-recent_window:]).data

    if seen and cache is not None and view.user_id in cache.users:
        entry = cache.users[view.user_id]
        col = int(np.flatnonzero(entry.ctx_ids == global_id)[0])
        otilde, sim_vec = entry.otilde, entry.sim[:, col]
        assignments = entry.assignments
    elif seen:
        _, ot_t, ct_t = aggregate_user(model, view)
        otilde = ot_t.data
        sim = encoder.cross_similarity(model, ot_t, ct_t).data
        col = int(np.flatnonzero(view.ctx_ids == global_id)[0])
        sim_vec = sim[:, col]
        best = np.argmax(sim, axis=0)
        assignments = {i: set() for i in range(model.cfg.n_prototypes)}
        for local, proto in enumerate(best):
            assignments[int(proto)].add(int(view.ctx_ids[local]))
    else:
        # cold start: a globally known context uses its trained row; a truly
        # novel one starts from the mean of the user's known context rows
        if global_id is not None:
            known = model.ctx_emb.data[global_id:global_id + 1]
        else:
            known = ad.rows(model.ctx_emb, view.ctx_ids).data.mean(axis=0,
                                                                   keepdims=True)
        rep = ad.add(ad.constant(known), ad.rows(model.user_emb, [view.user_id]))
        _, otilde_t, ctilde_t = aggregate_user(model, view, extra_rep=rep)
        otilde = otilde_t.data
        sim_all = encoder.cross_similarity(model, otilde_t, ctilde_t).data
        sim_vec = sim_all[:, -1]
        best = np.argmax(sim_all[:, :-1], axis=0) if len(view.ctx_ids) else []
        assignments = {i: set() for i in range(model.cfg.n_prototypes)}
        for local, proto in enumerate(best):
            assignments[int(proto)].add(int(view.ctx_ids[local]))

    gates = _gate_from_sim(model, sim_vec, otilde, l)
    subseq = select_subsequence(view, gates, assignments, cap=subseq_cap,
                                fallback_window=recent_window)
    if counters is not None:
        counters.requests += 1
        counters.gate_select_calls += 1
        counters.gsu_ops += recent_window + model.cfg.n_prototypes + len(subseq)
        counters.scored_candidates += len(candidates)

    s = head.scores(candidates, subseq.poi).data.reshape(-1)
    order = np.argsort(-s, kind="stable")
    return [(int(candidates[i]), float(s[i])) for i in order]
