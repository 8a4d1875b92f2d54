"""Metrics, baseline/ablation/sweep comparison cells, similarity heatmaps,
and the retrieval-complexity benchmark. All comparisons share the dataset,
split, seeds and metric code; report fingerprints expose any drift."""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import encoder, matcher, retrieval
from .config import TrainConfig
from .model import ContextMatchModel
from .synthlog import GeneratorConfig, build_user_views, generate, split
from .util import fingerprint, rng_for

# Production-scale reference results from the source system; far beyond desk
# scale, emitted as documentation rows only - never asserted against.
REPORTED_CTR_AUC = {
    "avg-pooling": 0.6993, "din": 0.7052, "dien": 0.7069, "mimn": 0.7083,
    "sim-hard": 0.7097, "sim-soft": 0.7116, "sdim": 0.7123, "twin": 0.7133,
    "full": 0.7188,
}
REPORTED_CTCVR_AUC = {
    "avg-pooling": 0.7204, "din": 0.7263, "dien": 0.7281, "mimn": 0.7287,
    "sim-hard": 0.7300, "sim-soft": 0.7321, "sdim": 0.7325, "twin": 0.7336,
    "full": 0.7382,
}
REPORTED_ABLATION_CTR_AUC = {
    "ip": 0.7146, "no-mse": 0.7128, "no-ind": 0.7149, "no-gta": 0.7141,
    "full": 0.7188,
}

BASELINES = ("avg-pooling", "recent-attn", "hard-context")
ABLATIONS = ("ip", "no-mse", "no-ind", "no-gta")


# ---------------------------------------------------------------------------
# metrics

def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Rank-based AUC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = _midranks(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def spearman(x, y) -> float:
    rx, ry = _midranks(np.asarray(x)), _midranks(np.asarray(y))
    return float(np.corrcoef(rx, ry)[0, 1])


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected partition agreement."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if len(a) != len(b):
        raise ValueError("partitions must label the same items")
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    cont = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(cont, (ia, ib), 1)

    def comb2(v):
        return v * (v - 1) / 2.0

    index = comb2(cont).sum()
    sum_a = comb2(cont.sum(axis=1)).sum()
    sum_b = comb2(cont.sum(axis=0)).sum()
    total = comb2(len(a))
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0 if index == expected else 0.0
    return float((index - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# evaluation cells

@dataclass
class EvalRow:
    name: str
    variant: str
    seed: int
    auc: float
    n_samples: int
    fingerprint: str
    runtime: float = 0.0  # console-only; kept out of deterministic CSV output

    def csv_fields(self):
        return (self.name, self.variant, str(self.seed), repr(self.auc),
                str(self.n_samples), self.fingerprint)


@dataclass
class CellSpec:
    variant: str              # "full", ablation name, "proto-N", or a baseline
    gen: GeneratorConfig
    train: TrainConfig
    gen_seed: int
    seed: int

    def key(self):
        return (self.variant, self.seed)

    def fingerprint(self) -> str:
        from dataclasses import asdict
        return fingerprint({"variant": self.variant, "gen": asdict(self.gen),
                            "train": asdict(self.train),
                            "gen_seed": self.gen_seed, "seed": self.seed})


def _baseline_retriever(name: str, train_cfg: TrainConfig):
    if name == "hard-context":
        def retrieve(view, target_ctx):
            return retrieval.hard_context_subsequence(
                view, target_ctx, cap=train_cfg.subseq_cap,
                fallback_window=train_cfg.recent_window)
    elif name == "recent-attn":
        def retrieve(view, target_ctx):
            return retrieval.recent_subsequence(view, train_cfg.recent_window)
    elif name == "avg-pooling":
        def retrieve(view, target_ctx):
            return retrieval.recent_subsequence(view, len(view.click_poi))
    else:
        raise ValueError(f"unknown baseline {name!r}")
    return retrieve


def run_cell(spec: CellSpec) -> EvalRow:
    """Train one variant end-to-end and score the shared temporal test split."""
    t0 = time.perf_counter()
    records, _ = generate(spec.gen, spec.gen_seed)
    train_recs, test_recs = split(records, spec.train.holdout)
    views = build_user_views(train_recs)

    variant = spec.variant
    train_cfg = spec.train
    if variant.startswith("proto-"):
        train_cfg = replace(train_cfg, n_prototypes=int(variant.split("-", 1)[1]))
        variant_kind = "full"
    elif variant in BASELINES:
        variant_kind = "baseline"
    else:
        train_cfg = train_cfg.apply_ablation(variant)
        variant_kind = "full"

    schema = train_recs.schema
    if variant_kind == "baseline":
        retriever = _baseline_retriever(variant, train_cfg)
        if variant == "avg-pooling":
            head = retrieval.PoolingHead(schema, train_cfg.esu_hidden, spec.seed)
        else:
            head = retrieval.AttentionHead(schema, train_cfg.esu_hidden, spec.seed)
    else:
        model, _ = matcher.train(train_recs, train_cfg, spec.seed)
        retriever = retrieval.full_retriever(model, views,
                                             train_cfg.recent_window,
                                             train_cfg.subseq_cap)
        head = retrieval.AttentionHead(schema, train_cfg.esu_hidden, spec.seed)

    retrieval.train_head(head, views, train_recs, retriever, seed=spec.seed,
                         epochs=train_cfg.esu_epochs, lr=train_cfg.esu_lr,
                         groups_per_batch=train_cfg.esu_batch_groups)
    scores, labels = retrieval.eval_scores(head, views, test_recs, retriever)
    return EvalRow(name=spec.variant, variant=spec.variant, seed=spec.seed,
                   auc=auc(scores, labels), n_samples=len(labels),
                   fingerprint=spec.fingerprint(),
                   runtime=time.perf_counter() - t0)


def run_cells(specs: list, workers: int = 1) -> list:
    """Evaluate independent cells, optionally in parallel; deterministic order."""
    if workers <= 1 or len(specs) <= 1:
        rows = [run_cell(s) for s in specs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, specs))
    return sorted(rows, key=lambda r: (r.variant, r.seed))


def seeded_specs(variants, gen: GeneratorConfig, train: TrainConfig,
                 gen_seed: int, seeds) -> list:
    return [CellSpec(variant=v, gen=gen, train=train, gen_seed=gen_seed, seed=s)
            for v in variants for s in seeds]


def median_by_variant(rows: list) -> dict:
    out: dict[str, dict] = {}
    for v in sorted({r.variant for r in rows}):
        aucs = sorted(r.auc for r in rows if r.variant == v)
        out[v] = {"median": float(np.median(aucs)), "min": aucs[0],
                  "max": aucs[-1], "n": len(aucs)}
    return out


def compare_baselines(gen, train, gen_seed, seeds, workers=1):
    specs = seeded_specs(("full",) + BASELINES, gen, train, gen_seed, seeds)
    return run_cells(specs, workers)


def run_ablations(gen, train, gen_seed, seeds, workers=1, include_full=True):
    variants = (("full",) if include_full else ()) + ABLATIONS
    return run_cells(seeded_specs(variants, gen, train, gen_seed, seeds), workers)


def sweep_prototypes(gen, train, gen_seed, seeds, values=(1, 10, 20, 40, 80),
                     workers=1):
    variants = tuple(f"proto-{v}" for v in values)
    return run_cells(seeded_specs(variants, gen, train, gen_seed, seeds), workers)


# ---------------------------------------------------------------------------
# cluster recovery

def assignment_recovery(model: ContextMatchModel, views: dict, truth,
                        contexts) -> float:
    """Mean per-user adjusted Rand index between argmax-prototype assignment
    and the planted context groups."""
    scores = []
    for u, view in sorted(views.items()):
        if len(view.ctx_ids) < 2:
            continue
        assign = retrieval.assign_contexts(model, view)
        proto_of = {}
        for proto, ctxs in assign.items():
            for c in ctxs:
                proto_of[c] = proto
        pred = [proto_of[int(c)] for c in view.ctx_ids]
        true = [truth.group_of(contexts[int(c)]) for c in view.ctx_ids]
        scores.append(adjusted_rand_index(true, pred))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# similarity heatmap

def heatmap(model: ContextMatchModel, user_id: int, ctx_ids) -> tuple:
    """Pairwise context similarity from the trained encoder, min-max
    normalized so the diagonal is 1; returns (labels, matrix)."""
    ctx_ids = np.asarray(ctx_ids).reshape(-1)
    if ctx_ids.size < 2:
        raise ValueError("heatmap needs at least two contexts")
    reps = encoder.personalized(model, user_id, "context", ctx_ids)
    div = encoder.pairwise_divergence(model, encoder.decode(model, reps)).data
    top = div.max()
    sim = 1.0 - (div / top if top > 0 else div)
    labels = [str(model.contexts[int(c)]) for c in ctx_ids]
    return labels, sim


def heatmap_from_logs(dm_values: np.ndarray) -> np.ndarray:
    top = dm_values.max()
    return 1.0 - (dm_values / top if top > 0 else dm_values)


# ---------------------------------------------------------------------------
# retrieval-complexity benchmark

@dataclass
class BenchRow:
    n: int
    b: int
    cofars_ops: int
    scan_ops: int
    cofars_ms: float
    scan_ms: float


def _context_postings(click_ctx: np.ndarray) -> dict:
    """Offline index: context id -> history positions."""
    out: dict[int, np.ndarray] = {}
    for c in np.unique(click_ctx):
        out[int(c)] = np.flatnonzero(click_ctx == c)
    return out


def _padded_view(view, n: int):
    from .synthlog import UserView
    idx = np.arange(len(view.click_poi))
    idx = np.tile(idx, int(np.ceil(n / len(idx))))[:n]
    return UserView(user_id=view.user_id, ctx_ids=view.ctx_ids,
                    click_poi=view.click_poi[idx], click_ctx=view.click_ctx[idx],
                    click_ts=np.arange(1, n + 1),
                    sample_ctx=view.sample_ctx, sample_poi=view.sample_poi,
                    sample_label=view.sample_label,
                    adjacent_pairs=view.adjacent_pairs)


def bench(model: ContextMatchModel, view, grid, reps: int = 5,
          recent_window: int = 50, cap: int = 200) -> list:
    """Instrumented comparison of the candidate-agnostic retrieval against a
    per-candidate scan over the full history.

    The candidate-agnostic arm runs the actual serving path (short-term
    encode, cached-similarity gating, posting-list selection), executed once
    per request; its op count is r + prototypes + selected length. The scan
    arm touches every history item per candidate: exactly B*n ops. Op counts
    are exact and deterministic; wall times are medians of `reps` runs and
    are reported, never asserted.
    """
    rows = []
    rng = rng_for(123, 50)
    hist_emb = model.poi_emb.data
    cache = retrieval.build_serve_cache(model, {view.user_id: view})
    entry = cache.users[view.user_id]
    sim_vec = entry.sim[:, 0]
    o = model.cfg.n_prototypes

    for n, b in grid:
        padded = _padded_view(view, n)
        cands = rng.integers(0, model.n_pois, size=b)
        postings = _context_postings(padded.click_ctx)  # built offline, untimed

        def cofars_once():
            l = matcher.short_term(model, padded.click_poi[-recent_window:]).data
            gates = retrieval._gate_from_sim(model, sim_vec, entry.otilde, l)
            allowed = set()
            for proto in np.flatnonzero(gates >= 0.5):
                allowed |= entry.assignments.get(int(proto), set())
            sel = [postings[c] for c in sorted(allowed) if c in postings]
            if not sel:
                return np.arange(n)[-recent_window:]
            return np.sort(np.concatenate(sel))[-cap:]

        chosen = cofars_once()
        cofars_ops = recent_window + o + len(chosen)
        # dual route: the posting-list fetch must pick the same entries as the
        # reference selector
        l0 = matcher.short_term(model, padded.click_poi[-recent_window:]).data
        g0 = retrieval._gate_from_sim(model, sim_vec, entry.otilde, l0)
        ref = retrieval.select_subsequence(padded, g0, entry.assignments, cap=cap,
                                           fallback_window=recent_window)
        assert np.array_equal(padded.click_poi[chosen], ref.poi)

        # per-candidate scan arm: similarity against every history item
        def scan_once():
            top = 0.0
            for c in cands:
                sims = hist_emb[padded.click_poi] @ hist_emb[c]
                k = min(cap, len(sims))
                top += float(np.sort(sims)[-k:].sum())
            return top

        scan_ops = b * n

        t_cofars = sorted(_time_once(cofars_once) for _ in range(reps))
        t_scan = sorted(_time_once(scan_once) for _ in range(reps))
        rows.append(BenchRow(n=n, b=b, cofars_ops=cofars_ops, scan_ops=scan_ops,
                             cofars_ms=1e3 * t_cofars[reps // 2],
                             scan_ms=1e3 * t_scan[reps // 2]))
    return rows


def _time_once(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0
