"""Ground-truth attribute distributions per context and their divergences.

Divergence between two contexts is the symmetrized KL of their per-field
attribute distributions, averaged over fields (marginals, matching the
probability decoder's output space). Natural logarithm throughout. A joint
two-field mode exists to quantify the factorization gap in tests.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .synthlog import AttributeSchema, ContextKey, RecordSet
from .util import canonical_json, sha256_hex

DEFAULT_ALPHA = 1e-6
DEFAULT_MIN_SUPPORT = 5


@dataclass
class AttributeDistribution:
    """Per-field probability vectors for one context, plus its sample support."""

    schema: AttributeSchema
    vectors: list  # per field, np.ndarray summing to 1
    support_count: int

    def __post_init__(self):
        for vec, card in zip(self.vectors, self.schema.cards):
            if vec.shape != (card,):
                raise ValueError("distribution width does not match schema")

    @classmethod
    def from_vectors(cls, schema: AttributeSchema, vectors, support_count: int = 0):
        return cls(schema, [np.asarray(v, dtype=np.float64) for v in vectors],
                   support_count)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.vectors)

    def l1_to(self, other_vectors) -> float:
        """Mean per-field L1 distance to another set of field vectors."""
        return float(np.mean([np.abs(a - np.asarray(b)).sum()
                              for a, b in zip(self.vectors, other_vectors)]))


def _smoothed(counts: np.ndarray, alpha: float) -> np.ndarray:
    n = counts.sum()
    return (counts + alpha) / (n + alpha * counts.size)


def pooled_distribution(records: RecordSet, schema: AttributeSchema,
                        alpha: float = DEFAULT_ALPHA) -> AttributeDistribution:
    """Backoff pool: clicked-attribute distribution over the whole record set."""
    clicks = records.clicks_only()
    vecs = []
    for f, card in enumerate(schema.cards):
        counts = np.bincount(clicks.attrs[:, f], minlength=card).astype(np.float64)
        vecs.append(_smoothed(counts, alpha))
    return AttributeDistribution(schema, vecs, support_count=len(clicks))


def estimate(user_records: RecordSet, schema: AttributeSchema,
             alpha: float = DEFAULT_ALPHA, min_support: int = DEFAULT_MIN_SUPPORT,
             pool: AttributeDistribution | None = None) -> dict:
    """Per-context smoothed attribute distributions from one user's clicks.

    Contexts with support below `min_support` are blended with the pooled
    distribution at weight support/(support + min_support). Contexts with no
    clicked records are never emitted.
    """
    if alpha <= 0:
        raise ValueError("smoothing alpha must be positive")
    clicks = user_records.clicks_only()
    out: dict[ContextKey, AttributeDistribution] = {}
    for c in np.unique(clicks.ctx_id):
        mask = clicks.ctx_id == c
        support = int(mask.sum())
        vecs = []
        for f, card in enumerate(schema.cards):
            counts = np.bincount(clicks.attrs[mask, f], minlength=card).astype(np.float64)
            vec = _smoothed(counts, alpha)
            if pool is not None and support < min_support:
                w = support / (support + min_support)
                vec = w * vec + (1 - w) * pool.vectors[f]
            vecs.append(vec)
        out[user_records.contexts[c]] = AttributeDistribution(schema, vecs, support)
    return out


def kl(p: AttributeDistribution, q: AttributeDistribution) -> float:
    """Mean over fields of sum_v p(v) ln(p(v)/q(v)); inputs must be smoothed."""
    if p.schema != q.schema:
        raise ValueError("divergence between distributions over different schemas")
    total = 0.0
    for pv, qv in zip(p.vectors, q.vectors):
        total += float(np.sum(pv * (np.log(pv) - np.log(qv))))
    return total / len(p.vectors)


def js(p: AttributeDistribution, q: AttributeDistribution) -> float:
    """Symmetrized KL: 0.5 * (kl(p, q) + kl(q, p)).

    This is the divergence the similarity measure is built on; the standard
    midpoint form is available as js_midpoint for sensitivity analysis.
    """
    return 0.5 * (kl(p, q) + kl(q, p))


def js_midpoint(p: AttributeDistribution, q: AttributeDistribution) -> float:
    """Standard Jensen-Shannon divergence against the midpoint mixture."""
    if p.schema != q.schema:
        raise ValueError("divergence between distributions over different schemas")
    total = 0.0
    for pv, qv in zip(p.vectors, q.vectors):
        m = 0.5 * (pv + qv)
        total += 0.5 * float(np.sum(pv * (np.log(pv) - np.log(m))))
        total += 0.5 * float(np.sum(qv * (np.log(qv) - np.log(m))))
    return total / len(p.vectors)


# --- joint two-field mode, for quantifying the factorization gap -----------

def estimate_joint(user_records: RecordSet, schema: AttributeSchema,
                   alpha: float = DEFAULT_ALPHA) -> dict:
    """Joint distribution over the Cartesian product of at most two fields."""
    if len(schema.cards) > 2:
        raise ValueError("joint estimation supports at most two fields")
    clicks = user_records.clicks_only()
    shape = tuple(schema.cards)
    out = {}
    for c in np.unique(clicks.ctx_id):
        mask = clicks.ctx_id == c
        counts = np.zeros(shape)
        rows = clicks.attrs[mask]
        if len(schema.cards) == 1:
            np.add.at(counts, rows[:, 0], 1.0)
        else:
            np.add.at(counts, (rows[:, 0], rows[:, 1]), 1.0)
        n = counts.sum()
        out[user_records.contexts[c]] = (counts + alpha) / (n + alpha * counts.size)
    return out


def kl_joint(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * (np.log(p) - np.log(q))))


def js_joint(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * (kl_joint(p, q) + kl_joint(q, p))


# --- all-pairs matrix over a user's contexts --------------------------------

@dataclass
class DivergenceMatrix:
    contexts: tuple  # ContextKey order of rows/columns
    values: np.ndarray

    def __post_init__(self):
        n = len(self.contexts)
        if self.values.shape != (n, n):
            raise ValueError("divergence matrix shape mismatch")


def divergence_matrix(dists: dict) -> DivergenceMatrix:
    """All-pairs symmetrized KL over one user's estimated context distributions."""
    if not dists:
        raise ValueError("divergence matrix needs at least one context")
    contexts = tuple(sorted(dists.keys()))
    n = len(contexts)
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            v = js(dists[contexts[i]], dists[contexts[j]])
            m[i, j] = v
            m[j, i] = v
    return DivergenceMatrix(contexts, m)


# --- disk cache --------------------------------------------------------------

_MAGIC = b"DIVC"


def cache_path(cache_dir, user_id: int, dataset_hash: str):
    from pathlib import Path
    return Path(cache_dir) / f"u{user_id}_{dataset_hash[:16]}.div"


def save_matrix(path, user_id: int, schema: AttributeSchema, dm: DivergenceMatrix):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", 1, user_id))
        f.write(bytes.fromhex(schema.hash()))
        f.write(struct.pack("<I", len(dm.contexts)))
        for ctx in dm.contexts:
            raw = canonical_json(ctx.to_json_obj()).encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(dm.values.astype("<f8").tobytes())


def load_matrix(path, schema: AttributeSchema) -> tuple:
    import json as _json
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a divergence cache file")
        _, user_id = struct.unpack("<IQ", f.read(12))
        stored_hash = f.read(32).hex()
        if stored_hash != schema.hash():
            raise ValueError(f"{path}: schema hash mismatch")
        (n,) = struct.unpack("<I", f.read(4))
        contexts = []
        for _ in range(n):
            (ln,) = struct.unpack("<H", f.read(2))
            contexts.append(ContextKey.from_json_obj(_json.loads(f.read(ln).decode())))
        values = np.frombuffer(f.read(8 * n * n), dtype="<f8").reshape(n, n).copy()
    return user_id, DivergenceMatrix(tuple(contexts), values)


def user_divergences(records: RecordSet, schema: AttributeSchema,
                     alpha: float = DEFAULT_ALPHA,
                     min_support: int = DEFAULT_MIN_SUPPORT,
                     cache_dir=None) -> dict:
    """Divergence matrices for every user, with optional disk caching."""
    pool = pooled_distribution(records, schema, alpha)
    ds_hash = records.dataset_hash() if cache_dir is not None else ""
    out = {}
    for u in records.user_ids():
        u = int(u)
        if cache_dir is not None:
            path = cache_path(cache_dir, u, ds_hash)
            if path.exists():
                _, out[u] = load_matrix(path, schema)
                continue
        dists = estimate(records.for_user(u), schema, alpha, min_support, pool)
        if not dists:
            continue
        dm = divergence_matrix(dists)
        out[u] = dm
        if cache_dir is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_matrix(path, u, schema, dm)
    return out
