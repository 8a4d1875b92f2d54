"""Log data model, JSONL ingestion, and the synthetic generator.

The generator plants K preference groups over a global context pool: every
context belongs to one group, and interactions under a context draw PoI
attributes from that group's distributions (with an epsilon-uniform noise
mixture). The planted assignment is returned alongside the records and is
the ground-truth oracle for every downstream check.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .util import canonical_json, rng_for, sha256_hex

CONTEXT_FIELDS = ("meal", "loc", "weather", "holiday")

_MEALS = ("breakfast", "lunch", "dinner", "midnight", "teatime", "brunch")
_LOCS = ("home", "office", "mall", "gym", "campus", "station")
_WEATHER = ("sunny", "rain", "snow", "cloudy")


class LogFormatError(ValueError):
    """Raised on malformed or out-of-schema log input."""


@dataclass(frozen=True, order=True)
class ContextKey:
    """Ordered tuple of situational feature values; hashable and totally ordered."""

    values: tuple

    def to_json_obj(self) -> dict:
        return {name: val for name, val in zip(CONTEXT_FIELDS, self.values)}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ContextKey":
        try:
            vals = tuple(obj[name] for name in CONTEXT_FIELDS)
        except KeyError as e:
            raise LogFormatError(f"context missing feature {e.args[0]!r}") from None
        if not isinstance(vals[-1], bool):
            raise LogFormatError("context feature 'holiday' must be a boolean")
        return cls(vals)

    def __str__(self):
        return "|".join(str(v) for v in self.values)


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered discrete attribute fields; continuous attributes arrive pre-bucketed."""

    fields: tuple  # of (name, cardinality)

    def __post_init__(self):
        for name, card in self.fields:
            if card < 2:
                raise ValueError(f"attribute field {name!r} needs cardinality >= 2, got {card}")

    @property
    def names(self):
        return tuple(name for name, _ in self.fields)

    @property
    def cards(self):
        return tuple(card for _, card in self.fields)

    @property
    def total_dim(self) -> int:
        return sum(self.cards)

    def field_slices(self):
        out, off = [], 0
        for _, card in self.fields:
            out.append((off, off + card))
            off += card
        return out

    def hash(self) -> str:
        return sha256_hex(canonical_json(list(self.fields)).encode())

    def poi_of_attrs(self, attrs) -> int:
        """Mixed-radix PoI id: one PoI per attribute-value combination."""
        code = 0
        for v, card in zip(attrs, self.cards):
            code = code * card + int(v)
        return code

    @property
    def n_pois(self) -> int:
        n = 1
        for c in self.cards:
            n *= c
        return n

    def all_poi_attrs(self) -> np.ndarray:
        """Decode every PoI id back to its attribute values, (n_pois, fields)."""
        codes = np.arange(self.n_pois)
        out = np.empty((self.n_pois, len(self.cards)), dtype=np.int64)
        for f in range(len(self.cards) - 1, -1, -1):
            out[:, f] = codes % self.cards[f]
            codes //= self.cards[f]
        return out


DEFAULT_SCHEMA = AttributeSchema(
    fields=(("category", 20), ("price", 10), ("quality", 5), ("delivery", 5)))


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    poi_id: int
    timestamp: int
    context: ContextKey
    attrs: tuple
    click: bool
    exposed: bool = True

    def to_json_line(self, schema: AttributeSchema) -> str:
        return json.dumps({
            "user": self.user_id, "poi": self.poi_id, "ts": self.timestamp,
            "ctx": self.context.to_json_obj(),
            "attrs": {name: int(v) for name, v in zip(schema.names, self.attrs)},
            "click": int(self.click),
        }, sort_keys=True, separators=(",", ":"))


class RecordSet:
    """Columnar store of interaction records; behaves as a sequence of them.

    Bulk operations (generation, estimation, training) work on the arrays;
    __getitem__ materializes individual InteractionRecord views.
    """

    def __init__(self, schema: AttributeSchema, contexts: tuple,
                 user: np.ndarray, poi: np.ndarray, ts: np.ndarray,
                 ctx_id: np.ndarray, attrs: np.ndarray, click: np.ndarray):
        self.schema = schema
        self.contexts = tuple(contexts)  # global ContextKey table
        self.ctx_index = {c: i for i, c in enumerate(self.contexts)}
        self.user = np.asarray(user, dtype=np.int64)
        self.poi = np.asarray(poi, dtype=np.int64)
        self.ts = np.asarray(ts, dtype=np.int64)
        self.ctx_id = np.asarray(ctx_id, dtype=np.int64)
        self.attrs = np.asarray(attrs, dtype=np.int64)
        self.click = np.asarray(click, dtype=bool)

    def __len__(self):
        return self.user.shape[0]

    def __getitem__(self, i: int) -> InteractionRecord:
        return InteractionRecord(
            user_id=int(self.user[i]), poi_id=int(self.poi[i]),
            timestamp=int(self.ts[i]), context=self.contexts[self.ctx_id[i]],
            attrs=tuple(int(v) for v in self.attrs[i]),
            click=bool(self.click[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def take(self, mask_or_idx) -> "RecordSet":
        return RecordSet(self.schema, self.contexts,
                         self.user[mask_or_idx], self.poi[mask_or_idx],
                         self.ts[mask_or_idx], self.ctx_id[mask_or_idx],
                         self.attrs[mask_or_idx], self.click[mask_or_idx])

    def for_user(self, user_id: int) -> "RecordSet":
        return self.take(self.user == user_id)

    def clicks_only(self) -> "RecordSet":
        return self.take(self.click)

    def user_ids(self) -> np.ndarray:
        return np.unique(self.user)

    def dataset_hash(self) -> str:
        h = [self.schema.hash()]
        for arr in (self.user, self.poi, self.ts, self.ctx_id, self.click):
            h.append(sha256_hex(arr.tobytes()))
        h.append(sha256_hex(self.attrs.tobytes()))
        return sha256_hex("".join(h).encode())

    def write_jsonl(self, path):
        with open(path, "w") as f:
            for rec in self:
                f.write(rec.to_json_line(self.schema))
                f.write("\n")


@dataclass
class PlantedTruth:
    """Hidden generator state: context->group map and per-group attribute dists."""

    group_of_context: dict  # ContextKey -> group id
    group_dists: list  # per group: list of per-field probability vectors
    n_groups: int

    def group_of(self, ctx: ContextKey) -> int:
        return self.group_of_context[ctx]

    def to_json_obj(self) -> dict:
        return {
            "n_groups": self.n_groups,
            "groups": [[ctx.to_json_obj(), g] for ctx, g in
                       sorted(self.group_of_context.items())],
            "dists": [[vec.tolist() for vec in dists] for dists in self.group_dists],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PlantedTruth":
        return cls(
            group_of_context={ContextKey.from_json_obj(c): g for c, g in obj["groups"]},
            group_dists=[[np.asarray(v) for v in dists] for dists in obj["dists"]],
            n_groups=obj["n_groups"])


@dataclass
class GeneratorConfig:
    users: int = 200
    contexts_per_user: int = 12
    groups: int = 3
    seq_len: int = 4000          # clicked interactions per user
    noise: float = 0.0           # epsilon: per-event uniform-attribute probability
    concentration: float = 1.0   # Dirichlet concentration of planted distributions
    neg_per_click: int = 4
    stay_prob: float = 0.7       # context run persistence in the event sequence
    ctx_weight_conc: float = 2.0  # Dirichlet concentration of per-user context usage
    attr_cards: tuple = (20, 10, 5, 5)
    meal_values: int = 4
    loc_values: int = 3
    weather_values: int = 2
    holiday_values: int = 2
    click_jitter: float = 0.0    # reserved; clicks are planted deterministically

    def schema(self) -> AttributeSchema:
        names = ("category", "price", "quality", "delivery")
        return AttributeSchema(fields=tuple(zip(names, self.attr_cards)))

    def context_pool(self) -> tuple:
        meals = _MEALS[: self.meal_values]
        locs = _LOCS[: self.loc_values]
        weather = _WEATHER[: self.weather_values]
        holidays = (False, True)[: self.holiday_values]
        pool = []
        for m in meals:
            for l in locs:
                for w in weather:
                    for h in holidays:
                        pool.append(ContextKey((m, l, w, h)))
        return tuple(pool)


def _plant_groups(cfg: GeneratorConfig, pool, rng) -> tuple:
    """Assign every pool context to a group, shuffled but balanced."""
    order = rng.permutation(len(pool))
    groups = {}
    for rank, idx in enumerate(order):
        groups[pool[idx]] = rank % cfg.groups
    return groups


def _plant_dists(cfg: GeneratorConfig, schema: AttributeSchema, rng) -> list:
    return [[rng.dirichlet(np.full(card, cfg.concentration)) for card in schema.cards]
            for _ in range(cfg.groups)]


def _user_contexts(cfg: GeneratorConfig, pool, group_of, rng) -> list:
    """Sample distinct contexts for one user, covering every group."""
    by_group = [[] for _ in range(cfg.groups)]
    for ctx in pool:
        by_group[group_of[ctx]].append(ctx)
    base, extra = divmod(cfg.contexts_per_user, cfg.groups)
    chosen = []
    for g in range(cfg.groups):
        want = base + (1 if g < extra else 0)
        idx = rng.choice(len(by_group[g]), size=want, replace=False)
        chosen.extend(by_group[g][i] for i in sorted(idx))
    return chosen


def _markov_context_series(n: int, weights: np.ndarray, stay: float, rng) -> np.ndarray:
    """Run-structured context index series: stay with prob `stay`, else resample."""
    switch = rng.random(n) >= stay
    switch[0] = True
    run_id = np.cumsum(switch) - 1
    n_runs = run_id[-1] + 1
    run_ctx = rng.choice(len(weights), size=n_runs, p=weights)
    return run_ctx[run_id]


def _draw_attrs(field_card: int, dist: np.ndarray, size: int, rng) -> np.ndarray:
    return rng.choice(field_card, size=size, p=dist)


def generate(cfg: GeneratorConfig, seed: int):
    """Produce (RecordSet, PlantedTruth). Deterministic given (cfg, seed)."""
    pool = cfg.context_pool()
    if cfg.groups < 1 or cfg.groups > len(pool):
        raise ValueError(f"groups={cfg.groups} exceeds the {len(pool)} distinct contexts")
    if not 0 <= cfg.noise < 1:
        raise ValueError(f"noise must lie in [0, 1); got {cfg.noise}")
    if cfg.contexts_per_user < cfg.groups:
        raise ValueError("contexts_per_user must be >= groups to cover every group")
    schema = cfg.schema()
    rng_global = rng_for(seed, 0)
    group_of = _plant_groups(cfg, pool, rng_global)
    dists = _plant_dists(cfg, schema, rng_global)
    neg_dists = _offgroup_dists(cfg, schema, dists)

    cols_user, cols_poi, cols_ts, cols_ctx, cols_click = [], [], [], [], []
    cols_attrs = []
    n_fields = len(schema.cards)
    pool_index = {c: i for i, c in enumerate(pool)}

    for u in range(cfg.users):
        rng = rng_for(seed, 1, u)
        contexts = _user_contexts(cfg, pool, group_of, rng)
        ctx_ids = np.array([pool_index[c] for c in contexts])
        ctx_groups = np.array([group_of[c] for c in contexts])
        weights = rng.dirichlet(np.full(len(contexts), cfg.ctx_weight_conc))

        local = _markov_context_series(cfg.seq_len, weights, cfg.stay_prob, rng)
        ev_ctx = ctx_ids[local]
        ev_group = ctx_groups[local]
        noisy = rng.random(cfg.seq_len) < cfg.noise

        attrs = np.empty((cfg.seq_len, n_fields), dtype=np.int64)
        for f, card in enumerate(schema.cards):
            col = np.empty(cfg.seq_len, dtype=np.int64)
            for g in range(cfg.groups):
                m = (ev_group == g) & ~noisy
                if m.any():
                    col[m] = _draw_attrs(card, dists[g][f], int(m.sum()), rng)
            if noisy.any():
                col[noisy] = rng.integers(0, card, size=int(noisy.sum()))
            attrs[:, f] = col

        ts = np.arange(1, cfg.seq_len + 1)
        poi = _encode_pois(schema, attrs)

        cols_user.append(np.full(cfg.seq_len, u))
        cols_poi.append(poi)
        cols_ts.append(ts)
        cols_ctx.append(ev_ctx)
        cols_attrs.append(attrs)
        cols_click.append(np.ones(cfg.seq_len, dtype=bool))

        if cfg.neg_per_click > 0:
            k = cfg.neg_per_click
            n_neg = cfg.seq_len * k
            neg_attrs = np.empty((n_neg, n_fields), dtype=np.int64)
            neg_group = np.repeat(ev_group, k)
            for f, card in enumerate(schema.cards):
                col = np.empty(n_neg, dtype=np.int64)
                for g in range(cfg.groups):
                    m = neg_group == g
                    if m.any():
                        col[m] = _draw_attrs(card, neg_dists[g][f], int(m.sum()), rng)
                neg_attrs[:, f] = col
            cols_user.append(np.full(n_neg, u))
            cols_poi.append(_encode_pois(schema, neg_attrs))
            cols_ts.append(np.repeat(ts, k))
            cols_ctx.append(np.repeat(ev_ctx, k))
            cols_attrs.append(neg_attrs)
            cols_click.append(np.zeros(n_neg, dtype=bool))

    user = np.concatenate(cols_user)
    ts = np.concatenate(cols_ts)
    # stable per-user chronological order, clicks before their negatives
    order = np.lexsort((np.arange(len(user)), ts, user))
    records = RecordSet(schema, pool,
                        user[order], np.concatenate(cols_poi)[order], ts[order],
                        np.concatenate(cols_ctx)[order],
                        np.concatenate(cols_attrs)[order],
                        np.concatenate(cols_click)[order])
    truth = PlantedTruth(group_of_context=group_of, group_dists=dists,
                         n_groups=cfg.groups)
    return records, truth


def _offgroup_dists(cfg: GeneratorConfig, schema: AttributeSchema, dists) -> list:
    """Low-affinity exposure distributions: what the group's users get shown
    but do not click. Drawn from the other groups' typical attributes so that
    positives and negatives share one global item marginal; with a single
    group, uniform."""
    out = []
    for g in range(cfg.groups):
        per_field = []
        for f, card in enumerate(schema.cards):
            others = [dists[g2][f] for g2 in range(cfg.groups) if g2 != g]
            if others:
                q = np.mean(others, axis=0)
            else:
                q = np.full(card, 1.0 / card)
            per_field.append(q / q.sum())
        out.append(per_field)
    return out


def _encode_pois(schema: AttributeSchema, attrs: np.ndarray) -> np.ndarray:
    code = np.zeros(attrs.shape[0], dtype=np.int64)
    for f, card in enumerate(schema.cards):
        code = code * card + attrs[:, f]
    return code


# ---------------------------------------------------------------------------
# ingestion

def ingest(path, schema: AttributeSchema = DEFAULT_SCHEMA) -> RecordSet:
    """Read a JSONL log; validates every line and sorts per user by timestamp."""
    users, pois, tss, ctxs, attrs, clicks = [], [], [], [], [], []
    contexts: list[ContextKey] = []
    ctx_index: dict[ContextKey, int] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise LogFormatError(f"line {lineno}: malformed JSON ({e.msg})") from None
            try:
                rec = _parse_record(obj, schema)
            except LogFormatError as e:
                raise LogFormatError(f"line {lineno}: {e}") from None
            ctx = rec[3]
            if ctx not in ctx_index:
                ctx_index[ctx] = len(contexts)
                contexts.append(ctx)
            users.append(rec[0])
            pois.append(rec[1])
            tss.append(rec[2])
            ctxs.append(ctx_index[ctx])
            attrs.append(rec[4])
            clicks.append(rec[5])
    if not users:
        return RecordSet(schema, (), np.empty(0, dtype=np.int64),
                         np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                         np.empty(0, dtype=np.int64),
                         np.empty((0, len(schema.cards)), dtype=np.int64),
                         np.empty(0, dtype=bool))
    user = np.array(users)
    ts = np.array(tss)
    order = np.lexsort((np.arange(len(user)), ts, user))
    return RecordSet(schema, tuple(contexts),
                     user[order], np.array(pois)[order], ts[order],
                     np.array(ctxs)[order], np.array(attrs)[order],
                     np.array(clicks, dtype=bool)[order])


def _parse_record(obj: dict, schema: AttributeSchema):
    for key in ("user", "poi", "ts", "ctx", "attrs", "click"):
        if key not in obj:
            raise LogFormatError(f"missing key {key!r}")
    ctx = ContextKey.from_json_obj(obj["ctx"])
    vals = []
    for name, card in schema.fields:
        if name not in obj["attrs"]:
            raise LogFormatError(f"missing attribute {name!r}")
        v = obj["attrs"][name]
        if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v < card:
            raise LogFormatError(
                f"attribute {name!r} value {v!r} outside schema range [0, {card})")
        vals.append(v)
    if obj["click"] not in (0, 1):
        raise LogFormatError(f"click must be 0 or 1, got {obj['click']!r}")
    return (int(obj["user"]), int(obj["poi"]), int(obj["ts"]), ctx,
            tuple(vals), bool(obj["click"]))


# ---------------------------------------------------------------------------
# temporal split

def split(records: RecordSet, holdout_fraction: float):
    """Per-user chronological split: the last fraction of records goes to test."""
    if not 0 < holdout_fraction < 1:
        raise ValueError(f"holdout_fraction must lie in (0, 1); got {holdout_fraction}")
    test_mask = np.zeros(len(records), dtype=bool)
    for u in records.user_ids():
        idx = np.flatnonzero(records.user == u)
        if idx.size < 2:
            continue
        n_test = int(np.floor(idx.size * holdout_fraction))
        if n_test:
            test_mask[idx[-n_test:]] = True
    return records.take(~test_mask), records.take(test_mask)


# ---------------------------------------------------------------------------
# derived per-user views used by training and retrieval

@dataclass
class UserView:
    user_id: int
    ctx_ids: np.ndarray          # distinct context ids, order of first appearance
    click_poi: np.ndarray        # clicked PoIs, chronological
    click_ctx: np.ndarray        # their context ids
    click_ts: np.ndarray
    sample_ctx: np.ndarray       # all records (training targets)
    sample_poi: np.ndarray
    sample_label: np.ndarray
    adjacent_pairs: tuple = field(default_factory=tuple)  # (src ctx id, dst ctx id)


def build_user_views(records: RecordSet) -> dict:
    """Index the record set by user for training/serving."""
    views = {}
    for u in records.user_ids():
        sub = records.for_user(int(u))
        clicks = sub.take(sub.click)
        seen = []
        seen_set = set()
        for c in clicks.ctx_id:
            if c not in seen_set:
                seen_set.add(int(c))
                seen.append(int(c))
        if not seen:  # user with no clicks: fall back to sample contexts
            for c in sub.ctx_id:
                if c not in seen_set:
                    seen_set.add(int(c))
                    seen.append(int(c))
            warnings.warn(f"user {u} has no clicked records")
        pairs = set()
        cc = clicks.ctx_id
        for a, b in zip(cc[:-1], cc[1:]):
            if a != b:
                pairs.add((int(a), int(b)))
        views[int(u)] = UserView(
            user_id=int(u),
            ctx_ids=np.array(seen, dtype=np.int64),
            click_poi=clicks.poi.copy(), click_ctx=clicks.ctx_id.copy(),
            click_ts=clicks.ts.copy(),
            sample_ctx=sub.ctx_id.copy(), sample_poi=sub.poi.copy(),
            sample_label=sub.click.astype(np.float64),
            adjacent_pairs=tuple(sorted(pairs)))
    return views
