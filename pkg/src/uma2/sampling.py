"""Log ingestion, space labels, and negative sampling strategies."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .funnel import LOG_SCHEMA, FunnelLog

logger = logging.getLogger(__name__)


class SpaceLabel(enum.IntEnum):
    POSITIVE = 0  # clicked
    A = 1  # exposed, not clicked
    B = 2  # recalled, not exposed
    C = 3  # not recalled


class Strategy(str, enum.Enum):
    SS_A = "ss-a"
    SS_AB = "ss-ab"
    SS_ABC_RANDOM = "ss-abc-random"
    SS_ABC_FIXED = "ss-abc-fixed"


STRATEGIES = tuple(s.value for s in Strategy)


class LogParseError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


def space_label(clicked, exposed, recalled):
    """Vectorised flag -> SpaceLabel mapping."""
    clicked = np.asarray(clicked, dtype=bool)
    exposed = np.asarray(exposed, dtype=bool)
    recalled = np.asarray(recalled, dtype=bool)
    return np.select(
        [clicked, exposed, recalled],
        [SpaceLabel.POSITIVE, SpaceLabel.A, SpaceLabel.B],
        default=SpaceLabel.C,
    ).astype(np.int8)


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    y: int
    o: int
    space: SpaceLabel

    @property
    def exposed(self) -> bool:
        return self.space in (SpaceLabel.POSITIVE, SpaceLabel.A)


class Corpus:
    """Users, items and their logged interactions.

    Ids are arbitrary non-negative integers; internally everything is
    addressed by row index into the sorted id arrays. Unlogged pairs are
    implicitly Space C and never stored.
    """

    def __init__(self, user_ids, user_features, item_ids, item_features, inter_user, inter_item, clicked, exposed, recalled):
        self.user_ids = np.asarray(user_ids, dtype=np.int64)
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        if len(self.user_ids) == 0 or len(self.item_ids) == 0:
            raise IntegrityError("corpus needs at least one user and one item")
        self.user_features = np.asarray(user_features, dtype=np.float64)
        self.item_features = np.asarray(item_features, dtype=np.float64)
        self.u = np.asarray(inter_user, dtype=np.int64)
        self.i = np.asarray(inter_item, dtype=np.int64)
        self.clicked = np.asarray(clicked, dtype=bool)
        self.exposed = np.asarray(exposed, dtype=bool)
        self.recalled = np.asarray(recalled, dtype=bool)
        self.space = space_label(self.clicked, self.exposed, self.recalled)
        self._build_pools()

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.u)

    def user_index(self, ids) -> np.ndarray:
        return _lookup(self.user_ids, ids, "user")

    def item_index(self, ids) -> np.ndarray:
        return _lookup(self.item_ids, ids, "item")

    def _build_pools(self) -> None:
        n = self.num_users
        order = np.lexsort((self.i, self.u))
        self.u, self.i = self.u[order], self.i[order]
        self.clicked, self.exposed, self.recalled = self.clicked[order], self.exposed[order], self.recalled[order]
        self.space = self.space[order]
        key = self.u * self.num_items + self.i
        if len(key) and np.any(key[1:] == key[:-1]):
            k = int(np.flatnonzero(key[1:] == key[:-1])[0])
            raise IntegrityError(
                f"duplicate interaction for user {self.user_ids[self.u[k]]}, item {self.item_ids[self.i[k]]}"
            )
        self.pools: dict[SpaceLabel, list[np.ndarray]] = {}
        for label in (SpaceLabel.POSITIVE, SpaceLabel.A, SpaceLabel.B):
            sel = self.space == label
            self.pools[label] = _split_by_user(self.u[sel], self.i[sel], n)
        sel = self.recalled
        self.recall_sets = _split_by_user(self.u[sel], self.i[sel], n)

    def records(self) -> Iterator[InteractionRecord]:
        for k in range(len(self.u)):
            yield self.record_at(k)

    def record_at(self, k: int) -> InteractionRecord:
        return InteractionRecord(
            int(self.user_ids[self.u[k]]), int(self.item_ids[self.i[k]]),
            int(self.clicked[k]), int(self.recalled[k]), SpaceLabel(int(self.space[k])),
        )

    def positives(self) -> np.ndarray:
        """Interaction row indices of clicked records."""
        return np.flatnonzero(self.space == SpaceLabel.POSITIVE)

    def label_counts(self) -> dict[SpaceLabel, int]:
        counts = np.bincount(self.space, minlength=4)
        return {label: int(counts[label]) for label in SpaceLabel}

    def clicked_items_by_user(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {}
        for uid, pool in zip(self.user_ids.tolist(), self.pools[SpaceLabel.POSITIVE]):
            if len(pool):
                out[uid] = set(self.item_ids[pool].tolist())
        return out

    @classmethod
    def from_funnel_log(cls, log: FunnelLog, user_features, item_features) -> "Corpus":
        """Build directly from simulator output (ids are feature row indices)."""
        users = np.unique(log.user)
        items = np.unique(log.item)
        return cls(
            users, np.asarray(user_features)[users], items, np.asarray(item_features)[items],
            np.searchsorted(users, log.user), np.searchsorted(items, log.item),
            log.clicked, log.exposed, log.recalled,
        )


def _lookup(sorted_ids: np.ndarray, ids, kind: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    pos = np.searchsorted(sorted_ids, ids)
    pos = np.minimum(pos, len(sorted_ids) - 1)
    bad = sorted_ids[pos] != ids
    if np.any(bad):
        raise IntegrityError(f"unknown {kind} id {int(np.atleast_1d(ids)[np.atleast_1d(bad)][0])}")
    return pos


def _split_by_user(users: np.ndarray, items: np.ndarray, n: int) -> list[np.ndarray]:
    # users sorted ascending, items sorted within user
    bounds = np.searchsorted(users, np.arange(n + 1))
    return [items[bounds[k]:bounds[k + 1]] for k in range(n)]


def _parse_features(text: str, lineno: int, path) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64) if text else np.zeros(0)
    except ValueError as exc:
        raise LogParseError(f"{path}:{lineno}: bad feature vector: {exc}") from exc


def ingest_logs(path, reference: Corpus | None = None) -> Corpus:
    """Read a ``uma2-log-v1`` file into a :class:`Corpus`.

    With ``reference`` set, every id must already exist there (test logs are
    resolved against the training corpus) and features come from it.
    """
    path = Path(path)
    users: dict[int, str] = {}
    items: dict[int, str] = {}
    rows_u, rows_i, rows_c, rows_e, rows_r = [], [], [], [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith(LOG_SCHEMA):
            raise LogParseError(f"{path}:1: expected header starting with {LOG_SCHEMA!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise LogParseError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}")
            try:
                u, i = int(parts[0]), int(parts[1])
                c, e, r = (int(x) for x in parts[2:5])
            except ValueError as exc:
                raise LogParseError(f"{path}:{lineno}: {exc}") from exc
            if not {c, e, r} <= {0, 1}:
                raise LogParseError(f"{path}:{lineno}: flags must be 0/1")
            if (c and not e) or (e and not r):
                raise LogParseError(f"{path}:{lineno}: funnel violated (clicked={c}, exposed={e}, recalled={r})")
            for table, key, text, kind in ((users, u, parts[5], "user"), (items, i, parts[6], "item")):
                seen = table.get(key)
                if seen is None:
                    table[key] = text
                elif seen != text:
                    raise IntegrityError(f"{path}:{lineno}: {kind} {key} has inconsistent features")
            rows_u.append(u)
            rows_i.append(i)
            rows_c.append(c)
            rows_e.append(e)
            rows_r.append(r)
    if reference is not None:
        uidx = reference.user_index(np.array(rows_u, dtype=np.int64))
        iidx = reference.item_index(np.array(rows_i, dtype=np.int64))
        return Corpus(
            reference.user_ids, reference.user_features, reference.item_ids, reference.item_features,
            uidx, iidx, rows_c, rows_e, rows_r,
        )
    if not users:
        raise IntegrityError(f"{path}: log has no records")
    user_ids = np.array(sorted(users), dtype=np.int64)
    item_ids = np.array(sorted(items), dtype=np.int64)
    uf = np.stack([_parse_features(users[k], 0, path) for k in user_ids.tolist()])
    itf = np.stack([_parse_features(items[k], 0, path) for k in item_ids.tolist()])
    return Corpus(
        user_ids, uf, item_ids, itf,
        np.searchsorted(user_ids, np.array(rows_u, dtype=np.int64)),
        np.searchsorted(item_ids, np.array(rows_i, dtype=np.int64)),
        rows_c, rows_e, rows_r,
    )


@dataclass
class SamplingCounts:
    """Negatives per positive. ``fixed`` is the A:B:C ratio; ``ab`` splits SS-AB."""

    fixed: tuple[int, int, int] = (1, 4, 20)
    total: int = 25
    ab: tuple[int, int] = (1, 4)

    def per_space(self, strategy: Strategy) -> dict[SpaceLabel, int]:
        strategy = Strategy(strategy)
        if strategy is Strategy.SS_ABC_FIXED:
            a, b, c = self.fixed
            return {SpaceLabel.A: a, SpaceLabel.B: b, SpaceLabel.C: c}
        if strategy is Strategy.SS_A:
            return {SpaceLabel.A: self.total}
        if strategy is Strategy.SS_AB:
            n_a = int(round(self.total * self.ab[0] / sum(self.ab)))
            return {SpaceLabel.A: n_a, SpaceLabel.B: self.total - n_a}
        return {}

    def negatives_per_positive(self, strategy: Strategy) -> int:
        if Strategy(strategy) is Strategy.SS_ABC_FIXED:
            return sum(self.fixed)
        return self.total


@dataclass
class SamplerCounters:
    skipped_positives: int = 0
    fallback_a: int = 0
    fallback_b: int = 0
    fallback_c: int = 0
    empty_a: int = 0
    empty_b: int = 0

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def merge(self, other: "SamplerCounters") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    @property
    def warnings(self) -> int:
        return sum(v for k, v in self.as_dict().items() if k != "skipped_positives")


@dataclass
class TrainingBatch:
    """Positives with their negatives, as parallel arrays over entries.

    ``aux_weight`` is the stratified-sampling weight used by the propensity
    heads (|pool| / (draws * user positives)); ``ipw_weight`` is filled later.
    """

    user: np.ndarray  # corpus row indices
    item: np.ndarray
    y: np.ndarray
    space: np.ndarray
    ipw_weight: np.ndarray
    aux_weight: np.ndarray
    strategy: Strategy
    group: np.ndarray = field(default=None)  # index of the owning positive within the batch

    def __len__(self) -> int:
        return len(self.user)

    def entries(self, corpus: Corpus) -> list[tuple[int, int, int, SpaceLabel, float]]:
        return [
            (int(corpus.user_ids[u]), int(corpus.item_ids[i]), int(y), SpaceLabel(int(s)), float(w))
            for u, i, y, s, w in zip(self.user, self.item, self.y, self.space, self.ipw_weight)
        ]

    @property
    def recalled(self) -> np.ndarray:
        return self.space != SpaceLabel.C

    @classmethod
    def concat(cls, parts: list["TrainingBatch"], strategy: Strategy) -> "TrainingBatch":
        groups = []
        offset = 0
        for p in parts:
            groups.append(p.group + offset)
            offset += int(p.group.max()) + 1 if len(p.group) else 0
        return cls(
            *(np.concatenate([getattr(p, f) for p in parts]) for f in ("user", "item", "y", "space", "ipw_weight", "aux_weight")),
            strategy=strategy,
            group=np.concatenate(groups),
        )


def _draw(rng: np.random.Generator, pool: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    """k draws from pool without replacement, or with replacement if too small."""
    if k <= 0:
        return pool[:0], False
    if len(pool) >= k:
        return pool[rng.choice(len(pool), size=k, replace=False)], False
    return pool[rng.integers(len(pool), size=k)], True


def _draw_excluding(rng: np.random.Generator, m: int, k: int, excluded: np.ndarray) -> tuple[np.ndarray, bool]:
    """k distinct uniform items from range(m) minus the sorted ``excluded`` set."""
    available = m - len(excluded)
    if k <= 0:
        return np.zeros(0, dtype=np.int64), False
    if available < k:
        pool = np.setdiff1d(np.arange(m), excluded)
        return _draw(rng, pool, k)
    if available < 4 * k:
        pool = np.setdiff1d(np.arange(m), excluded)
        return pool[rng.choice(len(pool), size=k, replace=False)], False
    out: list[int] = []
    seen = set(excluded.tolist())
    while len(out) < k:
        for c in rng.integers(m, size=2 * (k - len(out)) + 4).tolist():
            if c not in seen:
                seen.add(c)
                out.append(c)
                if len(out) == k:
                    break
    return np.array(out, dtype=np.int64), False


def _sample_for_row(corpus: Corpus, row: int, strategy: Strategy, counts: SamplingCounts,
                    rng: np.random.Generator, counters: SamplerCounters, user_positives: int | None = None):
    """Negatives for interaction ``row``; returns (items, spaces, aux weights) or None if skipped."""
    u = int(corpus.u[row])
    k_u = user_positives if user_positives is not None else max(len(corpus.pools[SpaceLabel.POSITIVE][u]), 1)
    items, spaces, weights = [], [], []
    if strategy is Strategy.SS_ABC_RANDOM:
        clicked = corpus.pools[SpaceLabel.POSITIVE][u]
        n = counts.total
        drawn, fell_back = _draw_excluding(rng, corpus.num_items, n, clicked)
        if fell_back:
            counters.fallback_c += 1
        lab = np.full(len(drawn), SpaceLabel.C, dtype=np.int8)
        lab[np.isin(drawn, corpus.pools[SpaceLabel.A][u])] = SpaceLabel.A
        lab[np.isin(drawn, corpus.pools[SpaceLabel.B][u])] = SpaceLabel.B
        w = (corpus.num_items - len(clicked)) / (max(n, 1) * k_u)
        return drawn, lab, np.full(len(drawn), w)
    per_space = counts.per_space(strategy)
    if strategy is Strategy.SS_A and len(corpus.pools[SpaceLabel.A][u]) == 0:
        counters.skipped_positives += 1
        return None
    for label, k in per_space.items():
        if k <= 0:
            continue
        if label is SpaceLabel.C:
            excluded = corpus.recall_sets[u]
            drawn, fell_back = _draw_excluding(rng, corpus.num_items, k, excluded)
            pool_size = corpus.num_items - len(excluded)
            if fell_back:
                counters.fallback_c += 1
        else:
            pool = corpus.pools[label][u]
            pool_size = len(pool)
            if pool_size == 0:
                if label is SpaceLabel.A:
                    counters.empty_a += 1
                else:
                    counters.empty_b += 1
                continue
            drawn, fell_back = _draw(rng, pool, k)
            if fell_back:
                if label is SpaceLabel.A:
                    counters.fallback_a += 1
                else:
                    counters.fallback_b += 1
        items.append(drawn)
        spaces.append(np.full(len(drawn), label, dtype=np.int8))
        weights.append(np.full(len(drawn), pool_size / (k * k_u)))
    if not items:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int8), np.zeros(0)
    return np.concatenate(items), np.concatenate(spaces), np.concatenate(weights)


def sample_negatives(corpus: Corpus, positive: InteractionRecord, strategy, counts: SamplingCounts | None = None,
                     rng: np.random.Generator | None = None, counters: SamplerCounters | None = None) -> list[InteractionRecord]:
    """Negatives for a single clicked record, as :class:`InteractionRecord` objects."""
    if positive.y != 1:
        raise ValueError("sample_negatives needs a clicked (y = 1) record")
    strategy = Strategy(strategy)
    counts = counts or SamplingCounts()
    rng = rng if rng is not None else np.random.default_rng()
    counters = counters if counters is not None else SamplerCounters()
    u = int(corpus.user_index(positive.user_id))
    i = int(corpus.item_index(positive.item_id))
    rows = np.flatnonzero((corpus.u == u) & (corpus.i == i))
    if len(rows) == 0:
        raise IntegrityError(f"positive ({positive.user_id}, {positive.item_id}) is not in the corpus")
    res = _sample_for_row(corpus, int(rows[0]), strategy, counts, rng, counters)
    if res is None:
        return []
    items, spaces, _ = res
    uid = positive.user_id
    return [
        InteractionRecord(uid, int(corpus.item_ids[it]), 0, int(sp != SpaceLabel.C), SpaceLabel(int(sp)))
        for it, sp in zip(items, spaces)
    ]


def positives_per_batch(batch_size: int, negatives_per_positive: int) -> int:
    return math.ceil(batch_size / (1 + negatives_per_positive))


def build_batches(corpus: Corpus, strategy, batch_size: int, rng: np.random.Generator,
                  counts: SamplingCounts | None = None, counters: SamplerCounters | None = None,
                  positive_rows: np.ndarray | None = None) -> Iterator[TrainingBatch]:
    """Shuffle the positives once with ``rng`` and yield batches with sampled negatives.

    The permutation is drawn before any negative, so runs that share a seed
    see the same positive order whatever the strategy.
    """
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    strategy = Strategy(strategy)
    counts = counts or SamplingCounts()
    counters = counters if counters is not None else SamplerCounters()
    rows = corpus.positives() if positive_rows is None else np.asarray(positive_rows)
    if len(rows) == 0:
        raise ValueError("corpus has no positives to train on")
    per_user = np.bincount(corpus.u[rows], minlength=corpus.num_users)
    rows = rows[rng.permutation(len(rows))]
    per_batch = positives_per_batch(batch_size, counts.negatives_per_positive(strategy))
    for start in range(0, len(rows), per_batch):
        parts = []
        for g, row in enumerate(rows[start:start + per_batch]):
            u = int(corpus.u[row])
            res = _sample_for_row(corpus, int(row), strategy, counts, rng, counters, user_positives=int(per_user[u]))
            if res is None:
                continue
            items, spaces, aux = res
            n = len(items) + 1
            parts.append(TrainingBatch(
                user=np.full(n, u, dtype=np.int64),
                item=np.concatenate([[corpus.i[row]], items]).astype(np.int64),
                y=np.concatenate([[1.0], np.zeros(len(items))]),
                space=np.concatenate([[SpaceLabel.POSITIVE], spaces]).astype(np.int8),
                ipw_weight=np.ones(n),
                aux_weight=np.concatenate([[1.0], aux]),
                strategy=strategy,
                group=np.zeros(n, dtype=np.int64),
            ))
        if parts:
            yield TrainingBatch.concat(parts, strategy)
