"""Synthetic entire -> recall -> exposure -> click traffic with known propensities."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy.optimize import brentq

from .tensor import sigmoid

LOG_SCHEMA = "#schema=uma2-log-v1"
ORACLE_SCHEMA = "#schema=uma2-oracle-v1"
LOG_COLUMNS = ("user_id", "item_id", "clicked", "exposed", "recalled", "user_features", "item_features")
FEATURE_NOISE = 0.1
FEATURE_DECIMALS = 6
_BLOCK_USERS = 512


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending key."""


@dataclass
class FunnelConfig:
    num_users: int = 2000
    num_items: int = 1000
    latent_dim: int = 8
    recall_temperature: float = 8.0
    exposure_temperature: float = 4.0
    click_temperature: float = 4.0
    click_bias: float = -4.0
    avg_recall_size: int = 100
    avg_exposure_size: int = 20
    seed: int = 0

    def validate(self) -> None:
        for key in ("num_users", "num_items", "latent_dim"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"sim.{key} must be positive, got {getattr(self, key)}")
        for key in ("recall_temperature", "exposure_temperature", "click_temperature"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"sim.{key} must be > 0, got {getattr(self, key)}")
        if not 0 < self.avg_exposure_size <= self.avg_recall_size <= self.num_items:
            raise ConfigError(
                "sim.avg_exposure_size <= sim.avg_recall_size <= sim.num_items violated: "
                f"{self.avg_exposure_size}, {self.avg_recall_size}, {self.num_items}"
            )


@dataclass
class World:
    user_latent: np.ndarray
    item_latent: np.ndarray
    user_features: np.ndarray
    item_features: np.ndarray
    affinity: np.ndarray
    recall_bias: float
    exposure_bias: float
    click_bias: float
    config: FunnelConfig

    @property
    def user_ids(self) -> np.ndarray:
        return np.arange(self.config.num_users, dtype=np.int64)

    @property
    def item_ids(self) -> np.ndarray:
        return np.arange(self.config.num_items, dtype=np.int64)

    def true_p1(self, users=None, items=None) -> np.ndarray:
        aff = self._aff(users, items)
        return sigmoid(self.config.recall_temperature * aff + self.recall_bias)

    def true_p2(self, users=None, items=None) -> np.ndarray:
        aff = self._aff(users, items)
        return sigmoid(self.config.exposure_temperature * aff + self.exposure_bias)

    def click_prob(self, users=None, items=None) -> np.ndarray:
        aff = self._aff(users, items)
        return sigmoid(self.config.click_temperature * aff + self.click_bias)

    def _aff(self, users, items):
        if users is None and items is None:
            return self.affinity
        if users is None:
            return self.affinity[:, items]
        if items is None:
            return self.affinity[users]
        return self.affinity[users, items]


@dataclass(frozen=True)
class OracleRecord:
    user_id: int
    item_id: int
    true_p1: float
    true_p2: float
    recalled: bool
    exposed: bool
    clicked: bool


@dataclass
class FunnelLog:
    """Column-oriented batch of :class:`OracleRecord`."""

    user: np.ndarray
    item: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    recalled: np.ndarray
    exposed: np.ndarray
    clicked: np.ndarray

    def __len__(self) -> int:
        return len(self.user)

    def __iter__(self) -> Iterator[OracleRecord]:
        for k in range(len(self.user)):
            yield OracleRecord(
                int(self.user[k]), int(self.item[k]), float(self.p1[k]), float(self.p2[k]),
                bool(self.recalled[k]), bool(self.exposed[k]), bool(self.clicked[k]),
            )

    def take(self, mask) -> "FunnelLog":
        return FunnelLog(*(getattr(self, f)[mask] for f in self._fields()))

    @staticmethod
    def _fields():
        return ("user", "item", "p1", "p2", "recalled", "exposed", "clicked")

    @classmethod
    def concat(cls, logs: list["FunnelLog"]) -> "FunnelLog":
        if not logs:
            return cls.empty()
        return cls(*(np.concatenate([getattr(g, f) for g in logs]) for f in cls._fields()))

    @classmethod
    def empty(cls) -> "FunnelLog":
        i = np.zeros(0, dtype=np.int64)
        f = np.zeros(0, dtype=np.float64)
        b = np.zeros(0, dtype=bool)
        return cls(i, i.copy(), f, f.copy(), b, b.copy(), b.copy())

    @classmethod
    def from_records(cls, records: Iterable[OracleRecord]) -> "FunnelLog":
        if isinstance(records, FunnelLog):
            return records
        rows = list(records)
        if not rows:
            return cls.empty()
        return cls(
            np.array([r.user_id for r in rows], dtype=np.int64),
            np.array([r.item_id for r in rows], dtype=np.int64),
            np.array([r.true_p1 for r in rows], dtype=np.float64),
            np.array([r.true_p2 for r in rows], dtype=np.float64),
            np.array([r.recalled for r in rows], dtype=bool),
            np.array([r.exposed for r in rows], dtype=bool),
            np.array([r.clicked for r in rows], dtype=bool),
        )


def affinity_matrix(user_latent: np.ndarray, item_latent: np.ndarray) -> np.ndarray:
    return np.asarray(user_latent) @ np.asarray(item_latent).T


def _solve_bias(scaled: np.ndarray, target_mean: float) -> float:
    # mean_{pairs} sigmoid(scaled + b) == target_mean, monotone in b
    def f(b):
        return float(np.mean(sigmoid(scaled + b))) - target_mean

    lo, hi = -60.0, 60.0
    return brentq(f, lo, hi, xtol=1e-12, rtol=1e-12)


def generate_world(config: FunnelConfig) -> World:
    """Draw latents, noisy observable features, and calibrate the funnel biases.

    Recall bias is solved so the expected recall-set size per user equals
    ``avg_recall_size``; exposure bias so the expected exposure-set size
    (``sum p1 * p2``) equals ``avg_exposure_size``.
    """
    config.validate()
    rng = np.random.default_rng([config.seed, 0])
    n, m, d = config.num_users, config.num_items, config.latent_dim
    scale = 1.0 / np.sqrt(d)
    user_latent = rng.standard_normal((n, d)) * scale
    item_latent = rng.standard_normal((m, d)) * scale
    user_features = np.round(user_latent + FEATURE_NOISE * rng.standard_normal((n, d)), FEATURE_DECIMALS)
    item_features = np.round(item_latent + FEATURE_NOISE * rng.standard_normal((m, d)), FEATURE_DECIMALS)
    aff = affinity_matrix(user_latent, item_latent)

    recall_bias = _solve_bias(config.recall_temperature * aff, config.avg_recall_size / m)
    p1 = sigmoid(config.recall_temperature * aff + recall_bias)
    scaled_e = config.exposure_temperature * aff

    def exposure_gap(b):
        return float(np.mean(p1 * sigmoid(scaled_e + b))) - config.avg_exposure_size / m

    exposure_bias = brentq(exposure_gap, -60.0, 60.0, xtol=1e-12, rtol=1e-12)
    return World(
        user_latent, item_latent, user_features, item_features, aff,
        float(recall_bias), float(exposure_bias), float(config.click_bias), config,
    )


def roll_funnel_log(world: World, rng: np.random.Generator, recalled_only: bool = True) -> FunnelLog:
    """One independent pass of every (user, item) pair through the funnel.

    Random draws are identical whether or not ``recalled_only`` filters the
    output, so the filter never changes what gets recalled.
    """
    m = world.config.num_items
    logs = []
    for start in range(0, world.config.num_users, _BLOCK_USERS):
        users = np.arange(start, min(start + _BLOCK_USERS, world.config.num_users))
        p1 = world.true_p1(users)
        p2 = world.true_p2(users)
        pc = world.click_prob(users)
        shape = p1.shape
        recalled = rng.random(shape) < p1
        exposed = recalled & (rng.random(shape) < p2)
        clicked = exposed & (rng.random(shape) < pc)
        uu = np.repeat(users, m)
        ii = np.tile(np.arange(m), len(users))
        block = FunnelLog(uu, ii, p1.ravel(), p2.ravel(), recalled.ravel(), exposed.ravel(), clicked.ravel())
        if recalled_only:
            block = block.take(block.recalled)
        logs.append(block)
    return FunnelLog.concat(logs)


def roll_funnel(world: World, rng: np.random.Generator, recalled_only: bool = False) -> Iterator[OracleRecord]:
    """Stream :class:`OracleRecord` for every pair (or only recalled ones)."""
    yield from roll_funnel_log(world, rng, recalled_only=recalled_only)


def add_coverage_records(log: FunnelLog, world: World, rng: np.random.Generator) -> FunnelLog:
    """Append one un-recalled record for every user and item missing from ``log``.

    Log lines are the only carrier of features, so a user or item that was
    never recalled would otherwise vanish from the ingested corpus.
    """
    n, m = world.config.num_users, world.config.num_items
    recalled_pairs = set(zip(log.user.tolist(), log.item.tolist()))
    extra_u, extra_i = [], []
    for item in np.setdiff1d(np.arange(m), log.item):
        while True:
            u = int(rng.integers(n))
            if (u, int(item)) not in recalled_pairs:
                break
        extra_u.append(u)
        extra_i.append(int(item))
        recalled_pairs.add((u, int(item)))
    for user in np.setdiff1d(np.arange(n), np.concatenate([log.user, np.array(extra_u, dtype=np.int64)])):
        while True:
            i = int(rng.integers(m))
            if (int(user), i) not in recalled_pairs:
                break
        extra_u.append(int(user))
        extra_i.append(i)
        recalled_pairs.add((int(user), i))
    if not extra_u:
        return log
    uu = np.array(extra_u, dtype=np.int64)
    ii = np.array(extra_i, dtype=np.int64)
    no = np.zeros(len(uu), dtype=bool)
    extra = FunnelLog(uu, ii, world.true_p1(uu, ii), world.true_p2(uu, ii), no, no.copy(), no.copy())
    return FunnelLog.concat([log, extra])


def _format_features(row: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in row)


def oracle_path(path) -> Path:
    return Path(path).with_suffix(".oracle")


def write_logs(records, path, user_features, item_features, include_oracle: bool = False) -> Path:
    """Write records in the ``uma2-log-v1`` tab-separated format.

    ``user_features`` / ``item_features`` are indexed by id (row ``k`` holds the
    features of id ``k``). Oracle propensities go to a ``.oracle`` sidecar, only
    when ``include_oracle`` is set.
    """
    log = FunnelLog.from_records(records)
    path = Path(path)
    user_cache: dict[int, str] = {}
    item_cache: dict[int, str] = {}
    lines = [LOG_SCHEMA + "\t" + "\t".join(LOG_COLUMNS) + "\n"]
    for u, i, c, e, r in zip(
        log.user.tolist(), log.item.tolist(), log.clicked.tolist(), log.exposed.tolist(), log.recalled.tolist()
    ):
        uf = user_cache.get(u)
        if uf is None:
            uf = user_cache[u] = _format_features(user_features[u])
        itf = item_cache.get(i)
        if itf is None:
            itf = item_cache[i] = _format_features(item_features[i])
        lines.append(f"{u}\t{i}\t{int(c)}\t{int(e)}\t{int(r)}\t{uf}\t{itf}\n")
    try:
        _atomic_write(path, "".join(lines))
        if include_oracle:
            rows = [ORACLE_SCHEMA + "\tuser_id\titem_id\tp1\tp2\n"]
            rows.extend(
                f"{u}\t{i}\t{p1!r}\t{p2!r}\n"
                for u, i, p1, p2 in zip(log.user.tolist(), log.item.tolist(), log.p1.tolist(), log.p2.tolist())
            )
            _atomic_write(oracle_path(path), "".join(rows))
    except OSError as exc:
        raise OSError(f"failed to write log {path}: {exc}") from exc
    return path


def read_oracle(path) -> dict[tuple[int, int], tuple[float, float]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith(ORACLE_SCHEMA):
            raise ValueError(f"{path}: missing {ORACLE_SCHEMA} header")
        for line in fh:
            u, i, p1, p2 = line.rstrip("\n").split("\t")
            out[(int(u), int(i))] = (float(p1), float(p2))
    return out


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
