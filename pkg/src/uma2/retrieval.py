"""Brute-force top-K inner-product retrieval and HitRate/Precision/Recall@K.

Metrics are per-user macro averages: with P_u the user's test positives and
T_u the top-K list, hits_u = |P_u & T_u|,

* HitRate@K   = fraction of users with hits_u >= 1
* Precision@K = mean of hits_u / K
* Recall@K    = mean of hits_u / |P_u|
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .gmm import EmbeddingTable


class RetrievalArgumentError(ValueError):
    pass


@dataclass
class RetrievalMetrics:
    k: int
    hitrate: float
    precision: float
    recall: float
    users_evaluated: int
    users_skipped: int = 0

    def as_record(self) -> dict:
        return {
            "k": self.k, "hitrate": self.hitrate, "precision": self.precision,
            "recall": self.recall, "users": self.users_evaluated,
        }


def _rank(scores: np.ndarray) -> np.ndarray:
    # rows sorted by descending score; stable so ties keep ascending column (= item id) order
    return np.argsort(-scores, axis=-1, kind="stable")


def topk(user_vec, items: EmbeddingTable, k: int, exclusions=None) -> list[int]:
    """Ids of the ``k`` best items for one user, best first, ties by ascending id."""
    excl = np.isin(items.ids, list(exclusions)) if exclusions else np.zeros(len(items), dtype=bool)
    available = len(items) - int(excl.sum())
    if k > available or k < 0:
        raise RetrievalArgumentError(f"k={k} exceeds the {available} retrievable items")
    scores = items.vectors @ np.asarray(user_vec, dtype=np.float64)
    scores = np.where(excl, -np.inf, scores)
    return items.ids[_rank(scores)[:k]].tolist()


def evaluate(positives: Mapping[int, set], users: EmbeddingTable, items: EmbeddingTable,
             k_list=(100, 200), exclusions: Mapping[int, set] | None = None,
             chunk: int = 512) -> list[RetrievalMetrics]:
    """Score every user with test positives against the full item table."""
    k_list = [int(k) for k in k_list]
    exclusions = exclusions or {}
    kmax = max(k_list)
    user_order = sorted(positives)
    skipped = sum(1 for u in user_order if not positives[u])
    user_order = [u for u in user_order if positives[u]]
    hits = {k: np.zeros(len(user_order)) for k in k_list}
    sizes = np.array([len(positives[u]) for u in user_order], dtype=np.float64)
    for start in range(0, len(user_order), chunk):
        block = user_order[start:start + chunk]
        vecs = users.lookup(np.array(block, dtype=np.int64))
        scores = vecs @ items.vectors.T
        for row, u in enumerate(block):
            excl = exclusions.get(u)
            if excl:
                scores[row, np.isin(items.ids, list(excl))] = -np.inf
                available = len(items) - int(np.isin(items.ids, list(excl)).sum())
            else:
                available = len(items)
            if kmax > available:
                raise RetrievalArgumentError(f"k={kmax} exceeds the {available} retrievable items for user {u}")
        ranked = items.ids[_rank(scores)[:, :kmax]]
        for row, u in enumerate(block):
            pos = np.array(sorted(positives[u]), dtype=np.int64)
            found = np.isin(ranked[row], pos)
            cum = np.cumsum(found)
            for k in k_list:
                hits[k][start + row] = cum[k - 1]
    out = []
    n = len(user_order)
    for k in k_list:
        h = hits[k]
        if n == 0:
            out.append(RetrievalMetrics(k, 0.0, 0.0, 0.0, 0, skipped))
            continue
        out.append(RetrievalMetrics(
            k=k,
            hitrate=float(np.sum(h >= 1) / n),
            precision=float(np.sum(h / k) / n),
            recall=float(np.sum(h / sizes) / n),
            users_evaluated=n,
            users_skipped=skipped,
        ))
    return out


def metrics_jsonl(metrics: list[RetrievalMetrics]) -> str:
    return "".join(json.dumps(m.as_record(), sort_keys=True) + "\n" for m in metrics)


def metrics_table(rows: list[tuple[str, list[RetrievalMetrics]]]) -> str:
    """Plain-text table: one row per model, HitRate / Precision / Recall blocks over K."""
    if not rows:
        return ""
    ks = [m.k for m in rows[0][1]]
    head = ["model"]
    for name in ("HitRate", "Precision", "Recall"):
        head.extend(f"{name}@{k}" for k in ks)
    body = []
    for label, ms in rows:
        by_k = {m.k: m for m in ms}
        cells = [label]
        for attr in ("hitrate", "precision", "recall"):
            cells.extend(f"{getattr(by_k[k], attr):.5f}" for k in ks)
        body.append(cells)
    widths = [max(len(r[c]) for r in [head] + body) for c in range(len(head))]
    fmt = lambda r: "  ".join(cell.ljust(w) for cell, w in zip(r, widths))
    return "\n".join([fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]) + "\n"
