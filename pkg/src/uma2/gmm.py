"""General matching model: MLP user/item towers scored by inner product.

Any tower pair exposing ``user_forward``, ``item_forward`` and ``score`` plus
the matching backward passes can stand in for :class:`MLPTwoTower`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .tensor import ShapeError, affine_backward, affine_forward, glorot_uniform

EMB_SCHEMA = "#schema=uma2-emb-v1"
DEFAULT_DIMS = (512, 256, 128, 32)

Layer = tuple[np.ndarray, np.ndarray]


@dataclass
class TwoTowerParams:
    user: list[Layer]
    item: list[Layer]

    @property
    def output_dim(self) -> int:
        return self.user[-1][0].shape[0]

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for side, layers in (("user", self.user), ("item", self.item)):
            for k, (w, b) in enumerate(layers):
                out[f"{prefix}.{side}.{k}.W"] = w
                out[f"{prefix}.{side}.{k}.b"] = b
        return out

    def copy(self) -> "TwoTowerParams":
        return TwoTowerParams(
            [(w.copy(), b.copy()) for w, b in self.user],
            [(w.copy(), b.copy()) for w, b in self.item],
        )

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray], prefix: str) -> "TwoTowerParams":
        towers = {}
        for side in ("user", "item"):
            layers = []
            k = 0
            while f"{prefix}.{side}.{k}.W" in arrays:
                layers.append((arrays[f"{prefix}.{side}.{k}.W"], arrays[f"{prefix}.{side}.{k}.b"]))
                k += 1
            towers[side] = layers
        return cls(towers["user"], towers["item"])


def init_tower(input_dim: int, dims, rng: np.random.Generator) -> list[Layer]:
    layers = []
    fan_in = input_dim
    for width in dims:
        layers.append((glorot_uniform(width, fan_in, rng), np.zeros(width)))
        fan_in = width
    return layers


def init_two_tower(user_dim: int, item_dim: int, dims=DEFAULT_DIMS, rng=None) -> TwoTowerParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    return TwoTowerParams(init_tower(user_dim, dims, rng), init_tower(item_dim, dims, rng))


def tower_forward(x, layers: list[Layer]):
    """Affine+ReLU hidden layers, plain affine output. Returns (output, caches)."""
    caches = []
    h = np.asarray(x, dtype=np.float64)
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        h, cache = affine_forward(h, w, b, relu=k < last)
        caches.append(cache)
    return h, caches


def tower_backward(grad_out, caches) -> tuple[np.ndarray, list[Layer]]:
    grads: list[Layer] = []
    g = grad_out
    for cache in reversed(caches):
        g, gw, gb = affine_backward(g, cache)
        grads.append((gw, gb))
    grads.reverse()
    return g, grads


def score(v_u, v_i):
    """Inner product along the last axis."""
    v_u = np.asarray(v_u, dtype=np.float64)
    v_i = np.asarray(v_i, dtype=np.float64)
    if v_u.shape[-1] != v_i.shape[-1]:
        raise ShapeError(f"embedding lengths differ: {v_u.shape[-1]} vs {v_i.shape[-1]}")
    out = np.sum(v_u * v_i, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


class MatchingModel(Protocol):
    def user_forward(self, f_u, params): ...
    def item_forward(self, f_i, params): ...
    def score(self, v_u, v_i): ...


class MLPTwoTower:
    """YouTube-DNN style towers."""

    def user_forward(self, f_u, params: TwoTowerParams, with_cache: bool = False):
        out, caches = tower_forward(f_u, params.user)
        return (out, caches) if with_cache else out

    def item_forward(self, f_i, params: TwoTowerParams, with_cache: bool = False):
        out, caches = tower_forward(f_i, params.item)
        return (out, caches) if with_cache else out

    def score(self, v_u, v_i):
        return score(v_u, v_i)

    def backward(self, grad_user, user_caches, grad_item, item_caches) -> TwoTowerParams:
        _, gu = tower_backward(grad_user, user_caches)
        _, gi = tower_backward(grad_item, item_caches)
        return TwoTowerParams(gu, gi)


def user_forward(f_u, params: TwoTowerParams):
    return tower_forward(f_u, params.user)[0]


def item_forward(f_i, params: TwoTowerParams):
    return tower_forward(f_i, params.item)[0]


@dataclass
class EmbeddingTable:
    ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        order = np.argsort(self.ids, kind="stable")
        if np.any(order != np.arange(len(order))):
            self.ids, self.vectors = self.ids[order], self.vectors[order]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1] if self.vectors.ndim == 2 else 0

    def lookup(self, ids) -> np.ndarray:
        pos = np.searchsorted(self.ids, ids)
        pos = np.minimum(pos, max(len(self.ids) - 1, 0))
        if len(self.ids) == 0 or np.any(self.ids[pos] != ids):
            raise KeyError(f"ids missing from embedding table: {ids}")
        return self.vectors[pos]


def embed_corpus(corpus, params: TwoTowerParams) -> tuple[EmbeddingTable, EmbeddingTable]:
    users = user_forward(corpus.user_features, params)
    items = item_forward(corpus.item_features, params)
    return EmbeddingTable(corpus.user_ids, users), EmbeddingTable(corpus.item_ids, items)


def write_embeddings(table: EmbeddingTable, path, dim: int | None = None) -> Path:
    path = Path(path)
    dim = table.dim if dim is None else dim
    lines = [f"{EMB_SCHEMA} dim={dim}\n"]
    lines.extend(
        f"{i}\t{','.join(repr(float(v)) for v in row)}\n" for i, row in zip(table.ids.tolist(), table.vectors)
    )
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.writelines(lines)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write embeddings to {path}: {exc}") from exc
    return path


def load_embeddings(path) -> EmbeddingTable:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith(EMB_SCHEMA):
            raise ValueError(f"{path}: expected {EMB_SCHEMA} header, got {header!r}")
        dim = int(header.split("dim=")[1])
        ids, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            key, _, vec = line.rstrip("\n").partition("\t")
            row = [float(v) for v in vec.split(",")] if vec else []
            if len(row) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(row)}")
            ids.append(int(key))
            rows.append(row)
    return EmbeddingTable(np.array(ids, dtype=np.int64), np.array(rows, dtype=np.float64).reshape(len(ids), dim))


def export_embeddings(corpus, params: TwoTowerParams, out_dir) -> tuple[Path, Path]:
    """Write ``users.emb`` and ``items.emb`` for every user and item in ``corpus``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dim = params.output_dim
    if corpus is None:
        empty = EmbeddingTable(np.zeros(0, dtype=np.int64), np.zeros((0, dim)))
        return write_embeddings(empty, out_dir / "users.emb", dim), write_embeddings(empty, out_dir / "items.emb", dim)
    users, items = embed_corpus(corpus, params)
    return write_embeddings(users, out_dir / "users.emb", dim), write_embeddings(items, out_dir / "items.emb", dim)
