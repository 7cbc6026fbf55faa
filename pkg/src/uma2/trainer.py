"""Six-term multi-task objective, optimisation loop, and resumable training state."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .gmm import TwoTowerParams, init_two_tower, tower_backward, tower_forward
from .nsdn import NsdnParams, auxiliary_target_arrays, init_nsdn, ipw_weights, propensity_from_score
from .retrieval import RetrievalMetrics, evaluate
from .gmm import EmbeddingTable
from .sampling import Corpus, SamplerCounters, SpaceLabel, TrainingBatch, build_batches
from .tensor import AdamState, adam_update, bce_logits

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


class NumericalError(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)

    @classmethod
    def of(cls, values) -> "LossWeights":
        return cls(*(float(v) for v in values))


@dataclass
class LossReport:
    loss_pos: float = 0.0
    loss_a: float = 0.0
    loss_b: float = 0.0
    loss_c: float = 0.0
    loss_er: float = 0.0
    loss_re: float = 0.0
    total: float = 0.0
    weight_mean: float = 1.0
    weight_max: float = 1.0
    counters: dict = field(default_factory=dict)

    TERMS = ("loss_pos", "loss_a", "loss_b", "loss_c", "loss_er", "loss_re", "total")


@dataclass
class Model:
    gmm: TwoTowerParams
    nsdn: NsdnParams | None

    def named(self) -> dict[str, np.ndarray]:
        out = self.gmm.named("gmm")
        if self.nsdn is not None:
            out.update(self.nsdn.named())
        return out

    def copy(self) -> "Model":
        return Model(self.gmm.copy(), None if self.nsdn is None else self.nsdn.copy())


def init_model(config: RunConfig, user_dim: int, item_dim: int) -> Model:
    seed = config.train.seed
    gmm = init_two_tower(user_dim, item_dim, config.model.dims, np.random.default_rng([seed, 10]))
    nsdn = None
    if config.train.debias:
        nsdn = init_nsdn(user_dim, item_dim, config.nsdn.dims, config.nsdn.sharing_mode,
                         np.random.default_rng([seed, 11]))
    return Model(gmm, nsdn)


def model_from_named(arrays: dict[str, np.ndarray], sharing_mode: str = "fully-separate") -> Model:
    gmm = TwoTowerParams.from_named(arrays, "gmm")
    has_nsdn = any(k.startswith("nsdn.") for k in arrays)
    return Model(gmm, NsdnParams.from_named(arrays, sharing_mode) if has_nsdn else None)


def _scatter_rows(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, values.shape[1]))
    np.add.at(out, index, values)
    return out


def _pair_forward(xu, xi, u_inv, i_inv, head: TwoTowerParams):
    vu, cu = tower_forward(xu, head.user)
    vi, ci = tower_forward(xi, head.item)
    eu, ei = vu[u_inv], vi[i_inv]
    return np.sum(eu * ei, axis=1), (eu, ei, cu, ci, len(vu), len(vi))


def _pair_backward(ds: np.ndarray, saved, u_inv, i_inv) -> TwoTowerParams:
    eu, ei, cu, ci, nu, ni = saved
    gu = _scatter_rows(ds[:, None] * ei, u_inv, nu)
    gi = _scatter_rows(ds[:, None] * eu, i_inv, ni)
    _, grad_user = tower_backward(gu, cu)
    _, grad_item = tower_backward(gi, ci)
    return TwoTowerParams(grad_user, grad_item)


def _masked_mean(values: np.ndarray, mask: np.ndarray) -> float:
    n = int(mask.sum())
    return float(values[mask].sum() / n) if n else 0.0


def batch_loss(batch: TrainingBatch, corpus: Corpus, gmm: TwoTowerParams | None, nsdn: NsdnParams | None,
               weights: LossWeights | None = None, *, debias: bool = True, p_floor: float = 0.01,
               w_max: float = 100.0, propensities: tuple[np.ndarray, np.ndarray] | None = None,
               heads_only: bool = False, need_grads: bool = True) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Loss terms, total, and gradients for one batch.

    Per-term means are taken over each term's own entries (an empty set gives
    0). Propensities enter the GMM terms as constants: no gradient reaches the
    propensity heads through the IPW weights. ``propensities`` overrides the
    heads' estimates for the weights; ``heads_only`` skips the GMM terms.
    """
    weights = weights or LossWeights()
    lam = weights.as_tuple()
    u_uniq, u_inv = np.unique(batch.user, return_inverse=True)
    i_uniq, i_inv = np.unique(batch.item, return_inverse=True)
    xu = corpus.user_features[u_uniq]
    xi = corpus.item_features[i_uniq]
    space = batch.space
    report = LossReport()
    grads: dict[str, np.ndarray] = {}

    p1 = p2 = None
    if nsdn is not None:
        er_t, re_t, re_def = auxiliary_target_arrays(space)
        c = np.asarray(batch.aux_weight, dtype=np.float64)
        z1, saved1 = _pair_forward(xu, xi, u_inv, i_inv, nsdn.er)
        z2, saved2 = _pair_forward(xu, xi, u_inv, i_inv, nsdn.re)
        l1, g1 = bce_logits(er_t, z1)
        l2, g2 = bce_logits(re_t, z2)
        c_er = c.sum()
        c_re = c[re_def].sum()
        report.loss_er = float(np.sum(c * l1) / c_er) if c_er > 0 else 0.0
        report.loss_re = float(np.sum(c[re_def] * l2[re_def]) / c_re) if c_re > 0 else 0.0
        p1 = propensity_from_score(z1, p_floor)
        p2 = propensity_from_score(z2, p_floor)
        if need_grads:
            dz1 = lam[3] * c * g1 / c_er if c_er > 0 else np.zeros_like(z1)
            dz2 = np.where(re_def, lam[4] * c * g2 / c_re, 0.0) if c_re > 0 else np.zeros_like(z2)
            grads.update(nsdn.named_grads(_pair_backward(dz1, saved1, u_inv, i_inv),
                                          _pair_backward(dz2, saved2, u_inv, i_inv)))
    if propensities is not None:
        p1, p2 = (np.asarray(p, dtype=np.float64) for p in propensities)

    if not heads_only and gmm is not None:
        if debias and p1 is not None:
            w = ipw_weights(space, p1, p2, w_max)
        else:
            w = np.ones(len(batch))
        batch.ipw_weight = w
        s, saved = _pair_forward(xu, xi, u_inv, i_inv, gmm)
        lv, g = bce_logits(batch.y, s)
        masks = [space == SpaceLabel.POSITIVE, space == SpaceLabel.A, space == SpaceLabel.B, space == SpaceLabel.C]
        wl = w * lv
        report.loss_pos = _masked_mean(lv, masks[0])
        report.loss_a = _masked_mean(wl, masks[1])
        report.loss_b = _masked_mean(wl, masks[2])
        report.loss_c = _masked_mean(lv, masks[3])
        ab = masks[1] | masks[2]
        if ab.any():
            report.weight_mean = float(w[ab].mean())
            report.weight_max = float(w[ab].max())
        if need_grads:
            ds = np.zeros(len(batch))
            for mask, scale in zip(masks, (1.0, lam[0], lam[1], lam[2])):
                n = int(mask.sum())
                if n:
                    ds[mask] = scale * (w[mask] * g[mask]) / n
            grads.update(_pair_backward(ds, saved, u_inv, i_inv).named("gmm"))

    report.total = (report.loss_pos + lam[0] * report.loss_a + lam[1] * report.loss_b + lam[2] * report.loss_c
                    + lam[3] * report.loss_er + lam[4] * report.loss_re)
    terms = [getattr(report, t) for t in LossReport.TERMS]
    if not all(math.isfinite(t) for t in terms):
        dump = {"user": batch.user, "item": batch.item, "space": batch.space, "aux_weight": batch.aux_weight,
                "terms": dict(zip(LossReport.TERMS, terms))}
        raise NumericalError(f"non-finite loss term in batch: {dict(zip(LossReport.TERMS, terms))}", dump)
    return report, grads


def _hash_fraction(ids: np.ndarray) -> np.ndarray:
    """splitmix64 of each id mapped to [0, 1); stable across runs and platforms."""
    z = ids.astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def split_positives(corpus: Corpus, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """(training positive rows, validation positive rows); validation users chosen by id hash."""
    rows = corpus.positives()
    val_user = _hash_fraction(corpus.user_ids) < val_fraction
    held = val_user[corpus.u[rows]]
    return rows[~held], rows[held]


def embed(corpus: Corpus, gmm: TwoTowerParams) -> tuple[EmbeddingTable, EmbeddingTable]:
    users = tower_forward(corpus.user_features, gmm.user)[0]
    items = tower_forward(corpus.item_features, gmm.item)[0]
    return EmbeddingTable(corpus.user_ids, users), EmbeddingTable(corpus.item_ids, items)


def positives_by_user(corpus: Corpus, rows: np.ndarray) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {}
    for u, i in zip(corpus.user_ids[corpus.u[rows]].tolist(), corpus.item_ids[corpus.i[rows]].tolist()):
        out.setdefault(u, set()).add(i)
    return out


def evaluate_model(gmm: TwoTowerParams, train: Corpus, test: Corpus, k_list=(100, 200),
                   exclude_train_positives: bool = True) -> list[RetrievalMetrics]:
    """Entire-space retrieval metrics on the clicks of ``test`` (resolved against ``train``)."""
    train_pos = train.clicked_items_by_user()
    test_pos = positives_by_user(test, test.positives())
    if exclude_train_positives:
        test_pos = {u: items - train_pos.get(u, set()) for u, items in test_pos.items()}
        exclusions = train_pos
    else:
        exclusions = None
    users, items = embed(train, gmm)
    return evaluate(test_pos, users, items, k_list, exclusions)


@dataclass
class TrainState:
    model: Model
    adam: dict[str, AdamState]
    epoch: int = 0  # next epoch to run
    history: list[dict] = field(default_factory=list)
    best: Model | None = None
    best_score: float = -1.0
    best_epoch: int = -1
    bad_epochs: int = 0
    reference_loss: float | None = None
    divergence_strikes: int = 0
    stopped: bool = False
    counters: dict = field(default_factory=dict)

    def to_checkpoint(self, config: RunConfig) -> tuple[dict[str, np.ndarray], dict]:
        arrays = dict(self.model.named())
        for name, st in self.adam.items():
            arrays[f"adam.m.{name}"] = st.m
            arrays[f"adam.v.{name}"] = st.v
        if self.best is not None:
            arrays.update({f"best.{k}": v for k, v in self.best.named().items()})
        meta = {
            "kind": "train-state",
            "config": config.to_flat(),
            "epoch": self.epoch,
            "history": self.history,
            "best_score": self.best_score,
            "best_epoch": self.best_epoch,
            "bad_epochs": self.bad_epochs,
            "reference_loss": self.reference_loss,
            "divergence_strikes": self.divergence_strikes,
            "stopped": self.stopped,
            "counters": self.counters,
            "adam_steps": {k: st.step for k, st in self.adam.items()},
        }
        return arrays, meta

    @classmethod
    def from_checkpoint(cls, arrays: dict[str, np.ndarray], meta: dict, config: RunConfig) -> "TrainState":
        sharing = config.nsdn.sharing_mode
        params = {k: v for k, v in arrays.items() if k.startswith(("gmm.", "nsdn."))}
        model = model_from_named(params, sharing)
        named = model.named()
        adam = {}
        for name, arr in named.items():
            adam[name] = AdamState(arrays[f"adam.m.{name}"].copy(), arrays[f"adam.v.{name}"].copy(),
                                   step=int(meta["adam_steps"][name]), lr=config.train.lr)
        best_arrays = {k[5:]: v for k, v in arrays.items() if k.startswith("best.")}
        best = model_from_named(best_arrays, sharing) if best_arrays else None
        return cls(model, adam, meta["epoch"], meta["history"], best, meta["best_score"], meta["best_epoch"],
                   meta["bad_epochs"], meta["reference_loss"], meta["divergence_strikes"], meta["stopped"],
                   meta["counters"])


def save_model(path, model: Model, config: RunConfig, extra: dict | None = None) -> Path:
    meta = {"kind": "model", "config": config.to_flat()}
    if extra:
        meta.update(extra)
    return save_checkpoint(path, model.named(), meta)


def load_model(path) -> tuple[Model, RunConfig, dict]:
    """Model parameters (the best snapshot for train-state files) and the stored config."""
    from .config import from_flat, _format

    arrays, meta = load_checkpoint(path)
    config = from_flat({k: _format(v) for k, v in meta["config"].items()})
    sharing = config.nsdn.sharing_mode
    if meta.get("kind") == "train-state" and any(k.startswith("best.") for k in arrays):
        arrays = {k[5:]: v for k, v in arrays.items() if k.startswith("best.")}
    params = {k: v for k, v in arrays.items() if k.startswith(("gmm.", "nsdn."))}
    return model_from_named(params, sharing), config, meta


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    state: TrainState
    best_epoch: int


def _epoch_means(reports: list[LossReport]) -> dict[str, float]:
    out = {}
    for t in LossReport.TERMS:
        out[t] = float(np.mean([getattr(r, t) for r in reports])) if reports else 0.0
    out["weight_mean"] = float(np.mean([r.weight_mean for r in reports])) if reports else 1.0
    out["weight_max"] = float(max((r.weight_max for r in reports), default=1.0))
    return out


def train(corpus: Corpus, config: RunConfig, out_dir=None, resume: TrainState | str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None, stop_after: int | None = None) -> TrainResult:
    """Joint optimisation of the GMM and propensity heads.

    Each epoch reshuffles the training positives with an rng derived from
    ``(train.seed, epoch)``, so a resumed run replays the same batches. After
    every epoch the model is scored by Recall@``val_k`` on held-out users;
    training stops after ``patience`` epochs without improvement.
    ``stop_after`` ends the call after that many epochs (used to test resume).
    """
    tc = config.train
    weights = LossWeights.of(tc.lambdas)
    counts = config.sampling.counts()
    train_rows, val_rows = split_positives(corpus, tc.val_fraction)
    if len(train_rows) == 0:
        raise ValueError("corpus has no training positives")
    val_pos = positives_by_user(corpus, val_rows)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if isinstance(resume, (str, Path)):
        arrays, meta = load_checkpoint(resume)
        state = TrainState.from_checkpoint(arrays, meta, config)
    elif resume is not None:
        state = resume
    else:
        model = init_model(config, corpus.user_features.shape[1], corpus.item_features.shape[1])
        adam = {name: AdamState.like(arr, lr=tc.lr) for name, arr in model.named().items()}
        state = TrainState(model, adam)

    ran = 0
    while state.epoch < tc.epochs and not state.stopped:
        if stop_after is not None and ran >= stop_after:
            break
        epoch = state.epoch
        warm = epoch < tc.warmup_epochs
        rng = np.random.default_rng([tc.seed, 1000 + epoch])
        counters = SamplerCounters()
        reports = []
        params = state.model.named()
        for batch in build_batches(corpus, config.sampling.strategy, tc.batch_size, rng, counts, counters,
                                   positive_rows=train_rows):
            report, grads = batch_loss(
                batch, corpus, state.model.gmm, state.model.nsdn, weights,
                debias=tc.debias and not warm, p_floor=config.nsdn.p_floor, w_max=config.nsdn.w_max,
                heads_only=warm,
            )
            for name, g in grads.items():
                adam_update(params[name], g, state.adam[name])
            reports.append(report)
        means = _epoch_means(reports)
        record = {"epoch": epoch, "phase": "warmup" if warm else "joint", "batches": len(reports), **means,
                  "counters": counters.as_dict()}
        for k, v in counters.as_dict().items():
            state.counters[k] = state.counters.get(k, 0) + v

        if not warm:
            if val_pos:
                users, items = embed(corpus, state.model.gmm)
                k = min(tc.val_k, corpus.num_items)
                record["val_recall"] = evaluate(val_pos, users, items, [k])[0].recall
            else:
                record["val_recall"] = None
            score = record["val_recall"] if record["val_recall"] is not None else float(epoch)
            if score > state.best_score:
                state.best_score = score
                state.best_epoch = epoch
                state.best = state.model.copy()
                state.bad_epochs = 0
                record["improved"] = True
            else:
                state.bad_epochs += 1
                record["improved"] = False
            if state.reference_loss is None:
                state.reference_loss = means["total"]
            elif means["total"] > tc.divergence_factor * state.reference_loss:
                state.divergence_strikes += 1
            else:
                state.divergence_strikes = 0
        state.history.append(record)
        state.epoch += 1
        ran += 1
        logger.info("epoch %d %s total=%.5f val_recall=%s", epoch, record["phase"], means["total"], record.get("val_recall"))
        if on_epoch is not None:
            on_epoch(record)
        if not warm and state.bad_epochs >= tc.patience:
            state.stopped = True
        if out_dir is not None:
            save_checkpoint(out_dir / "last.ckpt", *state.to_checkpoint(config))
            if record.get("improved"):
                save_model(out_dir / "best.ckpt", state.best, config, {"epoch": epoch})
        if state.divergence_strikes >= 2:
            raise DivergenceError(
                f"total loss above {tc.divergence_factor}x the initial epoch for 2 consecutive epochs", state.history)

    final = state.best if state.best is not None else state.model
    if out_dir is not None and state.best is None:
        save_model(out_dir / "best.ckpt", final, config, {"epoch": state.epoch - 1})
    return TrainResult(final, state.history, state, state.best_epoch)
