"""Propensity heads (entire->recall, recall->exposure) and IPW weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gmm import TwoTowerParams, init_tower, score, tower_forward
from .sampling import InteractionRecord, SpaceLabel
from .tensor import sigmoid

P_FLOOR = 0.01
W_MAX = 100.0
DEFAULT_DIMS = (128, 64, 32)
SHARING_MODES = ("fully-separate", "shared-input-layer")


@dataclass
class PropensityEstimates:
    p1: float
    p2: float


@dataclass
class NsdnParams:
    er: TwoTowerParams
    re: TwoTowerParams
    sharing_mode: str = "fully-separate"

    def named(self) -> dict[str, np.ndarray]:
        """Parameter arrays by name; a shared input layer appears once."""
        out = self.er.named("nsdn.er")
        for name, arr in self.re.named("nsdn.re").items():
            if self._is_shared(name):
                continue
            out[name] = arr
        if self.sharing_mode == "shared-input-layer":
            for side in ("user", "item"):
                for part in ("W", "b"):
                    out[f"nsdn.shared.{side}.0.{part}"] = out.pop(f"nsdn.er.{side}.0.{part}")
        return out

    def named_grads(self, g_er: TwoTowerParams, g_re: TwoTowerParams) -> dict[str, np.ndarray]:
        out = g_er.named("nsdn.er")
        for name, arr in g_re.named("nsdn.re").items():
            if self._is_shared(name):
                out[name.replace("nsdn.re.", "nsdn.er.", 1)] = out[name.replace("nsdn.re.", "nsdn.er.", 1)] + arr
            else:
                out[name] = arr
        if self.sharing_mode == "shared-input-layer":
            for side in ("user", "item"):
                for part in ("W", "b"):
                    out[f"nsdn.shared.{side}.0.{part}"] = out.pop(f"nsdn.er.{side}.0.{part}")
        return out

    def _is_shared(self, name: str) -> bool:
        return self.sharing_mode == "shared-input-layer" and ".0." in name

    def copy(self) -> "NsdnParams":
        er = self.er.copy()
        re = self.re.copy()
        if self.sharing_mode == "shared-input-layer":
            re.user[0] = er.user[0]
            re.item[0] = er.item[0]
        return NsdnParams(er, re, self.sharing_mode)

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray], sharing_mode: str) -> "NsdnParams":
        arrays = dict(arrays)
        if sharing_mode == "shared-input-layer":
            for side in ("user", "item"):
                for part in ("W", "b"):
                    shared = arrays[f"nsdn.shared.{side}.0.{part}"]
                    arrays[f"nsdn.er.{side}.0.{part}"] = shared
                    arrays[f"nsdn.re.{side}.0.{part}"] = shared
        er = TwoTowerParams.from_named(arrays, "nsdn.er")
        re = TwoTowerParams.from_named(arrays, "nsdn.re")
        if sharing_mode == "shared-input-layer":
            re.user[0] = er.user[0]
            re.item[0] = er.item[0]
        return cls(er, re, sharing_mode)


def init_nsdn(user_dim: int, item_dim: int, dims=DEFAULT_DIMS, sharing_mode: str = "fully-separate", rng=None) -> NsdnParams:
    if sharing_mode not in SHARING_MODES:
        raise ValueError(f"nsdn.sharing_mode must be one of {SHARING_MODES}, got {sharing_mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    er = TwoTowerParams(init_tower(user_dim, dims, rng), init_tower(item_dim, dims, rng))
    re = TwoTowerParams(init_tower(user_dim, dims, rng), init_tower(item_dim, dims, rng))
    if sharing_mode == "shared-input-layer":
        re.user[0] = er.user[0]
        re.item[0] = er.item[0]
    return NsdnParams(er, re, sharing_mode)


def propensity_from_score(s, p_floor: float = P_FLOOR):
    return np.clip(sigmoid(s), p_floor, 1.0)


def head_score(f_u, f_i, head: TwoTowerParams):
    return score(tower_forward(f_u, head.user)[0], tower_forward(f_i, head.item)[0])


def predict_p1(f_u, f_i, params: NsdnParams, p_floor: float = P_FLOOR):
    return propensity_from_score(head_score(f_u, f_i, params.er), p_floor)


def predict_p2(f_u, f_i, params: NsdnParams, p_floor: float = P_FLOOR):
    return propensity_from_score(head_score(f_u, f_i, params.re), p_floor)


def ipw_weights(space, p1, p2, w_max: float = W_MAX) -> np.ndarray:
    """Vectorised :func:`ipw_weight`."""
    space = np.asarray(space)
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    w = np.ones(np.broadcast(space, p1, p2).shape)
    a = space == SpaceLabel.A
    b = space == SpaceLabel.B
    w = np.where(a, 1.0 / (p1 * p2), w)
    w = np.where(b, 1.0 / p1, w)
    return np.minimum(w, w_max)


def ipw_weight(space: SpaceLabel, est: PropensityEstimates, w_max: float = W_MAX) -> float:
    """1/(p1 p2) for Space A, 1/p1 for Space B, 1 otherwise; capped at ``w_max``."""
    return float(ipw_weights(space, est.p1, est.p2, w_max))


def entire_space_ipw_sum(observed, errors, propensities) -> float:
    """Sum over every (u, i) of o * e / p-hat; unobserved pairs contribute exact zeros."""
    o = np.asarray(observed, dtype=np.float64).ravel()
    terms = o * np.asarray(errors, dtype=np.float64).ravel() / np.asarray(propensities, dtype=np.float64).ravel()
    return math.fsum(terms.tolist())


def observed_ipw_sum(errors, propensities) -> float:
    """Sum of e / p-hat over the observed pairs only."""
    terms = np.asarray(errors, dtype=np.float64).ravel() / np.asarray(propensities, dtype=np.float64).ravel()
    return math.fsum(terms.tolist())


def ipw_estimates(observed, errors, propensities) -> tuple[float, float]:
    """Entire-space IPW mean (1/|D|) sum o e / p, and the same value from observed pairs only.

    The second is (1/|O|) sum_O e / p rescaled by |O| / |D|; the two agree
    exactly because the unobserved terms are exact zeros.
    """
    o = np.asarray(observed, dtype=bool)
    e = np.asarray(errors, dtype=np.float64)
    p = np.asarray(propensities, dtype=np.float64)
    n_d, n_o = o.size, int(o.sum())
    entire = entire_space_ipw_sum(o, e, p) / n_d
    observed = observed_ipw_sum(e[o], p[o]) / n_d if n_o else 0.0
    return entire, observed


def auxiliary_targets(record: InteractionRecord) -> tuple[int | None, int | None]:
    """(entire->recall target, recall->exposure target); None where undefined."""
    er = 1 if record.o == 1 else 0
    if record.space == SpaceLabel.C:
        return er, None
    return er, 1 if record.space in (SpaceLabel.POSITIVE, SpaceLabel.A) else 0


def auxiliary_target_arrays(space) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Arrays (er_target, re_target, re_defined) for a vector of space labels."""
    space = np.asarray(space)
    er = (space != SpaceLabel.C).astype(np.float64)
    re_defined = space != SpaceLabel.C
    re = ((space == SpaceLabel.POSITIVE) | (space == SpaceLabel.A)).astype(np.float64)
    return er, re, re_defined
