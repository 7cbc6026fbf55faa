"""Glue between the simulator, the trainer and the metrics, shared by the CLI and scripts."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .funnel import (FunnelConfig, FunnelLog, World, add_coverage_records, generate_world, oracle_path,
                     roll_funnel_log, write_logs)
from .sampling import Corpus, ingest_logs
from .trainer import TrainResult, evaluate_model, train

TRAIN_LOG = "train.log"
TEST_LOG = "test.log"


@dataclass
class SimulatedData:
    world: World
    train_log: FunnelLog
    test_log: FunnelLog
    train: Corpus
    test: Corpus


def resolve_test(test_log: FunnelLog, train: Corpus) -> Corpus:
    """Index a second roll of the funnel against the training corpus."""
    return Corpus(train.user_ids, train.user_features, train.item_ids, train.item_features,
                  train.user_index(test_log.user), train.item_index(test_log.item),
                  test_log.clicked, test_log.exposed, test_log.recalled)


def simulate(cfg: FunnelConfig) -> SimulatedData:
    """World, training log (with coverage records) and an independent test roll."""
    cfg.validate()
    world = generate_world(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    train_log = add_coverage_records(roll_funnel_log(world, rng), world, rng)
    test_log = roll_funnel_log(world, np.random.default_rng([cfg.seed, 2]))
    train_c = Corpus.from_funnel_log(train_log, world.user_features, world.item_features)
    return SimulatedData(world, train_log, test_log, train_c, resolve_test(test_log, train_c))


def write_simulation(data: SimulatedData, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, log in ((TRAIN_LOG, data.train_log), (TEST_LOG, data.test_log)):
        p = write_logs(log, out_dir / name, data.world.user_features, data.world.item_features, include_oracle=True)
        paths += [p, oracle_path(p)]
    return paths


def load_data(data_dir) -> tuple[Corpus, Corpus]:
    data_dir = Path(data_dir)
    train_c = ingest_logs(data_dir / TRAIN_LOG)
    return train_c, ingest_logs(data_dir / TEST_LOG, reference=train_c)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def metric_ks(config: RunConfig, num_items: int, extra=(50,)) -> list[int]:
    return sorted(k for k in set(config.eval.k) | set(extra) if k <= num_items)


def run_cell(data: SimulatedData, config: RunConfig, strategy: str, debias: bool,
             k_list=None, out_dir=None) -> tuple[TrainResult, list]:
    """Train one (strategy, debias) cell and score it on the test roll."""
    cfg = config.replace(**{"sampling.strategy": strategy, "train.debias": debias})
    result = train(data.train, cfg, out_dir=out_dir)
    ks = k_list or metric_ks(cfg, data.train.num_items)
    metrics = evaluate_model(result.model.gmm, data.train, data.test, ks, cfg.eval.exclude_train_positives)
    return result, metrics


@dataclass
class CalibrationReport:
    p1_mae_entire: float  # fresh uniform draws over the entire space
    p2_mae_recalled: float  # held-out recalled pairs
    p1_mae_recalled: float  # informational: selected on the recall outcome itself
    p1_mae_constant: float  # constant avg_recall / M on the same entire-space pairs
    p2_mae_constant: float  # constant avg_exposure / avg_recall on the same recalled pairs
    pairs_entire: int
    pairs_recalled: int
    epochs: int

    def worst(self) -> float:
        """Largest of the two scored errors; each head is scored on the population it models."""
        return max(self.p1_mae_entire, self.p2_mae_recalled)


def calibration_config(config: RunConfig, epochs: int = 5) -> RunConfig:
    """Heads-only training: every epoch is a warm-up epoch, so only the propensity heads learn."""
    return config.replace(**{"train.epochs": epochs, "train.warmup_epochs": epochs, "train.debias": True})


def calibrate(data: SimulatedData, config: RunConfig, epochs: int = 5, num_pairs: int = 200_000,
              seed: int = 0) -> CalibrationReport:
    """Mean |predicted - oracle| propensity on pairs the heads never trained on.

    p1 is scored on fresh uniform draws over users x items. Dropping the pairs
    that appear in the training log would select on the recall outcome, so
    they are kept.
    p2 is conditional on recall, so it is scored on pairs recalled in the
    independent test roll and absent from the training log. The p1 error on
    those recalled pairs is reported too, but it is not a fair target: picking
    pairs by their recall outcome shifts the oracle p1 upward for any fixed
    features, which no feature-based predictor can follow.
    """
    from .nsdn import predict_p1, predict_p2

    cfg = calibration_config(config, epochs)
    result = train(data.train, cfg)
    heads = result.model.nsdn
    floor = cfg.nsdn.p_floor
    world, tr = data.world, data.train
    # training corpus rows are indexed by position; world ids are feature rows
    seen = set((tr.user_ids[tr.u] * world.config.num_items + tr.item_ids[tr.i]).tolist())
    key = data.test_log.user * world.config.num_items + data.test_log.item
    held = np.fromiter((k not in seen for k in key.tolist()), dtype=bool, count=len(key))
    log = data.test_log.take(held)
    fu, fi = world.user_features[log.user], world.item_features[log.item]
    p1_rec = np.abs(predict_p1(fu, fi, heads, floor) - log.p1)
    p2_rec = np.abs(predict_p2(fu, fi, heads, floor) - log.p2)
    rng = np.random.default_rng([seed, 20])
    u = rng.integers(world.config.num_users, size=num_pairs)
    i = rng.integers(world.config.num_items, size=num_pairs)
    oracle_p1 = world.true_p1(u, i)
    p1_all = np.abs(predict_p1(world.user_features[u], world.item_features[i], heads, floor) - oracle_p1)
    sim = world.config
    const1 = np.abs(sim.avg_recall_size / sim.num_items - oracle_p1).mean()
    const2 = np.abs(sim.avg_exposure_size / sim.avg_recall_size - log.p2).mean()
    return CalibrationReport(float(p1_all.mean()), float(p2_rec.mean()), float(p1_rec.mean()), float(const1),
                             float(const2), num_pairs, int(held.sum()), epochs)
