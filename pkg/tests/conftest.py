import numpy as np
import pytest

from uma2.funnel import FunnelConfig, add_coverage_records, generate_world, roll_funnel_log
from uma2.sampling import Corpus


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        g[k] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def small_world(seed: int = 0, **overrides):
    cfg = FunnelConfig(num_users=60, num_items=40, latent_dim=4, avg_recall_size=12, avg_exposure_size=5,
                       click_bias=-1.0, seed=seed)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return generate_world(cfg)


def corpus_from_world(world, seed: int = 0):
    rng = np.random.default_rng([seed, 1])
    log = add_coverage_records(roll_funnel_log(world, rng), world, rng)
    return Corpus.from_funnel_log(log, world.user_features, world.item_features), log


@pytest.fixture(scope="session")
def tiny_world():
    return small_world()


@pytest.fixture(scope="session")
def tiny_corpus(tiny_world):
    return corpus_from_world(tiny_world)[0]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
