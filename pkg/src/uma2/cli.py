"""Command-line entry point: simulate, train, evaluate, export, ablation.

Exit codes: 0 success, 2 usage or config error, 3 divergence, 4 partial
ablation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError
from .config import RunConfig, load_config, write_config
from .funnel import ConfigError
from .gmm import export_embeddings
from .pipeline import load_data, metric_ks, run_cell, simulate, write_simulation
from .retrieval import RetrievalArgumentError, metrics_jsonl, metrics_table
from .sampling import IntegrityError, LogParseError, STRATEGIES
from .trainer import DivergenceError, NumericalError, evaluate_model, load_model, save_model, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4
ABLATION_K = 50

log = logging.getLogger("uma2")


class UsageError(Exception):
    pass


class Manifest:
    """Line-delimited JSON run record; the final line is always written, even on failure."""

    def __init__(self, path: Path, command: str, config: RunConfig | None, seed):
        self.path = path
        self.outputs: list[str] = []
        self.counters: dict = {}
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", encoding="utf-8")
        self.write({"type": "start", "command": command, "version": __version__, "seed": seed,
                    "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                    "config": config.to_flat() if config is not None else None})

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def add(self, *paths) -> None:
        self.outputs.extend(str(p) for p in paths)

    def close(self, status: str, error: str | None = None) -> None:
        self.write({"type": "end", "status": status, "error": error, "outputs": self.outputs,
                    "warnings": self.counters, "ended": time.strftime("%Y-%m-%dT%H:%M:%S%z")})
        self._fh.close()


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["sim.seed"] = out["train.seed"] = str(args.seed)
    return out


def _config(args, fallback: Path | None = None) -> RunConfig:
    path = args.config
    if path is None and fallback is not None and fallback.exists():
        path = fallback
    if path is not None and not Path(path).exists():
        raise UsageError(f"config file not found: {path}")
    return load_config(path, _overrides(args))


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out(args, "data")
    manifest = Manifest(out / "manifest.jsonl", "simulate", cfg, cfg.sim.seed)
    try:
        data = simulate(cfg.sim)
        manifest.add(*write_simulation(data, out), write_config(cfg, out / "config.ini"))
        stats = {"records": len(data.train_log), "clicks": int(data.train_log.clicked.sum()),
                 "test_records": len(data.test_log), "test_clicks": int(data.test_log.clicked.sum())}
        manifest.write({"type": "stats", **stats})
        if not args.quiet:
            print(f"wrote {out}: " + ", ".join(f"{k}={v}" for k, v in stats.items()))
    except BaseException as exc:
        manifest.close("failed", repr(exc))
        raise
    manifest.close("ok")
    return EXIT_OK


def _print_epoch(record: dict, quiet: bool) -> None:
    if quiet:
        return
    if record["epoch"] == 0:
        print(f"{'epoch':>5} {'phase':>6} {'loss+':>8} {'lossA':>8} {'lossB':>8} {'lossC':>8} "
              f"{'lossER':>8} {'lossRE':>8} {'total':>8} {'w_mean':>7} {'val_R':>7}")
    vr = record.get("val_recall")
    print(f"{record['epoch']:>5} {record['phase']:>6} {record['loss_pos']:8.4f} {record['loss_a']:8.4f} "
          f"{record['loss_b']:8.4f} {record['loss_c']:8.4f} {record['loss_er']:8.4f} {record['loss_re']:8.4f} "
          f"{record['total']:8.4f} {record['weight_mean']:7.2f} {'-' if vr is None else f'{vr:.4f}':>7}",
          flush=True)


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    over = {}
    if args.strategy:
        over["sampling.strategy"] = args.strategy
    if args.debias:
        over["train.debias"] = args.debias == "on"
    if args.epochs is not None:
        over["train.epochs"] = args.epochs
    cfg = _config(args, data_dir / "config.ini").replace(**over).validate()
    out = _out(args, "run")
    manifest = Manifest(out / "manifest.jsonl", "train", cfg, cfg.train.seed)
    try:
        if not (data_dir / "train.log").exists():
            raise UsageError(f"training log not found: {data_dir / 'train.log'}")
        train_c, test_c = load_data(data_dir)

        def on_epoch(record):
            manifest.write({"type": "epoch", **record})
            _print_epoch(record, args.quiet)

        result = train(train_c, cfg, out_dir=out, on_epoch=on_epoch)
        manifest.counters = result.state.counters
        manifest.add(out / "best.ckpt")
        if result.history:
            manifest.add(out / "last.ckpt")
        metrics = evaluate_model(result.model.gmm, train_c, test_c, metric_ks(cfg, train_c.num_items, ()),
                                 cfg.eval.exclude_train_positives)
        (out / "metrics.jsonl").write_text(metrics_jsonl(metrics), encoding="utf-8")
        manifest.add(out / "metrics.jsonl")
        for m in metrics:
            manifest.write({"type": "metrics", **m.as_record()})
        if not args.quiet:
            print(metrics_table([(f"{cfg.sampling.strategy}/{'debias' if cfg.train.debias else 'uniform'}",
                                  metrics)]))
        for line in _counter_warnings(result.state.counters):
            log.warning(line)
    except BaseException as exc:
        manifest.close("failed", repr(exc))
        raise
    manifest.close("ok")
    return EXIT_OK


def _counter_warnings(counters: dict) -> list[str]:
    return [f"sampler {k}: {v}" for k, v in sorted(counters.items()) if v]


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, cfg, _ = load_model(ckpt)
    train_c, test_c = load_data(Path(args.data))
    ks = [int(k) for k in args.k.split(",")] if args.k else list(cfg.eval.k)
    metrics = evaluate_model(model.gmm, train_c, test_c, ks, cfg.eval.exclude_train_positives)
    text = metrics_table([(ckpt.name, metrics)])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text(metrics_jsonl(metrics), encoding="utf-8")
    if not args.quiet:
        print(text)
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, _, _ = load_model(ckpt)
    train_c, _ = load_data(Path(args.data))
    paths = export_embeddings(train_c, model.gmm, _out(args, "embeddings"))
    if not args.quiet:
        print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


_last_sim: dict = {}


def _simulate_cached(cfg: RunConfig):
    # cells of one seed share the simulated data; keep only the latest seed
    key = json.dumps(cfg.to_flat(), sort_keys=True, default=str)
    if key not in _last_sim:
        _last_sim.clear()
        _last_sim[key] = simulate(cfg.sim)
    return _last_sim[key]


def _ablation_cell(cfg: RunConfig, seed: int, strategy: str, debias: bool) -> dict:
    cell = {"seed": seed, "strategy": strategy, "debias": debias}
    t0 = time.time()
    try:
        run_cfg = cfg.replace(**{"sim.seed": seed, "train.seed": seed})
        data = _simulate_cached(run_cfg)
        result, metrics = run_cell(data, run_cfg, strategy, debias)
        cell.update(status="ok", best_epoch=result.best_epoch, epochs=len(result.history),
                    metrics=[m.as_record() for m in metrics], counters=result.state.counters)
    except Exception as exc:  # a failed cell must not take the others down
        cell.update(status="failed", error=f"{type(exc).__name__}: {exc}", trace=traceback.format_exc())
    cell["seconds"] = round(time.time() - t0, 2)
    return cell


def quick_config(cfg: RunConfig) -> RunConfig:
    return cfg.replace(**{
        "sim.num_users": 200, "sim.num_items": 120, "sim.avg_recall_size": 20, "sim.avg_exposure_size": 6,
        "model.dims": (32, 16), "nsdn.dims": (16, 8), "train.epochs": 2, "train.batch_size": 104,
        "eval.k": (10, 20),
    })


def _metric(cell: dict, k: int, name: str = "recall"):
    for m in cell.get("metrics", []):
        if m["k"] == k:
            return m[name]
    return None


def summarize_ablation(cells: list[dict], k: int = ABLATION_K) -> list[dict]:
    """Seed-median Recall@k per (strategy, debias) row, with relative deltas."""
    rows = []
    for strategy in STRATEGIES:
        for debias in (False, True):
            mine = [c for c in cells if c["strategy"] == strategy and c["debias"] == debias]
            vals = [_metric(c, k) for c in mine if c["status"] == "ok"]
            failed = any(c["status"] != "ok" for c in mine)
            rows.append({"strategy": strategy, "debias": debias, "failed": failed,
                         "seeds": len(vals), "median": statistics.median(vals) if vals and not failed else None,
                         "values": vals})
    base = {(r["strategy"], r["debias"]): r["median"] for r in rows}
    floor = base.get((STRATEGIES[0], False))
    for r in rows:
        m = r["median"]
        off = base.get((r["strategy"], False))
        r["delta_vs_uniform"] = (m / off - 1) if r["debias"] and m is not None and off else None
        r["delta_vs_ss_a"] = (m / floor - 1) if m is not None and floor else None
    return rows


def ablation_table(rows: list[dict], k: int = ABLATION_K) -> str:
    head = f"{'strategy':<14} {'weights':<8} {'Recall@' + str(k):>10} {'vs uniform':>11} {'vs ss-a':>9}  per-seed"
    lines = [head, "-" * len(head)]
    pct = lambda x: "" if x is None else f"{100 * x:+.2f}%"  # noqa: E731
    for r in rows:
        med = "FAILED" if r["failed"] else ("" if r["median"] is None else f"{r['median']:.4f}")
        seeds = " ".join(f"{v:.4f}" for v in r["values"])
        lines.append(f"{r['strategy']:<14} {'debias' if r['debias'] else 'uniform':<8} {med:>10} "
                     f"{pct(r['delta_vs_uniform']):>11} {pct(r['delta_vs_ss_a']):>9}  {seeds}")
    return "\n".join(lines)


def _workers() -> int:
    raw = os.environ.get("UMA2_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"UMA2_THREADS must be an integer, got {raw!r}") from None


def cmd_ablation(args) -> int:
    cfg = _config(args)
    if args.quick:
        cfg = quick_config(cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    out = _out(args, "ablation")
    manifest = Manifest(out / "manifest.jsonl", "ablation", cfg, seeds)
    jobs = [(cfg, seed, s, d) for seed in seeds for s in STRATEGIES for d in (False, True)]
    try:
        workers = _workers()
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                cells = list(pool.map(_ablation_cell, *zip(*jobs)))
        else:
            cells = []
            for job in jobs:
                cells.append(_ablation_cell(*job))
                c = cells[-1]
                if not args.quiet:
                    r = _metric(c, ABLATION_K)
                    print(f"seed {c['seed']} {c['strategy']:<14} debias={'on' if c['debias'] else 'off':<3} "
                          f"{c['status']} Recall@{ABLATION_K}={'-' if r is None else f'{r:.4f}'} "
                          f"({c['seconds']:.0f}s)", flush=True)
        for c in cells:
            manifest.write({"type": "cell", **{k: v for k, v in c.items() if k != "trace"}})
            for k, v in c.get("counters", {}).items():
                manifest.counters[k] = manifest.counters.get(k, 0) + v
        rows = summarize_ablation(cells)
        (out / "ablation.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows),
                                            encoding="utf-8")
        table = ablation_table(rows)
        (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
        manifest.add(out / "ablation.jsonl", out / "ablation.txt")
        if not args.quiet:
            print(table)
    except BaseException as exc:
        manifest.close("failed", repr(exc))
        raise
    failed = [c for c in cells if c["status"] != "ok"]
    for c in failed:
        log.error("cell %s/%s seed %s failed: %s", c["strategy"], c["debias"], c["seed"], c["error"])
    manifest.close("partial" if failed else "ok", f"{len(failed)} cells failed" if failed else None)
    return EXIT_PARTIAL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run config")
    common.add_argument("--seed", type=int, help="overrides sim.seed and train.seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")

    parser = argparse.ArgumentParser(prog="uma2", description="IPW-debiased two-tower matching on funnel logs")
    parser.add_argument("--version", action="version", version=f"uma2 {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="write synthetic train/test logs")

    p = sub.add_parser("train", parents=[common], help="train one strategy/weighting variant")
    p.add_argument("--data", default="data", help="directory with train.log and test.log")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--debias", choices=("on", "off"))
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="retrieval metrics of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", default="data")
    p.add_argument("--k", help="comma-separated cutoffs, e.g. 100,200")

    p = sub.add_parser("export", parents=[common], help="write user and item embeddings")
    p.add_argument("checkpoint")
    p.add_argument("--data", default="data")

    p = sub.add_parser("ablation", parents=[common], help="strategy x weighting comparison table")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--quick", action="store_true", help="tiny corpus and model, for smoke runs")
    return parser


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate, "export": cmd_export,
            "ablation": cmd_ablation}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, RetrievalArgumentError, LogParseError, IntegrityError, CheckpointError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
