import json

import pytest

from uma2.cli import main, summarize_ablation
from uma2.funnel import LOG_SCHEMA, ORACLE_SCHEMA

TINY = ["--set", "sim.num_users=100", "--set", "sim.num_items=50", "--set", "sim.avg_recall_size=10",
        "--set", "sim.avg_exposure_size=4", "--set", "model.dims=16,8", "--set", "nsdn.dims=8,4",
        "--set", "train.batch_size=52", "--set", "eval.k=10,20", "--quiet"]


def manifest(path):
    return [json.loads(line) for line in (path / "manifest.jsonl").read_text().splitlines()]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["simulate", "--out", str(out), *TINY]) == 0
    return out


def test_simulate_writes_logs_and_manifest(data_dir):
    for name in ("train.log", "test.log"):
        assert (data_dir / name).read_text().startswith(LOG_SCHEMA)
    for name in ("train.oracle", "test.oracle"):
        assert (data_dir / name).read_text().startswith(ORACLE_SCHEMA)
    recs = manifest(data_dir)
    assert recs[0]["type"] == "start" and recs[0]["config"]["sim.num_users"] == 100
    assert recs[-1]["status"] == "ok"
    assert {str(data_dir / n) for n in ("train.log", "test.log", "train.oracle", "test.oracle", "config.ini")} \
        <= set(recs[-1]["outputs"])


def test_simulate_is_byte_identical(data_dir, tmp_path):
    again = tmp_path / "again"
    assert main(["simulate", "--out", str(again), *TINY]) == 0
    for name in ("train.log", "test.log", "train.oracle", "test.oracle", "config.ini"):
        assert (again / name).read_bytes() == (data_dir / name).read_bytes()


def test_simulate_zero_users_is_config_error(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path / "d"), "--set", "sim.num_users=0", "--quiet"]) == 2
    assert "sim.num_users" in capsys.readouterr().err


def test_unknown_key_names_it(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nlearning_rate = 0.1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "train.learning_rate" in capsys.readouterr().err


def test_bad_flag_is_usage_error():
    assert main(["train", "--strategy", "ss-z"]) == 2
    assert main([]) == 2


def test_train_evaluate_export(data_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(data_dir), "--out", str(run), "--epochs", "2",
                 "--strategy", "ss-abc-fixed", "--debias", "on", *TINY]) == 0
    recs = manifest(run)
    assert [r["epoch"] for r in recs if r["type"] == "epoch"] == [0, 1]
    assert recs[-1]["status"] == "ok" and str(run / "best.ckpt") in recs[-1]["outputs"]
    assert recs[0]["config"]["train.debias"] is True
    capsys.readouterr()
    assert main(["evaluate", str(run / "best.ckpt"), "--data", str(data_dir), "--k", "10,20"]) == 0
    first = capsys.readouterr().out
    assert main(["evaluate", str(run / "best.ckpt"), "--data", str(data_dir), "--k", "10,20"]) == 0
    assert capsys.readouterr().out == first and "Recall@20" in first
    assert main(["evaluate", str(run / "best.ckpt"), "--data", str(data_dir), "--k", "51", "--quiet"]) == 2
    emb = tmp_path / "emb"
    assert main(["export", str(run / "best.ckpt"), "--data", str(data_dir), "--out", str(emb), "--quiet"]) == 0
    assert len((emb / "items.emb").read_text().splitlines()) == 1 + 50


def test_train_zero_epochs_writes_initial_checkpoint(data_dir, tmp_path):
    run = tmp_path / "run0"
    assert main(["train", "--data", str(data_dir), "--out", str(run), "--epochs", "0", *TINY]) == 0
    assert (run / "best.ckpt").exists()


def test_missing_inputs_exit_2(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r"), "--quiet"]) == 2
    assert manifest(tmp_path / "r")[-1]["status"] == "failed"
    assert main(["evaluate", str(tmp_path / "none.ckpt"), "--quiet"]) == 2


def test_divergence_exit_3(data_dir, tmp_path):
    run = tmp_path / "div"
    code = main(["train", "--data", str(data_dir), "--out", str(run), "--epochs", "4",
                 "--set", "train.divergence_factor=1e-9", *TINY])
    assert code == 3
    end = manifest(run)[-1]
    assert end["status"] == "failed" and "DivergenceError" in end["error"]


def test_quick_ablation_has_eight_rows(tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablation", "--quick", "--seeds", "0,1", "--out", str(out), "--quiet"]) == 0
    rows = [json.loads(line) for line in (out / "ablation.jsonl").read_text().splitlines()]
    assert len(rows) == 8 and all(r["seeds"] == 2 and not r["failed"] for r in rows)
    assert len((out / "ablation.txt").read_text().splitlines()) == 2 + 8


def test_failed_cell_marks_row_only():
    ok = {"status": "ok", "metrics": [{"k": 50, "recall": 0.5}]}
    cells = [{"strategy": s, "debias": d, "seed": 0, **ok} for s in ("ss-a", "ss-ab", "ss-abc-random", "ss-abc-fixed")
             for d in (False, True)]
    cells[3] = {"strategy": "ss-ab", "debias": True, "seed": 0, "status": "failed", "error": "boom"}
    rows = summarize_ablation(cells)
    assert [r["failed"] for r in rows].count(True) == 1
    assert rows[3]["median"] is None and rows[2]["median"] == 0.5


def test_partial_ablation_exits_4(tmp_path, monkeypatch):
    import uma2.cli as cli
    real = cli.run_cell

    def flaky(data, config, strategy, debias, **kw):
        if strategy == "ss-a" and debias:
            raise FloatingPointError("injected")
        return real(data, config, strategy, debias, **kw)

    monkeypatch.setattr(cli, "run_cell", flaky)
    out = tmp_path / "abl"
    assert main(["ablation", "--quick", "--seeds", "0", "--out", str(out), "--quiet"]) == 4
    rows = [json.loads(line) for line in (out / "ablation.jsonl").read_text().splitlines()]
    assert [r["failed"] for r in rows].count(True) == 1
    assert manifest(out)[-1]["status"] == "partial"
