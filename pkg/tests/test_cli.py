import csv
import json

import pytest

from nsgrid import cli
from nsgrid import config as cfgmod

TINY = {
    "tasks": ["put the butter in the basket", "open the microwave"],
    "seeds": [0],
    "model": {"grid": 6, "d_psi": 16, "d_instr": 4, "d_latent": 8, "cls_hidden": 8, "d_embed": 4,
              "d_query": 8, "d_context": 8, "top_k": 4, "d_model": 8, "n_layers": 1, "n_heads": 2,
              "horizon": 2},
    "bc": {"cls_epochs": 3, "solver_epochs": 3},
    "rl": {"group_size": 2, "iterations": 2},
    "eval": {"episodes": 2},
}


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**TINY, "out_dir": str(tmp_path / "runs")}))
    return str(path)


def run(*argv):
    return cli.main(list(argv))


def test_missing_prerequisites_name_the_command(conf, capsys):
    assert run("pretrain", "--config", conf) == 2
    assert "ns-grid gen-demos" in capsys.readouterr().err
    assert run("gen-demos", "--config", conf) == 0
    capsys.readouterr()
    assert run("train", "--config", conf) == 2
    assert "ns-grid pretrain" in capsys.readouterr().err
    assert run("eval", "--config", conf, "--checkpoint", "train-full") == 2
    assert "ns-grid train" in capsys.readouterr().err


def test_bad_config_is_reported(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"rl": {"bogus": 1}}))
    assert run("gen-demos", "--config", str(path)) == 2
    assert "rl.bogus" in capsys.readouterr().err


def test_pipeline(conf, tmp_path, capsys):
    assert run("gen-demos", "--config", conf) == 0
    run_dir = next((tmp_path / "runs").iterdir())
    digest = cfgmod.load(conf).digest()
    assert run_dir.name.startswith(digest + "-")
    seed = run_dir / "seed0"
    assert sorted(p.name for p in (seed / "demos").glob("*.jsonl")) == ["task00_demo00.jsonl",
                                                                        "task01_demo00.jsonl"]
    assert run("pretrain", "--config", conf) == 0
    assert json.loads((seed / "stage1" / "meta.json").read_text())["config_hash"] == digest

    assert run("train", "--config", conf) == 0
    assert run("train", "--config", conf, "--no-seg-reward", "--no-prog-reward") == 0
    metrics = (seed / "train-full" / "metrics.csv").read_text().splitlines()
    assert len(metrics) == 1 + TINY["rl"]["iterations"]
    assert all(line.endswith("," + digest) for line in metrics[1:])
    assert (seed / "train-no-seg-reward+no-prog-reward" / "metrics.csv").exists()

    capsys.readouterr()
    assert run("eval", "--config", conf, "--checkpoint", "stage1") == 0
    first = (run_dir / "eval-stage1.csv").read_bytes()
    assert run("eval", "--config", conf, "--checkpoint", "stage1") == 0
    assert (run_dir / "eval-stage1.csv").read_bytes() == first
    rows = list(csv.DictReader((run_dir / "eval-stage1.csv").read_text().splitlines()))
    assert [r["task_index"] for r in rows] == ["0", "1"]
    assert all(r["episodes"] == "2" and r["solver_calls_ok"] == "1" for r in rows)

    assert run("eval", "--config", conf, "--checkpoint", str(seed / "train-full"), "--perturbed") == 0
    summary = (run_dir / "eval-train-full-perturbed-summary.csv").read_text().splitlines()
    assert summary[0] == "task_index,mean_success,std_success,n_seeds,config_hash"
    assert summary[-1].startswith("all,")
    assert "success" in capsys.readouterr().out


def test_gen_demos_rejects_run_dir(conf, tmp_path, capsys):
    assert run("gen-demos", "--config", conf, "--run-dir", str(tmp_path)) == 2
    assert "new run directory" in capsys.readouterr().err


def test_eval_decodes_ablated_checkpoint_without_mask(conf, tmp_path, monkeypatch):
    for cmd in ("gen-demos", "pretrain"):
        assert run(cmd, "--config", conf) == 0
    assert run("train", "--config", conf, "--no-plan-constraint") == 0
    seen = []
    real = cli.evaluate.evaluate

    def spy(*args, **kw):
        seen.append(kw["constrained"])
        return real(*args, **kw)
    monkeypatch.setattr(cli.evaluate, "evaluate", spy)
    assert run("eval", "--config", conf, "--checkpoint", "train-no-plan-constraint") == 0
    assert run("eval", "--config", conf, "--checkpoint", "stage1") == 0
    assert seen == [False, True]
