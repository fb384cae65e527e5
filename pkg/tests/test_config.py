import json

import numpy as np
import pytest

from nsgrid import checkpoint
from nsgrid import config as cfgmod
from nsgrid.agent import Agent

from .conftest import SMALL


def test_defaults_round_trip(tmp_path):
    cfg = cfgmod.Config()
    cfgmod.dump(cfg, tmp_path / "c.json")
    back = cfgmod.load(tmp_path / "c.json")
    assert back == cfg and back.digest() == cfg.digest()
    assert len(cfg.digest()) == 12


def test_hash_tracks_every_value():
    base = cfgmod.Config()
    assert cfgmod.from_dict({"rl": {"beta": 0.1}}).digest() != base.digest()
    assert cfgmod.from_dict({"model": {"top_k": 4}}).digest() != base.digest()
    assert cfgmod.from_dict({"rl": {"beta": 0.05}}).digest() == base.digest()


@pytest.mark.parametrize("data,needle", [
    ({"rl": {"betta": 0.1}}, "rl.betta"),
    ({"colour": 1}, "colour"),
    ({"rl": {"seed": 3}}, "rl.seed"),
    ({"rl": {"group_size": "8"}}, "rl.group_size"),
    ({"rl": {"group_size": 1}}, "group size"),
    ({"model": {"sparsify": 1}}, "model.sparsify"),
    ({"seeds": []}, "seeds"),
    ({"model": {"top_k": 0}}, "top_k"),
    ({"eval": []}, "eval"),
])
def test_bad_configs_name_the_problem(data, needle):
    with pytest.raises(cfgmod.ConfigError, match=needle):
        cfgmod.from_dict(data)


def test_load_errors(tmp_path):
    with pytest.raises(cfgmod.ConfigError, match="not found"):
        cfgmod.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(cfgmod.ConfigError, match="invalid JSON"):
        cfgmod.load(tmp_path / "bad.json")


def test_ints_accepted_for_floats():
    assert cfgmod.from_dict({"rl": {"beta": 0}}).rl.beta == 0.0


def test_ablations():
    cfg = cfgmod.Config()
    off = cfgmod.with_ablations(cfg, cfgmod.ABLATIONS)
    assert not off.rl.plan_constraint and not off.model.sparsify
    assert off.rl.lam_seg == off.rl.lam_prog == off.rl.beta == 0.0
    assert cfgmod.with_ablations(cfg, []) == cfg
    assert cfgmod.ablation_tag([]) == "full"
    assert cfgmod.ablation_tag(["no_prog_reward", "no_seg_reward"]) == "no-seg-reward+no-prog-reward"
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.with_ablations(cfg, ["no_solver"])


def test_for_seed_sets_both_streams():
    b, r = cfgmod.Config().for_seed(7)
    assert b.seed == r.seed == 7


def test_checkpoint_round_trip(tmp_path):
    agent = Agent(SMALL, seed=3)
    bank = {1: np.ones((2, 4)), 3: np.zeros((1, 4))}
    checkpoint.save(tmp_path / "ck", agent, "abc123", "stage1", bank=bank, extra={"seed": 4})
    back, meta = checkpoint.load(tmp_path / "ck")
    assert back.cfg == agent.cfg
    assert all(np.array_equal(v.data, back.params[k].data) for k, v in agent.params.items())
    assert meta["config_hash"] == "abc123" and meta["seed"] == 4
    assert set(meta["bank"]) == {1, 3} and np.array_equal(meta["bank"][1], bank[1])
    assert json.loads((tmp_path / "ck" / "meta.json").read_text())["stage"] == "stage1"
    with pytest.raises(FileNotFoundError):
        checkpoint.load(tmp_path / "nothing")
