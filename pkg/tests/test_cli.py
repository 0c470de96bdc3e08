import csv
import json

import numpy as np
import pytest

from merl_maze import cli
from merl_maze.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from merl_maze.config import dump_config, load_config, output_root, parse_config, parse_value
from merl_maze.features import AuxRewardParams
from merl_maze.harness import ExperimentSpec
from merl_maze.objectives import AdamState
from merl_maze.policy import Policy

TINY = """
# quick settings for tests
train.epochs = 10
merl.epochs = 4
merl.inner_lr = 3.0
borl.trials = 2
borl.restarts = 1
borl.train.epochs = 5
"""


def test_parse_config():
    cfg = parse_config(TINY + "name = plain text  # trailing comment\nflags = [1, 2]\n")
    assert cfg["train"] == {"epochs": 10}
    assert cfg["borl"]["train"]["epochs"] == 5 and cfg["merl"]["inner_lr"] == 3.0
    assert cfg["name"] == "plain text" and cfg["flags"] == [1, 2]
    assert parse_value(" true ") is True and parse_value("null") is None and parse_value("abc") == "abc"
    assert parse_config(dump_config(cfg)) == cfg
    with pytest.raises(ValueError):
        parse_config("no equals sign here")
    assert load_config(None) == {}
    spec = ExperimentSpec.from_dict(parse_config(TINY))
    assert spec.borl.train.epochs == 5 and spec.train.epochs == 10


def test_output_root(monkeypatch, tmp_path):
    monkeypatch.setenv("MERL_MAZE_OUT", str(tmp_path))
    assert output_root() == tmp_path
    monkeypatch.delenv("MERL_MAZE_OUT")
    assert str(output_root()) == "runs"


def test_checkpoint_round_trip(tmp_path):
    policy = Policy(base_scale=0.1, positional=True, max_len=4)
    theta = np.random.default_rng(0).normal(size=policy.dim)
    phi = AuxRewardParams.from_vector(np.arange(18) / 7.0, "linear")
    adam = AdamState(np.ones(18), np.full(18, 2.0), 9)
    rng = np.random.default_rng(5)
    ck = Checkpoint(policy, theta, phi, adam, 12, rng.bit_generator.state, {"seed": 3})
    save_checkpoint(tmp_path / "a" / "c.json", ck)
    back = load_checkpoint(tmp_path / "a" / "c.json")
    assert back.policy == policy and np.array_equal(back.theta, theta)
    assert np.array_equal(back.phi.to_vector(), phi.to_vector()) and back.phi.mode == "linear"
    assert back.adam.t == 9 and back.epoch == 12 and back.meta == {"seed": 3}
    restored = np.random.default_rng()
    restored.bit_generator.state = back.rng_state
    assert restored.random() == rng.random()
    d = ck.to_dict()
    with pytest.raises(ValueError):
        Checkpoint.from_dict({**d, "version": 99})
    with pytest.raises(ValueError):
        Checkpoint.from_dict({**d, "theta": [0.0, 1.0]})
    assert set(json.loads((tmp_path / "a" / "c.json").read_text())["phi"]) >= {"tie_para", "tie_cross", "mode"}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    return root


def run(monkeypatch, root, *argv):
    monkeypatch.setenv("MERL_MAZE_OUT", str(root))
    return cli.main(list(argv))


def test_end_to_end(monkeypatch, workspace, capsys):
    root = workspace
    cfg = str(root / "tiny.cfg")
    assert run(monkeypatch, root, "gen-data", "--seed", "1", "--n", "5", "--k", "4", "--n-train-val", "20",
               "--n-test", "10", "--out", "data.jsonl") == 0
    data = str(root / "data.jsonl")
    for setting in ("oracle", "underspecified", "borl"):
        assert run(monkeypatch, root, "train", "--setting", setting, "--data", data, "--config", cfg) == 0
        assert (root / f"{setting}-seed0.json").exists()
    assert run(monkeypatch, root, "meta-train", "--data", data, "--warm-start", str(root / "underspecified-seed0.json"),
               "--config", cfg, "--eval-every", "2") == 0
    with open(root / "merl-seed0.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "train_acc", "val_acc", "o_val", "meta_grad_norm"]
    assert [r[0] for r in rows[1:]] == ["0", "2", "3"]
    assert load_checkpoint(root / "merl-seed0.json").phi is not None

    assert run(monkeypatch, root, "borl", "--data", data, "--config", cfg, "--trials", "3",
               "--buffer", str(root / "underspecified-seed0.buffer.jsonl")) == 0
    with open(root / "borl-seed0" / "trials.csv") as f:
        trials = list(csv.DictReader(f))
    assert len(trials) == 3 and "best_so_far" in trials[0] and "tie_para" in trials[0]
    assert (root / "borl-seed0" / "best.json").exists()

    capsys.readouterr()
    assert run(monkeypatch, root, "eval", "--data", data, "--checkpoint", str(root / "oracle-seed0.json"),
               "--split", "train") == 0
    assert capsys.readouterr().out.startswith("train accuracy")
    assert run(monkeypatch, root, "rerank", "--data", data, "--checkpoint", str(root / "underspecified-seed0.json"),
               "--n-samples", "3", "--budget", "5") == 0
    out = capsys.readouterr().out
    assert "features_only" in out and "features_plus_logprob" in out

    assert run(monkeypatch, root, "analyze-buffers", "--data", data, str(root / "oracle-seed0.buffer.jsonl"),
               str(root / "underspecified-seed0.buffer.jsonl"), "--out-dir", "buffers") == 0
    assert (root / "buffers" / "diversity_oracle-seed0.csv").exists()
    assert (root / "buffers" / "buffer_diversity.png").exists()

    assert run(monkeypatch, root, "report", "--data", data, "--config", cfg, "--n-seeds", "1",
               "--out-dir", "report") == 0
    for name in ("results.csv", "results.json", "summary.txt", "results.png"):
        assert (root / "report" / name).exists()
    assert run(monkeypatch, root, "report", "--results", str(root / "report" / "results.json"),
               "--out-dir", "again", "--no-figures") == 0
    assert (root / "again" / "results.csv").read_text() == (root / "report" / "results.csv").read_text()
    assert not (root / "again" / "results.png").exists()


def test_bad_invocations(monkeypatch, workspace):
    with pytest.raises(SystemExit):
        run(monkeypatch, workspace, "report")
    with pytest.raises(SystemExit):
        run(monkeypatch, workspace, "train", "--setting", "merl", "--data", "x")
    with pytest.raises(SystemExit):
        run(monkeypatch, workspace)
