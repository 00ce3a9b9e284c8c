import csv
import json
import subprocess
import sys

import pytest

from dbsrl.actor_critic import load_agent, load_policy
from dbsrl.cli import main, parse_controller
from dbsrl.replay import load


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.cfg").write_text("hidden = 16, 12\nsteps = 20\n")
    (d / "dlsm.cfg").write_text("latent_dim = 3\nhidden = 6\nhead_hidden = 8\nmax_iter = 4\n")
    (d / "ope.cfg").write_text("M = 5\nhorizon = 12\nn_truth = 3\n")
    assert run("collect", "--out", d / "buf.jsonl", "--controller", "random(0.0)", "--sessions", 6, "--horizon", 12, "--seed", 1) == 0
    assert run("collect", "--out", d / "buf.jsonl", "--controller", "constant(1.0)", "--sessions", 6, "--horizon", 12, "--seed", 2) == 0
    return d


def test_collect_appends_and_labels(ws):
    buf = load(ws / "buf.jsonl")
    assert len(buf) == 12
    assert set(buf.by_controller()) == {"random0", "cdbs"}
    manifest = json.loads((ws / "buf.jsonl.manifest.json").read_text())
    assert manifest["command"] == "collect"
    assert manifest["outputs"][0]["name"] == "buf.jsonl"


def test_collect_is_byte_deterministic(tmp_path):
    for name in ("a.jsonl", "b.jsonl"):
        assert run("collect", "--out", tmp_path / name, "--controller", "random(0.3)", "--sessions", 3, "--horizon", 8, "--seed", 5) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_train_finetune_distill(ws, capsys):
    assert run("train", "--out", ws / "agent.ckpt", "--buffer", ws / "buf.jsonl", "--config", ws / "small.cfg", "--seed", 0) == 0
    actor, critic, meta = load_agent(ws / "agent.ckpt")
    assert actor.hidden == (16, 12) and critic is not None
    assert meta["train_config"]["steps"] == 20
    assert len(rows(ws / "agent.ckpt.log.csv")) == 21

    assert run("finetune", "--out", ws / "ft.ckpt", "--source", ws / "agent.ckpt", "--buffer", ws / "buf.jsonl", "--config", ws / "small.cfg", "--actor-lr", 1e-3) == 0
    assert "actor_lr" in capsys.readouterr().err
    assert load_agent(ws / "ft.ckpt")[2]["train_config"]["critic_lr"] == 1e-6

    assert run("distill", "--out", ws / "student.ckpt", "--teacher", ws / "agent.ckpt", "--buffer", ws / "buf.jsonl", "--steps", 10) == 0
    assert load_policy(ws / "student.ckpt")[0].hidden == (20, 10)


def test_train_deterministic_across_runs(ws, tmp_path):
    for name in ("x.ckpt", "y.ckpt"):
        assert run("train", "--out", tmp_path / name, "--buffer", ws / "buf.jsonl", "--config", ws / "small.cfg", "--seed", 3) == 0
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    assert (tmp_path / "x.ckpt.log.csv").read_bytes() == (tmp_path / "y.ckpt.log.csv").read_bytes()


def test_flags_override_config(ws, tmp_path):
    assert run("train", "--out", tmp_path / "o.ckpt", "--buffer", ws / "buf.jsonl", "--config", ws / "small.cfg", "--steps", 3) == 0
    assert load_agent(tmp_path / "o.ckpt")[2]["train_config"]["steps"] == 3


def test_ope_report_layout(ws):
    for i in range(6):
        assert run("train", "--out", ws / f"p{i}.ckpt", "--buffer", ws / "buf.jsonl", "--config", ws / "small.cfg", "--seed", 10 + i, "--steps", 2) == 0
    assert run("train-dlsm", "--out", ws / "m.ckpt", "--buffer", ws / "buf.jsonl", "--config", ws / "dlsm.cfg") == 0
    policies = [a for i in range(6) for a in ("--policy", ws / f"p{i}.ckpt")]
    (ws / "ref.profile").write_text("profile_id = ref\n")
    code = run("ope", "--out", ws / "ope.csv", "--dlsm", ws / "m.ckpt", "--buffer", ws / "buf.jsonl",
               "--profile", ws / "ref.profile", "--config", ws / "ope.cfg", *policies)
    assert code == 0
    table = rows(ws / "ope.csv")
    assert table[0] == ["row", "seed", "policy_id", "estimator", "V", "V_hat", "mae", "rank_correlation", "regret_at_1"]
    body = table[1:]
    assert sum(r[0] == "estimate" for r in body) == 6 * 2 * 3
    assert sum(r[0] == "summary" for r in body) == 2 * 3
    manifest = json.loads((ws / "ope.csv.manifest.json").read_text())
    assert set(manifest["config"]["selected_by_dlsm"]) == {"0", "1", "2"}

    code = run("ope", "--out", ws / "ope2.csv", "--dlsm", ws / "m.ckpt", "--buffer", ws / "buf.jsonl", "--config", ws / "ope.cfg", "--seeds", "4", *policies[:2])
    assert code == 0
    table = rows(ws / "ope2.csv")
    assert table[0] == ["row", "seed", "policy_id", "estimator", "V_hat"]
    assert len(table) == 1 + 2


def test_compare_and_timing(ws, capsys):
    assert run("compare", "--out", ws / "cmp.csv", "--buffer", ws / "buf.jsonl") == 0
    table = rows(ws / "cmp.csv")
    assert [r[0] for r in table[1:]] == ["cdbs", "random0"]
    assert table[0][:4] == ["controller_id", "n_sessions", "energy_mean", "energy_ref_mean"]
    rnd = dict(zip(table[0], table[2]))
    assert float(rnd["energy_mean"]) < 1.0 and rnd["energy_significant"] == "true"

    assert run("timing", "--out", ws / "dev.json", "--teacher", ws / "agent.ckpt", "--student", ws / "student.ckpt",
               "--buffer", ws / "buf.jsonl", "--n-timing", 10) == 0
    dev = json.loads((ws / "dev.json").read_text())
    assert "max_abs_dev" in dev
    assert json.loads((ws / "dev.json.timing.json").read_text())


@pytest.mark.parametrize(
    "argv",
    [
        ["collect"],
        ["train", "--out", "x.ckpt", "--buffer", "missing.jsonl"],
        ["collect", "--out", "x.jsonl", "--controller", "wobble(3)"],
        ["collect", "--out", "x.jsonl", "--controller", "random(1.5)"],
        ["finetune", "--out", "x.ckpt", "--buffer", "missing.jsonl"],
        ["bogus"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_unknown_config_key_exit_2(ws, tmp_path):
    (tmp_path / "bad.cfg").write_text("wibble = 3\n")
    assert run("train", "--out", tmp_path / "o.ckpt", "--buffer", ws / "buf.jsonl", "--config", tmp_path / "bad.cfg") == 2


def test_corrupt_buffer_exit_1(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"v": 1, "session_id": "x"\n')
    assert run("train", "--out", tmp_path / "o.ckpt", "--buffer", tmp_path / "bad.jsonl") == 1


def test_parse_controller():
    assert parse_controller("random(0.3)")[0] == "random"
    assert parse_controller("constant:0.5")[0] == "constant"
    with pytest.raises(Exception):
        parse_controller("random(")


def test_console_script_runs():
    out = subprocess.run([sys.executable, "-m", "dbsrl.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "collect" in out.stdout
    bad = subprocess.run([sys.executable, "-m", "dbsrl.cli", "ope"], capture_output=True, text=True)
    assert bad.returncode == 2
