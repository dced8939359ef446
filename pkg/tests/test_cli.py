import json

import pytest

from scpo import cli
from scpo.trainer import NumericAbort

SMALL_YAML = """\
env: point_run
timesteps_T: 500
batch_size: 64
epochs_per_iter: 1
hidden_sizes: [8, 8]
n_iterations: 2
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(SMALL_YAML)
    return str(p)


def train(cfg_path, out, *extra):
    return cli.main(["train", "--config", cfg_path, "--out", str(out), *extra])


def test_train_writes_run_directory(cfg_path, tmp_path):
    out = tmp_path / "runs"
    assert train(cfg_path, out) == cli.EXIT_OK
    run = out / "tiny-scpo-seed0"
    assert {p.name for p in run.iterdir()} == {"manifest.json", "metrics.csv", "final_checkpoint.npz"}
    lines = (run / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,env_steps,mean_return") and len(lines) == 3
    man = json.loads((run / "manifest.json").read_text())
    assert man["run_id"] == "tiny-scpo-seed0" and man["master_seed"] == 0
    assert len(man["artifact_hash"]) == 40 and man["config"]["n_iterations"] == 2
    # a duplicate run id is refused
    assert train(cfg_path, out) == cli.EXIT_USAGE


def test_reruns_are_byte_identical(cfg_path, tmp_path):
    out = tmp_path / "runs"
    assert train(cfg_path, out, "--run-id", "a", "--mode", "lagrangian", "--beta", "5") == 0
    assert train(cfg_path, out, "--run-id", "b", "--mode", "lagrangian", "--beta", "5") == 0
    assert (out / "a" / "metrics.csv").read_bytes() == (out / "b" / "metrics.csv").read_bytes()
    assert (out / "a" / "final_checkpoint.npz").read_bytes() == (out / "b" / "final_checkpoint.npz").read_bytes()


def test_eval_checkpoint(cfg_path, tmp_path):
    out = tmp_path / "runs"
    train(cfg_path, out)
    ck = str(out / "tiny-scpo-seed0" / "final_checkpoint.npz")
    assert cli.main(["eval", ck, "--episodes", "3", "--seed", "1"]) == 0
    csv = out / "tiny-scpo-seed0" / "eval_final_checkpoint_seed1.csv"
    header, row = csv.read_text().splitlines()
    assert header == ",".join(cli.EVAL_FIELDS) and row.endswith(",3")
    assert cli.main(["eval", ck, "--episodes", "0"]) == cli.EXIT_USAGE
    assert cli.main(["eval", ck, "--env", "cart_safe"]) == cli.EXIT_USAGE
    assert cli.main(["eval", str(tmp_path / "missing.npz")]) == cli.EXIT_USAGE


def test_eval_fresh_cart_policy_is_unsafe(tmp_path, capsys):
    assert cli.main(["eval", "--config", "cart_safe", "--episodes", "10", "--out", str(tmp_path)]) == 0
    row = (tmp_path / "eval_cart_safe-init_seed0.csv").read_text().splitlines()[1].split(",")
    assert float(row[3]) <= 0.1


def test_verify_toys(tmp_path):
    assert cli.main(["verify", "--suite", "toys", "--out", str(tmp_path)]) == cli.EXIT_OK
    text = (tmp_path / "verify_toys_seed20240601.csv").read_text()
    assert text.startswith("check,instance_seed,value,passed\n")
    assert all(line.endswith(",1") for line in text.splitlines()[1:])


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    from scpo.oracle import CheckRow
    monkeypatch.setattr(cli, "run_suite", lambda name, seed: [CheckRow("x", 0, 1.0, False)])
    assert cli.main(["verify", "--suite", "toys", "--out", str(tmp_path)]) == cli.EXIT_FAIL


def test_unknown_suite_and_bad_args(tmp_path, cfg_path):
    assert cli.main(["verify", "--suite", "nope"]) == cli.EXIT_USAGE
    assert cli.main(["train", "--config", "no_such_config"]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--config", cfg_path, "--k", "two"])
    assert exc.value.code == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("gamma: 3.0\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_out_dir_from_environment(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("SCPO_OUT_DIR", str(tmp_path / "envroot"))
    assert cli.main(["train", "--config", cfg_path]) == 0
    assert (tmp_path / "envroot" / "tiny-scpo-seed0" / "metrics.csv").exists()


def test_numeric_abort_exit_code(cfg_path, tmp_path, monkeypatch):
    def boom(cfg, out_dir=None):
        raise NumericAbort("non-finite loss")
    monkeypatch.setattr(cli, "run_training", boom)
    assert train(cfg_path, tmp_path) == cli.EXIT_ABORT


def test_shipped_configs_load():
    names = cli.shipped_configs()
    assert {"point_run", "cart_safe", "point_run_lagrangian", "gated_chain"} <= set(names)
    for name in names:
        doc, stem = cli.read_config_doc(name)
        assert stem == name
        cli.build_config(doc)
