import csv
import json

import numpy as np
import pytest

from latentadv.cli import main
from latentadv.data import load_checkpoint, save_checkpoint
from latentadv.network import mnist_cnn
from latentadv.tensor import make_rng

TOY = ["--dataset", "two-gaussians", "--n-per-class", "100", "--separation", "4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def toy_model(tmp_path, capsys):
    code, _, err = run(capsys, "train", *TOY, "--arch", "mlp:8", "--epochs", "5", "--lr", "0.5", "--seed", "7",
                       "--out", tmp_path / "base")
    assert code == 0, err
    return tmp_path / "base" / "model.ckpt"


def test_train_rerun_is_bitwise_identical(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, err = run(capsys, "train", *TOY, "--arch", "mlp:8", "--technique", "natural", "--epochs", "1",
                           "--seed", "7", "--out", tmp_path / name)
        assert code == 0, err
    for f in ("model.ckpt", "report.json", "trainlog.jsonl", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert {"tool_version", "seed", "config_hash", "model_hash"} <= set(report["metadata"])
    prov = load_checkpoint(tmp_path / "a" / "model.ckpt").provenance
    assert prov["technique"] == "natural" and prov["seed"] == 7


def test_missing_dataset_path(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data-dir", tmp_path / "no-such-dir", "--out", tmp_path / "r")
    assert code != 0
    assert "no-such-dir" in err and err.count("\n") == 1
    assert err.startswith("latentadv: error[io]:")


def test_config_validation_lists_every_field(tmp_path, capsys):
    code, _, err = run(capsys, "train", *TOY, "--technique", "at", "--lr", "-1", "--batch-size", "0",
                       "--attack-steps", "0", "--out", tmp_path / "r")
    assert code == 3 and err.count("\n") == 1
    # the attack is rejected first; fix it and the remaining fields are reported together
    code, _, err = run(capsys, "train", *TOY, "--technique", "at", "--lr", "-1", "--batch-size", "0",
                       "--out", tmp_path / "r")
    assert code == 3 and "lr" in err and "batch_size" in err


def test_config_file_precedence(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 2, "lr": 0.3, "seed": 4, "arch": "mlp:4"}))
    code, _, err = run(capsys, "train", *TOY, "--config", tmp_path / "c.json", "--lr", "0.1", "--out", tmp_path / "r")
    assert code == 0, err
    cfg = json.loads((tmp_path / "r" / "config.json").read_text())
    assert cfg["lr"] == 0.1 and cfg["epochs"] == 2 and cfg["seed"] == 4 and cfg["batch_size"] == 50


def test_config_file_unknown_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"learning_rate": 0.3}))
    code, _, err = run(capsys, "train", *TOY, "--config", tmp_path / "c.json", "--out", tmp_path / "r")
    assert code == 3 and "learning_rate" in err


def test_output_dir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("LATENTADV_OUTPUT_DIR", str(tmp_path / "envroot"))
    code, out, err = run(capsys, "train", *TOY, "--arch", "mlp:4", "--steps", "2")
    assert code == 0, err
    run_dir = tmp_path / "envroot" / out.strip().split("/")[-1]
    assert run_dir.parent == tmp_path / "envroot"
    assert (run_dir / "model.ckpt").exists()


def test_finetune_lat_omega_one_equals_at(tmp_path, capsys, toy_model):
    common = ["finetune", *TOY, "--checkpoint", toy_model, "--steps", "3", "--seed", "2", "--attack-steps", "3",
              "--attack-eps", "0.1", "--attack-step-size", "0.03"]
    code, _, err = run(capsys, *common, "--technique", "lat", "--layer", "1", "--omega", "1.0", "--out", tmp_path / "lat")
    assert code == 0, err
    code, _, err = run(capsys, *common, "--technique", "at", "--out", tmp_path / "at")
    assert code == 0, err
    a = load_checkpoint(tmp_path / "lat" / "model.ckpt").network
    b = load_checkpoint(tmp_path / "at" / "model.ckpt").network
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a.parameters(), b.parameters()))


def test_finetune_invalid_layer_before_training(tmp_path, capsys):
    ck = tmp_path / "cnn.ckpt"
    save_checkpoint(mnist_cnn(make_rng(0), width=0.125), {}, ck)
    code, _, err = run(capsys, "finetune", "--checkpoint", ck, "--technique", "lat-random", "--layer-pool",
                       "5,7,9,11", "--data-dir", tmp_path / "absent", "--out", tmp_path / "r")
    # the layer is rejected before the (missing) data is touched
    assert code == 3 and "[11]" in err
    assert not (tmp_path / "r").exists()


def test_finetune_lat_mnist_settings(tmp_path, capsys, mnist_dir):
    ck = tmp_path / "cnn.ckpt"
    save_checkpoint(mnist_cnn(make_rng(0)).astype(np.float32), {}, ck)
    code, _, err = run(capsys, "finetune", "--checkpoint", ck, "--data-dir", mnist_dir, "--train-limit", "20",
                       "--test-limit", "20", "--batch-size", "10", "--technique", "lat", "--layer", "2",
                       "--omega", "0.2", "--epochs", "2", "--attack-steps", "2", "--out", tmp_path / "r")
    assert code == 0, err
    steps = [json.loads(line) for line in (tmp_path / "r" / "trainlog.jsonl").read_text().splitlines()]
    steps = [s for s in steps if s["type"] == "step"]
    assert len(steps) == 4 and all(s["layer"] == 2 for s in steps)


def test_finetune_lat_random_pool(tmp_path, capsys, toy_model):
    code, _, err = run(capsys, "finetune", *TOY, "--checkpoint", toy_model, "--technique", "lat-random",
                       "--layer-pool", "1,2", "--steps", "4", "--attack-steps", "2", "--out", tmp_path / "r")
    assert code == 0, err


def test_attack_unknown_method(tmp_path, capsys, toy_model):
    code, _, err = run(capsys, "attack", *TOY, "--checkpoint", toy_model, "--method", "bandit")
    assert code == 2 and err.count("\n") == 1
    for name in ("fgsm", "pgd", "la"):
        assert name in err


def test_attack_zero_budget_equals_clean(tmp_path, capsys, toy_model):
    code, _, err = run(capsys, "attack", *TOY, "--checkpoint", toy_model, "--method", "pgd", "--eps", "0",
                       "--out", tmp_path / "r")
    assert code == 0, err
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert rep["adv_accuracy"] == rep["clean_accuracy"]


def test_attack_pgd_collapses_natural_model(tmp_path, capsys, toy_model):
    code, _, err = run(capsys, "attack", *TOY, "--checkpoint", toy_model, "--method", "pgd", "--eps", "0.2",
                       "--steps", "40", "--step-size", "0.01", "--save-examples", "true", "--out", tmp_path / "r")
    assert code == 0, err
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert rep["adv_accuracy"] < rep["clean_accuracy"] - 0.3
    x_adv = np.load(tmp_path / "r" / "adversarial.npy")
    assert x_adv.shape == (200, 2)


def test_attack_la(tmp_path, capsys, toy_model):
    code, _, err = run(capsys, "attack", *TOY, "--checkpoint", toy_model, "--method", "la", "--layer", "1",
                       "--eps", "0.1", "--out", tmp_path / "r")
    assert code == 0, err
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert rep["attack"]["name"] == "la@1" and rep["adv_accuracy"] <= rep["clean_accuracy"]


def test_sweep_rows_and_determinism(tmp_path, capsys):
    code, _, err = run(capsys, "train", *TOY, "--arch", "mlp:6,5", "--steps", "1", "--lr", "0", "--out", tmp_path / "m")
    assert code == 0, err
    ck = tmp_path / "m" / "model.ckpt"
    for name in ("s1", "s2"):
        code, _, err = run(capsys, "sweep", *TOY, "--checkpoint", ck, "--eps", "0.1", "--lipschitz-samples", "8",
                           "--test-limit", "30", "--out", tmp_path / name)
        assert code == 0, err
    a = (tmp_path / "s1" / "curves.csv").read_bytes()
    assert a == (tmp_path / "s2" / "curves.csv").read_bytes()
    assert (tmp_path / "s1" / "report.json").read_bytes() == (tmp_path / "s2" / "report.json").read_bytes()
    rows = list(csv.reader(a.decode().splitlines()))
    depth = load_checkpoint(ck).network.depth
    assert rows[0][0] == "schema" and rows[1] == ["index", "epsilon_i", "subnet_adv_acc", "mean_local_lipschitz"]
    assert len(rows) - 2 == depth


def test_eval_attack_list(tmp_path, capsys, toy_model):
    code, _, err = run(capsys, "eval", *TOY, "--checkpoint", toy_model, "--attacks", "fgsm,pgd10,pgd100,la@1",
                       "--eps", "0.1", "--out", tmp_path / "r")
    assert code == 0, err
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert [a["name"] for a in rep["attacks"]] == ["fgsm", "pgd10", "pgd100", "la@1"]
    code, _, err = run(capsys, "eval", *TOY, "--checkpoint", toy_model, "--attacks", "cw", "--out", tmp_path / "x")
    assert code == 2 and "cw" in err


def test_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "attack", *TOY, "--checkpoint", tmp_path / "gone.ckpt")
    assert code == 4 and "gone.ckpt" in err


def test_corrupt_checkpoint(tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"LATADVCK" + b"\0" * 40)
    code, _, err = run(capsys, "eval", *TOY, "--checkpoint", tmp_path / "bad.ckpt")
    assert code == 5 and err.count("\n") == 1


def test_no_command(capsys):
    code, _, err = run(capsys)
    assert code == 2 and err.startswith("latentadv: error[usage]:")


def test_train_budget_ramp(tmp_path, capsys):
    code, _, err = run(capsys, "train", *TOY, "--arch", "mlp:8", "--technique", "at", "--attack-eps", "0.1",
                       "--attack-steps", "3", "--ramp-eps", "0.03,0.06", "--ramp-steps", "4", "--steps", "3",
                       "--out", tmp_path / "r")
    assert code == 0, err
    code, _, err = run(capsys, "train", *TOY, "--technique", "at", "--ramp-eps", "0,0.1", "--out", tmp_path / "x")
    assert code == 3 and "ramp_eps" in err
