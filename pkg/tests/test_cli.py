import json

import numpy as np
import pytest

from chanorm.cli import dispatch

SMALL = ["--set", "lookback=16", "--set", "horizon=4", "--set", "periods=8", "--set", "d_model=8",
         "--set", "depth=1", "--set", "batch_size=16"]


def run(capsys, *argv):
    code = dispatch(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_synth_writes_csv(tmp_path, capsys):
    path = tmp_path / "toy.csv"
    code, out, _ = run(capsys, "synth", "--generator", "toy", "--out", str(path), "--lookback", "10",
                       "--horizon", "2", "--periods", "5")
    assert code == 0 and "seed=7" in out
    rows = path.read_text().splitlines()
    assert rows[0] == "up,down" and len(rows) == 1 + 5 * 12


@pytest.mark.parametrize("argv", [["cid-test", "--backbone", "channel_attention", "--norm", "ln"],
                                  ["cid-test", "--backbone", "residual_mlp", "--norm", "none"]])
def test_cid_test_non_cid(argv, capsys):
    code, out, _ = run(capsys, *argv)
    assert code == 0
    assert out.splitlines()[:2] == ["seed=7", "NON_CID"]


def test_cid_test_cid_cases(capsys):
    code, out, _ = run(capsys, "cid-test", "--norm", "cn", "--perturb", "0.1", "--seed", "3")
    assert code == 0 and out.splitlines()[:2] == ["seed=3", "CID"]
    _, out, _ = run(capsys, "cid-test", "--backbone", "residual_mlp", "--identifier", "fixed_constant")
    assert "CID" in out.splitlines()


def test_cid_test_perturb_needs_rows(capsys):
    code, _, err = run(capsys, "cid-test", "--norm", "ln", "--perturb", "0.1")
    assert code == 1 and "config error" in err


@pytest.mark.parametrize("layer", ["ln", "in", "cn", "acn", "pcn"])
def test_grad_check_layers(layer, capsys):
    code, out, _ = run(capsys, "grad-check", "--layer", layer)
    assert code == 0 and out.strip().endswith("PASS")


def test_grad_check_model(capsys):
    code, out, _ = run(capsys, "grad-check", "--layer", "model", "--norm", "acn", "--space", "data_x")
    assert code == 0 and "PASS" in out


def test_grad_check_failure_exit_code(capsys):
    # an impossibly tight tolerance must be reported as a failure
    code, out, _ = run(capsys, "grad-check", "--layer", "acn", "--tol", "1e-16")
    assert code == 3 and "FAIL" in out


def test_train_eval_entropy(tmp_path, capsys):
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", *SMALL, "--epochs", "2", "--norm", "cn", "--out", str(out_dir))
    assert code == 0
    res = json.loads(out.splitlines()[-1])
    for name in ("config.txt", "metrics.jsonl", "model.ckpt", "results.json"):
        assert (out_dir / name).exists()
    assert len((out_dir / "metrics.jsonl").read_text().splitlines()) == 3

    code, out, _ = run(capsys, "eval", "--checkpoint", str(out_dir / "model.ckpt"),
                       "--config", str(out_dir / "config.txt"))
    assert code == 0
    ev = json.loads(out)
    assert ev["mse"] == pytest.approx(res["test_mse"], rel=1e-12)
    assert ev["aligned_mse"] == pytest.approx(res["aligned_mse"], rel=1e-12)

    code, out, _ = run(capsys, "entropy", "--checkpoint", str(out_dir / "model.ckpt"),
                       "--config", str(out_dir / "config.txt"))
    assert code == 0
    doc = json.loads((out_dir / "diagnostics.json").read_text())
    assert set(doc["entropy"]) >= {"feature_entropy", "channel_entropy"}
    corr = np.loadtxt(out_dir / "correlation.csv", delimiter=",")
    assert corr.shape == (2, 2)


def test_train_from_resolved_config_reproduces(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run(capsys, "train", *SMALL, "--epochs", "2", "--norm", "acn", "--out", str(a))
    text = (a / "config.txt").read_text().replace(f"out_dir={a}", f"out_dir={b}")
    (tmp_path / "resolved.txt").write_text(text)
    code, _, _ = run(capsys, "train", "--config", str(tmp_path / "resolved.txt"))
    assert code == 0
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()


def test_train_on_csv(tmp_path, capsys):
    csv = tmp_path / "s.csv"
    run(capsys, "synth", "--generator", "sines", "--channels", "3", "--length", "200", "--out", str(csv))
    code, out, _ = run(capsys, "train", "--data", str(csv), "--set", "lookback=12", "--set", "horizon=3",
                       "--set", "d_model=8", "--epochs", "1", "--out", str(tmp_path / "r"))
    assert code == 0 and "aligned_mse" not in out


def test_compare_table_and_epoch_zero(tmp_path, capsys):
    code, out, _ = run(capsys, "compare", *SMALL, "--epochs", "0", "--norms", "ln,cn,acn,pcn",
                       "--out", str(tmp_path))
    assert code == 0
    lines = (tmp_path / "compare.csv").read_text().splitlines()
    assert lines[0].startswith("norm_kind,init_val_mse")
    init = [float(line.split(",")[1]) for line in lines[1:]]
    assert len(init) == 4 and max(init) - min(init) <= 1e-12
    assert "norm_kind" in out


def test_sweep_grid(tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", *SMALL, "--epochs", "1", "--grid", "tau=0.1,1.0",
                       "--grid", "sim_metric=cosine,neg_l2", "--out", str(tmp_path))
    assert code == 0
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 5
    assert "spread/mean" in out


@pytest.mark.parametrize("argv,code", [
    (["train", "--set", "bogus=1"], 1),
    (["train", "--set", "norm_kind=bn"], 1),
    (["train", "--set", "noequals"], 1),
    (["sweep", "--grid", "depth=1,2"], 1),
    (["compare", "--norms", "ln,zz"], 1),
    (["frobnicate"], 1),
    (["train", "--data", "/nonexistent/file.csv"], 2),
])
def test_exit_codes(argv, code, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    got, _, err = run(capsys, *argv)
    assert got == code
    assert err


def test_malformed_csv_exit_code(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n3,oops\n")
    code, _, err = run(capsys, "train", "--data", str(bad))
    assert code == 2 and "row 3" in err


def test_nan_data_aborts(tmp_path, capsys):
    csv = tmp_path / "nan.csv"
    csv.write_text("a,b\n" + "\n".join("nan,1" for _ in range(100)) + "\n")
    code, _, err = run(capsys, "train", "--data", str(csv), "--set", "lookback=8", "--set", "horizon=2",
                       "--set", "d_model=8", "--epochs", "1", "--out", str(tmp_path / "r"))
    assert code == 3 and "numerical abort" in err


def test_thread_cap_env(monkeypatch, capsys):
    monkeypatch.setenv("CHANORM_THREADS", "1")
    code, out, _ = run(capsys, "cid-test")
    assert code == 0 and "NON_CID" in out
