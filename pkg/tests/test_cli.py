import json
import subprocess
import sys

import pytest

from m2vae.cli import main, parse_modalities
from m2vae.compiler import Likelihood


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_parse_modalities():
    mods = parse_modalities("a:4:gauss, b:8:bern,c")
    assert [(m.name, m.data_dim, m.likelihood) for m in mods] == [
        ("a", 4, Likelihood.GAUSSIAN), ("b", 8, Likelihood.BERNOULLI), ("c", 1, Likelihood.GAUSSIAN)]


def test_expand_json(capsys):
    code, out, _ = run(["expand", "--modalities", "a:4:gauss,b:8:bern", "--variant", "m2vae", "--format", "json"],
                       capsys)
    doc = json.loads(out)
    assert code == 0 and len(doc["terms"]) == 9
    assert doc["modalities"][1] == {"name": "b", "dim": 8, "likelihood": "bern"}


def test_expand_text_and_latex(capsys, tmp_path):
    code, out, _ = run(["expand", "--modalities", "a", "--variant", "vanilla"], capsys)
    assert code == 0 and out.strip() == "+1·E[log p(a|z)] −1·KL(q(z|a)‖p(z))"
    target = tmp_path / "e.tex"
    assert main(["expand", "--modalities", "a,b,c", "--format", "latex", "-o", str(target)]) == 0
    assert r"\tfrac{1}{6}" in target.read_text()


@pytest.mark.parametrize("argv", [
    ["expand", "--modalities", "a,b,c", "--variant", "jmvae"],
    ["expand", "--modalities", "a:0"],
    ["expand", "--modalities", "a:4:poisson"],
    ["expand"],
    ["frobnicate"],
    ["train", "--config", "/nonexistent/run.json"],
])
def test_bad_usage_exits_2(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:  # argparse errors
        code = exc.code
    assert code == 2
    assert capsys.readouterr().err


def test_check_compiler_suite(capsys):
    code, out, _ = run(["check", "--suite", "compiler"], capsys)
    assert code == 0
    assert out.count("PASS") == 6 and "FAIL" not in out


def test_check_failure_exits_1(monkeypatch, capsys):
    from m2vae import checks
    monkeypatch.setitem(checks.SUITES, "compiler", [("broken", lambda: (False, "forced"))])
    code, out, _ = run(["check", "--suite", "compiler"], capsys)
    assert code == 1 and "FAIL  compiler/broken: forced" in out


def write_config(tmp_path, **extra):
    cfg = {"variant": "m2vae", "hidden": [8], "steps": 30, "batch_size": 32, "lr": 0.01, "eval_every": 10,
           "synthetic": {"dims": {"a": 3, "b": 2}, "n_samples": 200}}
    cfg.update(extra)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_twice_is_identical(tmp_path, capsys):
    cfg = write_config(tmp_path)
    for d in ("one", "two"):
        assert main(["train", "--config", str(cfg), "--seed", "3", "--out-dir", str(tmp_path / d)]) == 0
    summary = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert summary["steps"] == 30
    for f in ("metrics.csv", "checkpoint.json"):
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()


def test_generate_train_eval_round(tmp_path, capsys):
    data = tmp_path / "d.bin"
    assert main(["generate", "--dims", "a:3,b:2,c:2", "--n", "150", "--seed", "1", "-o", str(data)]) == 0
    cfg = write_config(tmp_path, variant="jmvae3", synthetic=None, dataset="d.bin")
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path), "--plot"]) == 0
    assert (tmp_path / "metrics.png").exists()
    capsys.readouterr()

    report = tmp_path / "report.json"
    code = main(["eval", "--checkpoint", str(tmp_path / "checkpoint.json"), "--dataset", str(data),
                 "--source", "a+b", "--source", "a", "--target", "c", "-o", str(report), "--plot"])
    doc = json.loads(report.read_text())
    assert code == 1
    assert set(doc["errors"]) == {"{a,b}->c"}
    assert doc["failures"] == [{"error": "encoder not in inventory", "source": ["a"], "target": "c"}]
    assert (tmp_path / "report.png").exists()

    code = main(["eval", "--checkpoint", str(tmp_path / "checkpoint.json"), "--dataset", str(data),
                 "-o", str(report)])
    doc = json.loads(report.read_text())
    assert code == 0 and len(doc["errors"]) == 4 * 3 and doc["metric"] == {"a": "mse", "b": "mse", "c": "mse"}

    code = main(["eval", "--checkpoint", str(tmp_path / "checkpoint.json"), "--dataset", str(data),
                 "--source", "zz"])
    assert code == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "m2vae", "expand", "--modalities", "a,b", "--format", "json"],
                          capture_output=True, text=True, check=True)
    assert len(json.loads(proc.stdout)["terms"]) == 9
