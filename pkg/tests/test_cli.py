"""Subprocess harness for the command-line contract."""

import subprocess
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = Path(__file__).parent / "golden"
SMOKE = ROOT / "configs" / "smoke.cfg"


def run(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "fuseode", *map(str, args)],
                          capture_output=True, text=True, cwd=cwd)


def tree_bytes(directory):
    return {p.relative_to(directory): p.read_bytes() for p in sorted(Path(directory).rglob("*")) if p.is_file()}


@pytest.mark.parametrize("family,steps,expected", [
    ("ab", 4, "-9/24 37/24 -59/24 55/24"),
    ("ab", 1, "1/1"),
    ("am", 1, "1/2 1/2"),
    ("am", 3, "1/24 -5/24 19/24 9/24"),
])
def test_coeffs(family, steps, expected):
    r = run("coeffs", "--family", family, "--steps", steps)
    assert r.returncode == 0
    assert r.stdout.strip() == expected


@pytest.mark.parametrize("args", [
    ("coeffs", "--family", "ab", "--steps", "9"),
    ("coeffs", "--family", "bdf", "--steps", "2"),
    ("frobnicate",),
    ("trace", "--L", "4", "--bogus"),
    ("trace", "--L", "1"),
    ("trace", "--L", "4", "--max-order", "7"),
    (),
])
def test_usage_errors(args):
    r = run(*args)
    assert r.returncode == 2
    assert r.stderr.strip()


@pytest.mark.parametrize("L", [2, 3, 4, 5, 6, 8])
def test_trace_golden(L):
    r = run("trace", "--L", L)
    assert r.returncode == 0
    assert r.stdout == (GOLDEN / f"trace_L{L}.txt").read_text()


def test_trace_equations_golden():
    r = run("trace", "--L", "5", "--equations")
    assert r.returncode == 0
    assert r.stdout == (GOLDEN / "workflow_L5.txt").read_text()


def test_order_study(tmp_path):
    out = tmp_path / "orders.csv"
    r = run("order-study", "--out", out)
    assert r.returncode == 0, r.stdout + r.stderr
    assert out.read_text().splitlines()[0] == "scheme,steps,nominal_order,delta,max_error,empirical_order"
    assert r.stdout.count("PASS") == 7


def test_order_study_check_failure(tmp_path):
    r = run("order-study", "--out", tmp_path / "o.csv", "--tol", "0")
    assert r.returncode == 1
    assert "FAILED" in r.stdout


def test_order_study_usage():
    assert run("order-study", "--resolutions", "16").returncode == 2
    assert run("order-study", "--resolutions", "a,b").returncode == 2


def test_ode_check():
    r = run("ode-check")
    assert r.returncode == 0
    lines = r.stdout.splitlines()
    assert lines[0] == "L,y_final,exact,abs_error"
    assert [line.split(",")[0] for line in lines[1:]] == ["4", "8", "16"]


def test_ode_check_failure_names_invariant():
    r = run("ode-check", "--tol", "1e-9")
    assert r.returncode == 1
    assert "L=16" in r.stderr


def test_gradcheck():
    r = run("gradcheck")
    assert r.returncode == 0, r.stderr
    assert "max rel_error" in r.stdout


def test_gradcheck_failure():
    r = run("gradcheck", "--tol", "0")
    assert r.returncode == 1
    assert "FAILED" in r.stderr


def test_synth_is_idempotent(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ra = run("synth", "--n", 3, "--seed", 7, "--out", a)
    rb = run("synth", "--n", 3, "--seed", 7, "--out", b)
    assert ra.returncode == rb.returncode == 0
    assert "# seed=7" in ra.stdout.splitlines()
    assert ra.stdout.replace(str(a), "") == rb.stdout.replace(str(b), "")
    files = tree_bytes(a)
    assert len(files) == 6 and files == tree_bytes(b)


def test_synth_bad_size(tmp_path):
    assert run("synth", "--H", 8, "--out", tmp_path / "x").returncode == 2


def test_train_missing_config(tmp_path):
    r = run("train", "--config", tmp_path / "missing.cfg", "--out", tmp_path / "run")
    assert r.returncode == 2
    assert "missing.cfg" in r.stderr


def test_train_bad_config(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = -1\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "run").returncode == 2


def test_train_then_eval(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    ra = run("train", "--config", SMOKE, "--seed", 3, "--out", out_a)
    rb = run("train", "--config", SMOKE, "--seed", 3, "--out", out_b)
    assert ra.returncode == 0, ra.stderr
    assert ra.stdout.splitlines()[0] == "# seed=3"
    assert ra.stdout == rb.stdout
    assert tree_bytes(out_a) == tree_bytes(out_b)

    metrics = (out_a / "metrics.csv").read_text().splitlines()
    assert "# seed=3" in metrics
    assert (out_a / "ckpt" / "manifest.txt").is_file()

    data = tmp_path / "data"
    assert run("synth", "--n", 2, "--H", 16, "--W", 16, "--seed", 9, "--out", data).returncode == 0
    r1 = run("eval", "--ckpt", out_a / "ckpt", "--data", data)
    r2 = run("eval", "--ckpt", out_a / "ckpt", "--data", data)
    assert r1.returncode == 0, r1.stderr
    assert r1.stdout.startswith("samples=2 dice=")
    assert r1.stdout == r2.stdout


def test_eval_missing_inputs(tmp_path):
    assert run("eval", "--ckpt", tmp_path / "nope", "--data", tmp_path).returncode == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    ckpt = tmp_path / "run"
    assert run("train", "--config", SMOKE, "--out", ckpt).returncode == 0
    assert run("eval", "--ckpt", ckpt / "ckpt", "--data", tmp_path / "absent").returncode == 2
    assert run("eval", "--ckpt", ckpt / "ckpt", "--data", empty).returncode == 2


def test_main_returns_codes():
    from fuseode.cli import main

    assert main(["coeffs", "--family", "am", "--steps", "2"]) == 0
    assert main(["coeffs", "--family", "am", "--steps", "4"]) == 2
    assert main(["nope"]) == 2
