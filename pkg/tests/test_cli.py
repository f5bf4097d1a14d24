import json

import pytest

from ebrates.cli import main

SMALL = """\
model: {kind: white_noise}
prior: {family: regularity_gaussian}
truth: {kind: hyperrect, beta: 1.0}
n_list: [32, 64, 128]
replicates: 2
grid: {points: 12}
hyperprior: {kind: exponential, rate: 1.0}
rates: {draws: 64}
radius_draws: 200
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(SMALL)
    return p


@pytest.mark.parametrize("command, files", [
    ("simulate", ["data.csv", "truth.csv"]),
    ("mmle", ["marginal.csv", "marginal.png"]),
    ("rates", ["rates.csv", "rate_curve.png"]),
    ("experiment", ["records.csv", "plot_data.csv", "rate_fit.png"]),
    ("hb", ["hb_weights.csv"]),
])
def test_commands(cfg, tmp_path, command, files):
    out = tmp_path / command
    assert main([command, "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    for f in files + ["manifest.json"]:
        assert (out / f).is_file(), f
    m = json.loads((out / "manifest.json").read_text())
    assert set(m) == {"config", "summaries", "version", "timestamp"}
    assert m["config"]["base_seed"] == 3


def test_seed_determinism(cfg, tmp_path):
    for d in ("a", "b"):
        assert main(["experiment", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "records.csv").read_bytes() == (tmp_path / "b" / "records.csv").read_bytes()


def test_config_error(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("model: {kind: white_noise}\nprior: {family: sieve}\nn_list: [64, 32]\n")
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_numerical_failure(tmp_path):
    # a Poisson hyper-prior puts no mass on a non-integer grid
    p = tmp_path / "num.yaml"
    p.write_text("model: {kind: white_noise}\nprior: {family: regularity_gaussian}\n"
                 "n_list: [64]\ngrid: {values: [0.5, 1.5]}\n"
                 "hyperprior: {kind: poisson, mean: 2.0}\n")
    assert main(["hb", "--config", str(p), "--out", str(tmp_path / "o")]) == 3


def test_unknown_command():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", "--config", "x"])
    assert exc.value.code == 2
