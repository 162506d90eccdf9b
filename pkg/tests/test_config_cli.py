import csv
import json

import numpy as np
import pytest
import yaml

from repmmd import cli
from repmmd import config as cfgmod
from repmmd import kernels as kn
from repmmd.errors import ConfigurationError
from repmmd.losses import disc_side


def write(path, text):
    path.write_text(text)
    return path


def test_empty_config_defaults(tmp_path):
    cfg = cfgmod.parse_config(write(tmp_path / "c.yaml", ""))
    train = cfg.train.build(cfg.seed)
    assert train.disc_loss.lam == 1.0
    k = train.disc_loss.kernel
    assert (k.variant, k.sigma, k.b_l, k.b_u) == ("rbf_b", 1.0, 0.25, 4.0)
    assert train.gen_loss.kernel == kn.rbf(1.0)
    assert train.normalizer.constant == pytest.approx(1 / 0.55)
    assert train.disc_output_dim == 16
    assert (train.batch_size, train.n_dis, train.beta1, train.beta2) == (64, 1, 0.5, 0.999)
    assert cfg == cfgmod.parse_config(None)


def test_attractive_clamping_selected(tmp_path):
    path = write(tmp_path / "c.yaml",
                 "train:\n  disc_loss: {lam: -1, kernel: {variant: rbf_b}}\n")
    spec = cfgmod.parse_config(path).train.build(0).disc_loss
    assert disc_side(spec.lam) is kn.LossSide.ATTRACTIVE
    assert spec.kernel.variant == "rbf_b"


@pytest.mark.parametrize("text,needle", [
    ("train:\n  disc_loss: {lamda: -1}\n", "train.disc_loss.lamda"),
    ("lamda: 1\n", "lamda"),
    ("train:\n  lr_d: fast\n", "train.lr_d"),
    ("train: [1, 2]\n", "train"),
    ("stability:\n  n_quadrature: 63\n", "stability"),
    ("train:\n  batch_size: 7\n", "train"),
    ("seed: -4\n", "seed"),
])
def test_rejections_name_the_path(tmp_path, text, needle):
    with pytest.raises(ConfigurationError) as info:
        cfgmod.parse_config(write(tmp_path / "c.yaml", text))
    assert needle in str(info.value)
    assert str(tmp_path / "c.yaml") in str(info.value)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        cfgmod.parse_config(tmp_path / "nope.yaml")
    with pytest.raises(ConfigurationError, match="malformed"):
        cfgmod.parse_config(write(tmp_path / "bad.yaml", "train: {a: [1, 2\n"))


def test_dump_round_trips(tmp_path):
    cfg = cfgmod.parse_config(None, {"seed": 9, "train": {"lambdas": [0.5]}})
    again = cfgmod.parse_config(write(tmp_path / "c.yaml", cfgmod.dump(cfg)))
    assert again == cfg
    assert yaml.safe_load(cfgmod.dump(cfg))["seed"] == 9


def _csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _samples(path, x):
    cli.write_csv(path, ["a", "b"], x.tolist())
    return path


def test_mmd_test_against_itself(tmp_path):
    x = np.random.default_rng(0).standard_normal((20, 2))
    f = _samples(tmp_path / "x.csv", x)
    code = cli.main(["mmd-test", "--x", str(f), "--y", str(f), "--out", str(tmp_path / "o")])
    assert code == 0
    row = _csv_rows(tmp_path / "o" / "mmd_test.csv")[0]
    assert float(row["statistic"]) == 0.0


def test_mmd_test_permutation_detects_shift(tmp_path):
    r = np.random.default_rng(1)
    fx = _samples(tmp_path / "x.csv", r.standard_normal((30, 2)))
    fy = _samples(tmp_path / "y.csv", r.standard_normal((30, 2)) + 1.5)
    out = tmp_path / "o"
    assert cli.main(["mmd-test", "--x", str(fx), "--y", str(fy), "--out", str(out),
                     "--permutations", "50"]) == 0
    row = _csv_rows(out / "mmd_test.csv")[0]
    assert float(row["statistic"]) > 0 and float(row["p_value"]) == pytest.approx(1 / 51)


def test_mmd_test_unequal_sizes_fail(tmp_path, capsys):
    r = np.random.default_rng(2)
    fx = _samples(tmp_path / "x.csv", r.standard_normal((10, 2)))
    fy = _samples(tmp_path / "y.csv", r.standard_normal((12, 2)))
    code = cli.main(["mmd-test", "--x", str(fx), "--y", str(fy), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    assert "equal group sizes" in capsys.readouterr().err


def test_mmd_test_needs_inputs(tmp_path):
    assert cli.main(["mmd-test", "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_stability_grid_shape(tmp_path):
    cfg = write(tmp_path / "c.yaml", "stability: {resolution: 7, trajectory_steps: 20}\n")
    out = tmp_path / "o"
    assert cli.main(["simulate-stability", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "field.ndjson").read_text().splitlines()
    assert len(lines) == 49
    assert set(json.loads(lines[0])) == {"w1", "w2", "dw1", "dw2"}
    eq = json.loads((out / "equilibria.ndjson").read_text().splitlines()[0])
    assert eq["converged"] and max(eq["eig_real"]) < 0
    traj = _csv_rows(out / "trajectories.csv")
    assert {r["trajectory"] for r in traj} == {"0", "1", "2"}


def test_specnorm_bundled_kernels(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["specnorm", "--out", str(out)]) == 0
    rows = _csv_rows(out / "specnorm.csv")
    assert {r["method"] for r in rows} == {"pim", "pico"}
    assert all(float(r["rel_error"]) < 1e-4 for r in rows)
    all_ones = [r for r in rows if r["kernel_id"] == "1" and r["method"] == "pico"][0]
    assert float(all_ones["estimate"]) == pytest.approx(9.0, rel=1e-10)


def test_train_writes_only_inside_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = write(tmp_path / "c.yaml", "train: {total_steps: 4, eval_interval: 2, n_eval: 16}\n")
    before = set(p.name for p in tmp_path.iterdir())
    assert cli.main(["train", "--config", str(cfg), "--out", "run", "--seed", "4"]) == 0
    assert set(p.name for p in tmp_path.iterdir()) - before == {"run"}
    files = sorted(p.name for p in (tmp_path / "run").iterdir())
    assert files == ["config.yaml", "manifest.json", "records.ndjson", "samples.csv"]
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["seed"] == 4
    assert yaml.safe_load((tmp_path / "run" / "config.yaml").read_text())["seed"] == 4


def test_train_abort_exit_status(tmp_path, monkeypatch):
    from repmmd import trainer as tr

    def boom(config, on_record=None):
        raise tr.TrainingAborted("non-finite", {"step": 3, "loss": float("nan")}, [])

    monkeypatch.setattr(tr, "train", boom)
    out = tmp_path / "o"
    assert cli.main(["train", "--out", str(out)]) == cli.EXIT_ABORT
    last = json.loads((out / "records.ndjson").read_text().splitlines()[-1])
    assert last["aborted"] is True and last["step"] == 3 and last["loss"] is None


def test_show_config(capsys):
    assert cli.main(["show-config"]) == 0
    assert "disc_loss" in capsys.readouterr().out


def test_kernel_curves_command(tmp_path):
    assert cli.main(["kernel-curves", "--out", str(tmp_path)]) == 0
    rows = _csv_rows(tmp_path / "kernel_derivatives.csv")
    assert len(rows) == 1001 and float(rows[0]["mean"]) == 0.0
