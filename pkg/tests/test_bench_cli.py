import json
import os

import numpy as np
import pytest

from deepbayes import rand_dist as rd
from deepbayes.bench_cli import (BlrViModel, Dataset, ExperimentConfig,
                                 gen_cubic_toy, gen_deep_linear, load_csv,
                                 main, run_experiment)
from deepbayes.train import TrainConfig


# -- synthetic datasets --------------------------------------------------------------

def test_cubic_toy_shape_support_and_normalization():
    ds = gen_cubic_toy(seed=1)
    assert ds.X_train.shape == (40, 1) and ds.y_train.shape == (40,)
    raw_x = ds.extra["raw_x"]
    assert np.all((np.abs(raw_x) >= 2.0) & (np.abs(raw_x) <= 4.0))
    assert abs(ds.X_train.mean()) < 1e-12 and abs(ds.X_train.std() - 1.0) < 1e-12
    assert abs(ds.y_train.mean()) < 1e-12 and abs(ds.y_train.std() - 1.0) < 1e-12
    # round trip through the stored statistics
    assert np.allclose(ds.denormalize_y(ds.y_train), ds.extra["raw_y"])


def test_cubic_toy_deterministic_per_seed():
    a, b = gen_cubic_toy(seed=3), gen_cubic_toy(seed=3)
    assert np.array_equal(a.X_train, b.X_train)
    assert np.array_equal(a.y_train, b.y_train)
    c = gen_cubic_toy(seed=4)
    assert not np.array_equal(a.y_train, c.y_train)


def test_deep_linear_shapes_and_analytic_marginal():
    ds = gen_deep_linear(seed=0)
    assert ds.X_train.shape == (1000, 5) and ds.X_test.shape == (100, 5)
    # the stored marginal equals a direct density evaluation
    lml = rd.mvn_log_density(
        ds.y_train, np.zeros(1000),
        cov=ds.X_train @ ds.X_train.T / 5 + 0.1 * np.eye(1000)).value
    assert np.isclose(ds.extra["analytic_lml"], lml, atol=1e-8)


def test_deep_linear_marginal_concentrates_on_expected_value():
    # E[lml | X] = -0.5 (N log 2pi + log|C| + N); average the deviation
    # over seeds and compare against its Monte-Carlo error
    devs = []
    for seed in range(30):
        ds = gen_deep_linear(seed=seed)
        C = ds.X_train @ ds.X_train.T / 5 + 0.1 * np.eye(1000)
        sign, logdet = np.linalg.slogdet(C)
        expected = -0.5 * (1000 * np.log(2 * np.pi) + logdet + 1000)
        devs.append(ds.extra["analytic_lml"] - expected)
    devs = np.asarray(devs)
    se = devs.std(ddof=1) / np.sqrt(len(devs))
    assert abs(devs.mean()) < 3 * se


# -- CSV loading ----------------------------------------------------------------------

def _write_csv(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_load_csv_split_and_normalization(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["a,b,target"]
    data = rng.standard_normal((30, 3))
    rows += [",".join(f"{v:.8f}" for v in row) for row in data]
    path = _write_csv(tmp_path, "\n".join(rows))
    ds = load_csv(path, seed=5)
    assert ds.X_train.shape == (27, 2) and ds.X_test.shape == (3, 2)
    assert np.allclose(ds.X_train.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(ds.X_train.std(axis=0), 1.0, atol=1e-12)
    # split is deterministic per seed
    ds2 = load_csv(path, seed=5)
    assert np.array_equal(ds.X_test, ds2.X_test)


def test_load_csv_error_messages(tmp_path):
    path = _write_csv(tmp_path, "a,b\n1.0,2.0\n3.0\n")
    with pytest.raises(ValueError, match="row 3"):
        load_csv(path)
    path = _write_csv(tmp_path, "a,b\n1.0,oops\n", name="d2.csv")
    with pytest.raises(ValueError, match="row 2, column 2"):
        load_csv(path)
    path = _write_csv(tmp_path, "a\n1.0\n", name="d3.csv")
    with pytest.raises(ValueError, match="2 columns"):
        load_csv(path)
    path = _write_csv(tmp_path, "", name="d4.csv")
    with pytest.raises(ValueError, match="empty"):
        load_csv(path)


def test_denormalization_round_trip(tmp_path):
    rows = ["x,y"] + [f"{i},{2 * i + 1}" for i in range(20)]
    ds = load_csv(_write_csv(tmp_path, "\n".join(rows)), seed=0)
    orig = ds.denormalize_y(ds.y_test)
    # recover the original targets exactly from the stored statistics
    assert np.allclose(orig, np.round(orig))


# -- config parsing ------------------------------------------------------------------

def test_experiment_config_from_dict_nested_train():
    cfg = ExperimentConfig.from_dict({
        "model": "gp", "dataset": "cubic-toy", "widths": [10, 10],
        "train": {"steps": 50, "lr": 0.05, "anneal_steps": 0}})
    assert cfg.model == "gp"
    assert cfg.widths == (10, 10)
    assert cfg.train.steps == 50 and cfg.train.lr == 0.05


def test_experiment_config_ignores_unknown_keys():
    cfg = ExperimentConfig.from_dict({"model": "blr", "bogus": 1})
    assert cfg.model == "blr"


# -- experiment runs -----------------------------------------------------------------

def test_run_experiment_writes_result_and_is_reproducible(tmp_path):
    cfg = ExperimentConfig(model="blr", dataset="cubic-toy", seed=3,
                           out=str(tmp_path / "r1"),
                           train=TrainConfig(steps=40, lr=0.05, anneal_steps=0,
                                             eval_every=20))
    res1 = run_experiment(cfg)
    path = os.path.join(cfg.out, "blr_cubic-toy_3.json")
    assert os.path.exists(path)
    with open(path) as fh:
        saved = json.load(fh)
    assert saved["final"] == res1.final
    # 1-D dataset also writes predictive bands
    assert os.path.exists(os.path.join(cfg.out, "blr_cubic-toy_3.bands"))

    cfg2 = ExperimentConfig(model="blr", dataset="cubic-toy", seed=3,
                            out=str(tmp_path / "r2"),
                            train=TrainConfig(steps=40, lr=0.05, anneal_steps=0,
                                              eval_every=20))
    res2 = run_experiment(cfg2)
    assert res1.final == res2.final


def test_run_experiment_unknown_model():
    with pytest.raises(ValueError, match="unknown model"):
        run_experiment(ExperimentConfig(model="nope", dataset="cubic-toy"))


def test_closed_form_linear_vi_approaches_exact_marginal(tmp_path):
    # short run: the closed-form ELBO must move toward the exact marginal
    ds = gen_cubic_toy(seed=0)
    model = BlrViModel(ds)
    from deepbayes.train import train_loop
    res = train_loop(model, ds, TrainConfig(steps=500, lr=0.05, anneal_steps=0,
                                            eval_every=250))
    lml = model.exact_lml(ds)
    gap0 = abs(res["trace"][0]["elbo_per_point"] - lml / 40)
    gap1 = abs(res["trace"][-1]["elbo_per_point"] - lml / 40)
    assert gap1 < gap0
    assert res["trace"][-1]["elbo_per_point"] <= lml / 40 + 1e-9


# -- CLI entry point --------------------------------------------------------------------

def test_cli_check_passes(capsys):
    rc = main(["check"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "FAIL" not in out


def test_cli_toy_writes_dataset(tmp_path, capsys):
    rc = main(["--out", str(tmp_path), "toy", "cubic-toy"])
    assert rc == 0
    files = list(tmp_path.glob("*.npz"))
    assert len(files) == 1
    loaded = np.load(files[0])
    assert loaded["X_train"].shape == (40, 1)


def test_cli_run_from_yaml(tmp_path, capsys):
    cfgp = tmp_path / "exp.yaml"
    cfgp.write_text(
        "model: gp\ndataset: cubic-toy\nseed: 1\n"
        "train:\n  steps: 30\n  lr: 0.05\n  anneal_steps: 0\n  eval_every: 10\n")
    rc = main(["--out", str(tmp_path / "out"), "run", str(cfgp)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "model=gp" in out
    assert (tmp_path / "out" / "gp_cubic-toy_1.json").exists()
