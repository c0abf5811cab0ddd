import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from pbbvi import __version__
from pbbvi import cli
from pbbvi import experiments as ex
from pbbvi.models import Dataset


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


@pytest.fixture
def toy_csv(tmp_path):
    return write_csv(
        tmp_path / "toy.csv",
        ["a", "b", "label"],
        [[1.0, 5.0, 0], [2.0, 5.0, 1], [3.0, 5.0, 0], [4.0, 5.0, 1]],
    )


@pytest.fixture
def class_csv(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(24, 3))
    y = (X[:, 0] + 0.3 * X[:, 1] > 0).astype(int)
    return write_csv(tmp_path / "cls.csv", ["x1", "x2", "x3", "y"], [[*x, int(t)] for x, t in zip(X, y)])


# -- ingestion -------------------------------------------------------------


def test_load_toy_csv(toy_csv):
    data = cli.load_csv(toy_csv)
    assert data.M == 4 and data.D == 2
    assert np.array_equal(data.targets, [0, 1, 0, 1])
    assert np.array_equal(data.inputs[:, 0], [1, 2, 3, 4])  # row order preserved


def test_standardize_constant_column_is_zero(toy_csv):
    data = cli.load_csv(toy_csv, standardize=True)
    assert np.array_equal(data.inputs[:, 1], np.zeros(4))
    assert data.inputs[:, 0].mean() == pytest.approx(0.0, abs=1e-15)
    assert data.inputs[:, 0].std() == pytest.approx(1.0)


def test_label_column_by_name_and_index(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["cls", "x"], [["M", 0.1], ["B", 0.2], ["M", 0.3]])
    by_name = cli.load_csv(path, "cls")
    by_index = cli.load_csv(path, 0)
    assert np.array_equal(by_name.targets, [1, 0, 1])  # sorted mapping: B → 0, M → 1
    assert np.array_equal(by_index.targets, by_name.targets)
    path = write_csv(tmp_path / "e.csv", ["x", "y"], [[0.0, 1], [1.0, 2], [2.0, 2]])
    assert np.array_equal(cli.load_csv(path).targets, [0, 1, 1])


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        cli.load_csv(tmp_path / "missing.csv")
    bad = write_csv(tmp_path / "bad.csv", ["x", "y"], [[0.0, 1], ["oops", 0]])
    with pytest.raises(ValueError, match="row 3, column 0"):
        cli.load_csv(bad)
    multi = write_csv(tmp_path / "multi.csv", ["x", "y"], [[0.0, 0], [1.0, 1], [2.0, 2]])
    with pytest.raises(ValueError, match="not binary"):
        cli.load_csv(multi)
    with pytest.raises(ValueError, match="label column"):
        cli.load_csv(multi, "nope")


def test_split_sizes_and_determinism():
    data = Dataset(np.arange(10.0)[:, None], np.zeros(10))
    a, b = cli.split(data, 0.5, seed=3)
    assert (a.M, b.M) == (5, 5)
    c, d = cli.split(data, 0.5, seed=3)
    assert np.array_equal(a.inputs, c.inputs) and np.array_equal(b.inputs, d.inputs)
    assert sorted(np.concatenate([a.inputs[:, 0], b.inputs[:, 0]])) == list(range(10))
    assert cli.split(Dataset(np.arange(7.0)[:, None], np.zeros(7)), 0.5, 0)[0].M == 4
    with pytest.raises(ValueError):
        cli.split(data, 1.0, 0)


def test_three_way_split():
    data = Dataset(np.arange(12.0)[:, None], np.zeros(12))
    parts = ex.split_three(data, seed=1)
    assert [p.M for p in parts] == [4, 4, 4]
    assert sorted(np.concatenate([p.inputs[:, 0] for p in parts])) == list(range(12))


def test_standardize_uses_training_statistics():
    train = Dataset([[0.0, 1.0], [2.0, 1.0]], [0, 1])
    test = Dataset([[4.0, 3.0]], [1])
    tr, te = ex.standardize(train, test)
    assert np.allclose(tr.inputs[:, 0], [-1, 1])
    assert np.allclose(te.inputs, [[3.0, 0.0]])


# -- config ----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        cli.RunConfig("fit-1d", method="perturbative", order=4)
    with pytest.raises(ValueError):
        cli.RunConfig("gp-class")  # needs --data
    with pytest.raises(ValueError):
        cli.RunConfig("nope")
    cfg = cli.RunConfig("fit-1d", samples=7, iters=9, lr=0.2, lr_decay=float("inf"))
    icfg = cfg.inference_config()
    assert (icfg.S, icfg.T, icfg.lr0, icfg.lr_decay) == (7, 9, 0.2, float("inf"))
    assert cli.RunConfig("convergence-race", data="x.csv").inference_config().lr_decay == float("inf")


# -- running ----------------------------------------------------------------


def test_fit_1d_records(tmp_path):
    ratios = {}
    for method in ("perturbative", "kl"):
        out = tmp_path / f"fit-{method}.jsonl"
        rec = cli.run(cli.RunConfig("fit-1d", method=method, samples=10, iters=50, lr=0.01, out=str(out)))
        ratios[method] = rec.metrics["mass_covering"]
        lines = [json.loads(x) for x in out.read_text().splitlines()]
        assert lines[0]["type"] == "record" and lines[0]["version"] == __version__
        assert all(x["type"] == "row" for x in lines[1:])
        assert {r["method"] for r in lines[1:]} >= {"kl"}
    assert ratios["kl"] == 1.0
    assert ratios["perturbative"] > 0


def test_divergence_check_rows():
    rec = cli.run(cli.RunConfig("divergence-check", samples=2000))
    assert len(rec.rows) == 51
    assert all(r["d_f"] >= -4 * r["std_error"] for r in rec.rows[:-1])
    assert rec.metrics["all_nonnegative"] is True
    assert rec.metrics["posterior_consistent_with_zero"] is True


def test_config_echo_round_trip(tmp_path):
    out = tmp_path / "a.jsonl"
    first = cli.run(cli.RunConfig("fit-1d", samples=5, iters=30, lr=0.01, seed=4, out=str(out)))
    echo = json.loads(out.read_text().splitlines()[0])["config"]
    again = cli.run(cli.RunConfig(**{**echo, "out": None}))
    assert again.rows == first.rows and again.metrics == first.metrics


def test_csv_output_has_header_and_meta(tmp_path):
    out = tmp_path / "div.csv"
    rec = cli.run(cli.RunConfig("divergence-check", samples=1000, format="csv", out=str(out)))
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == rec.columns
    assert len(rows) == len(rec.rows)
    meta = json.loads((tmp_path / "div.csv.meta.json").read_text())
    assert meta["experiment"] == "divergence-check" and meta["columns"] == rec.columns


def test_variance_scaling_table_format(tmp_path, monkeypatch):
    original = ex.variance_scaling
    small = lambda config, seeds: original(
        specs=ex.SCALING_SPECS, N_values=(1, 2), seeds=seeds, n_samples=1000, config=replace(config, T=5)
    )
    monkeypatch.setattr(ex, "variance_scaling", small)
    out = tmp_path / "scaling.csv"
    rec = cli.run(cli.RunConfig("variance-scaling", format="csv", out=str(out)))
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["N", "spec", "mean_variance", "seed"]
    assert len(rows) == 2 * 4
    assert "regressions" in rec.metrics


def test_gp_class_and_race_on_small_csv(class_csv):
    rec = cli.run(cli.RunConfig("gp-class", data=str(class_csv), samples=5, iters=50))
    assert {r["method"] for r in rec.rows} == {"kl", "perturbative K=3"}
    assert all(0 <= r["error_rate"] <= 1 for r in rec.rows)
    rec = cli.run(cli.RunConfig("convergence-race", data=str(class_csv), samples=5, iters=40, lr=1e-3))
    assert {"baseline_final_ll", "contender_iterations_to_baseline_final", "fraction"} <= set(rec.metrics)
    assert [r["iteration"] for r in rec.rows if r["method"] == "alpha=0.5"] == [40]


def test_main_exit_codes(tmp_path, capsys):
    assert cli.main(["--experiment", "fit-1d", "--samples", "5", "--iters", "10", "--lr", "0.01"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert json.loads(out[0])["type"] == "record"
    assert cli.main(["--experiment", "gp-class", "--data", str(tmp_path / "missing.csv")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError"
    assert cli.main(["--experiment", "fit-1d", "--order", "4"]) == 1
