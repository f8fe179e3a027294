import json
import os

import numpy as np
import pytest

from vfem.cli import EXIT_NOT_CONVERGED, EXIT_OK, EXIT_VALIDATION, main
from vfem.messages import MESSAGE_KINDS, WireSchema, decode
from vfem.dataio import read_dataset


@pytest.fixture
def dataset_dir(tmp_path):
    out = tmp_path / "data"
    code = main(["generate", "--n", "300", "--clients", "2,2", "--rho", "0.3",
                 "--seed", "42", "--out", str(out)])
    assert code == EXIT_OK
    return out


def test_generate_writes_expected_files(dataset_dir):
    assert sorted(os.listdir(dataset_dir)) == [
        "client_1.csv", "client_2.csv", "layout.json", "truth.json"]


def test_generate_rejects_empty(tmp_path, capsys):
    code = main(["generate", "--n", "0", "--clients", "2,2",
                 "--out", str(tmp_path / "x")])
    assert code == EXIT_VALIDATION


def test_generate_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        main(["generate", "--n", "100", "--clients", "2,1", "--rho", "0.2",
              "--seed", "7", "--out", str(out)])
    for name in os.listdir(a):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_smes_preset_matches_reference_rates(tmp_path, capsys):
    out = tmp_path / "smes"
    code = main(["generate", "--preset", "smes-like", "--n", "3000",
                 "--seed", "1", "--out", str(out)])
    assert code == EXIT_OK
    manifest = json.loads((out / "layout.json").read_text())
    assert manifest["block_dims"] == [12, 3, 6, 9, 5]
    assert manifest["missing_rates_config"] == [0.5365, 0.8761, 0.9305,
                                                0.0091, 0.9328]
    assert len(os.listdir(out)) == 7  # five client files + manifest + truth


def test_fit_infer_pipeline(dataset_dir, tmp_path, capsys):
    fit_path = tmp_path / "fit.json"
    trace_path = tmp_path / "trace.log"
    code = main(["fit", "--data", str(dataset_dir), "--engine", "federated",
                 "--tol", "1e-10", "--trace", str(trace_path),
                 "--out", str(fit_path)])
    assert code == EXIT_OK
    report = json.loads(fit_path.read_text())
    assert report["fit"]["converged"] is True
    assert report["fit"]["comm"]["bytes_total"] > 0

    # every traced record belongs to the closed vocabulary
    data, _ = read_dataset(str(dataset_dir))
    schema = WireSchema(data.layout, data.mask)
    lines = trace_path.read_text().splitlines()
    assert lines
    for line in lines:
        msg = decode(line + "\n")
        assert msg.kind in MESSAGE_KINDS
        schema.validate(msg)

    infer_path = tmp_path / "infer.json"
    code = main(["infer", "--data", str(dataset_dir), "--fit", str(fit_path),
                 "--out", str(infer_path), "--stats", "sketch"])
    assert code == EXIT_OK
    rep = json.loads(infer_path.read_text())
    assert len(rep["std_errors"]) == 4
    assert all(se > 0 for se in rep["std_errors"])
    assert (tmp_path / "infer.csv").exists()


def test_fit_not_converged_exit_code(dataset_dir, tmp_path, capsys):
    code = main(["fit", "--data", str(dataset_dir), "--engine", "federated",
                 "--max-iters", "2", "--tol", "1e-14",
                 "--out", str(tmp_path / "f.json")])
    assert code == EXIT_NOT_CONVERGED


def test_fit_reports_deterministic(dataset_dir, tmp_path):
    outs = []
    for run in range(2):
        path = tmp_path / f"fit{run}.json"
        main(["fit", "--data", str(dataset_dir), "--engine", "federated",
              "--tol", "1e-9", "--out", str(path)])
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_infer_hint_when_not_a_fixed_point(dataset_dir, tmp_path, capsys):
    fit_path = tmp_path / "loose.json"
    main(["fit", "--data", str(dataset_dir), "--engine", "federated",
          "--max-iters", "3", "--tol", "1e-14", "--out", str(fit_path)])
    code = main(["infer", "--data", str(dataset_dir), "--fit", str(fit_path),
                 "--out", str(tmp_path / "i.json")])
    assert code == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "tighter tolerance" in err


def test_fit_report_matches_least_squares_without_missingness(tmp_path, capsys):
    data_dir = tmp_path / "clean"
    assert main(["generate", "--n", "400", "--clients", "2,2", "--rho", "0",
                 "--seed", "8", "--out", str(data_dir)]) == EXIT_OK
    reports = {}
    for engine in ("oracle", "federated"):
        out = tmp_path / f"{engine}.json"
        assert main(["fit", "--data", str(data_dir), "--engine", engine,
                     "--tol", "1e-13", "--out", str(out)]) == EXIT_OK
        reports[engine] = np.asarray(
            json.loads(out.read_text())["fit"]["theta"]["beta"])
    data, _ = read_dataset(str(data_dir))
    x = data.full_design()
    beta_ls = np.linalg.solve(x.T @ x, x.T @ data.y)
    assert np.abs(reports["oracle"] - beta_ls).max() < 1e-10
    assert np.abs(reports["federated"] - reports["oracle"]).max() < 1e-4

    # exact-statistics standard errors reproduce the classical ones
    infer_out = tmp_path / "clean_infer.json"
    assert main(["infer", "--data", str(data_dir),
                 "--fit", str(tmp_path / "oracle.json"),
                 "--out", str(infer_out), "--stats", "exact"]) == EXIT_OK
    rep = json.loads(infer_out.read_text())
    resid = data.y - x @ beta_ls
    sigma2 = float(np.mean(resid ** 2))
    se = np.sqrt(np.diag(sigma2 * np.linalg.inv(x.T @ x)))
    assert np.abs(np.asarray(rep["std_errors"]) / se - 1.0).max() < 1e-6


def test_config_file_with_flag_override(tmp_path, capsys):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("# generation settings\nn = 120\nclients = [2, 2]\n"
                   "rho = 0.25\nseed = 3\n")
    out = tmp_path / "d"
    code = main(["generate", "--config", str(cfg), "--n", "60",
                 "--out", str(out)])
    assert code == EXIT_OK
    manifest = json.loads((out / "layout.json").read_text())
    assert manifest["n"] == 60            # flag wins
    assert manifest["missing_rates_config"] == [0.25, 0.25]


def test_montecarlo_and_benchmark_run(tmp_path, capsys):
    code = main(["montecarlo", "--reps", "2", "--n", "200", "--clients", "2,2",
                 "--rho", "0.3", "--methods", "vfem,impute", "--seed", "1",
                 "--with-inference", "--out", str(tmp_path / "mc.csv")])
    assert code == EXIT_OK
    table = (tmp_path / "mc.csv").read_text()
    assert table.count("\n") == 3
    vfem_row = table.splitlines()[1].split(",")
    assert vfem_row[0] == "vfem" and vfem_row[5] != ""  # coverage column filled

    code = main(["benchmark", "--sizes", "200,400", "--clients", "2,2",
                 "--iters", "2", "--out", str(tmp_path / "bench.json")])
    assert code == EXIT_OK
    prof = json.loads((tmp_path / "bench.json").read_text())
    assert prof["linear_fit"]["r2"] > 0.9
