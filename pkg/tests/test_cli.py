import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from semigroup_spectra.cli import (
    EXIT_CHECK,
    EXIT_MODEL,
    EXIT_NOINPUT,
    EXIT_OK,
    EXIT_STRUCTURE,
    EXIT_USAGE,
    TASK_ORDER,
    UsageError,
    dumps,
    emit_plot_data,
    main,
    parse_run_config,
    run,
)
from semigroup_spectra.measure_space import load_matrix
from semigroup_spectra.semiflow_model import bundled_model, linear_full_branch_model, save_model

FULL_TASKS = [
    "validate",
    "invariant",
    {"name": "spectrum", "t": 1.0, "k": 6},
    {"name": "poles", "strip": [-0.3, 0.3, 13.0], "d": 0.1},
    {"name": "projector", "center": [0.0, 0.0], "radius": 0.1},
    {"name": "invert", "t": 1.0, "a": 1.0, "ks": [25, 50, 100]},
    "report",
]


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_config(tmp_path, **data):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return path


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("full")
    cfg = write_config(d, model="bundled:constant", grid=[8, 16], tasks=FULL_TASKS, output_dir="out")
    code = main(["run", str(cfg)])
    assert main(["emit_plot_data", str(d / "out")]) == EXIT_OK
    return code, d / "out"


# pipeline


def test_full_pipeline_exits_zero(full_run):
    code, out = full_run
    assert code == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    assert rep["status"] == "ok"
    assert all(t["status"] == "ok" for t in rep["tasks"].values())
    assert rep["task_order"] == [t for t in TASK_ORDER if t in rep["tasks"]]


def test_report_has_mixing_verdict_and_pole_table(full_run):
    rep = json.loads((full_run[1] / "report.json").read_text())
    sr = rep["spectral_report"]
    assert sr["mixing"] is False and sr["simple_zero"] is True
    ims = sorted(p["im"] for p in sr["poles"] if abs(p["re"]) < 1e-2)
    np.testing.assert_allclose(ims, [2 * math.pi * k for k in range(-2, 3)], atol=1e-4)


def test_artifacts_are_written(full_run):
    out = full_run[1]
    for name in ["validate.json", "invariant.csv", "eigenvalues.csv", "poles.csv", "pole_scan.csv",
                 "projector.bin", "projector.json", "inversion.bin", "ladder.csv", "invert.json"]:
        assert (out / name).exists(), name
    P = load_matrix(out / "projector.bin")
    assert np.max(np.abs(P.matrix @ P.matrix - P.matrix)) <= 1e-7


def test_heatmap_rows_equal_scan_grid(full_run):
    out = full_run[1]
    shape = json.loads((out / "poles.json").read_text())["grid_shape"]
    _, rows = read_csv(out / "plot_pole_heatmap.csv")
    assert len(rows) == shape[0] * shape[1]


def test_ladder_csv_strictly_increasing_in_k(full_run):
    header, rows = read_csv(full_run[1] / "plot_inversion_ladder.csv")
    assert header == ["k", "weak_error"]
    ks = [float(r[0]) for r in rows]
    assert ks == sorted(ks) and len(set(ks)) == len(ks) == 3


def test_heatmap_maxima_sit_on_poles(full_run):
    out = full_run[1]
    _, rows = read_csv(out / "plot_pole_heatmap.csv")
    data = np.array(rows, dtype=float)
    re, im = np.unique(data[:, 0]), np.unique(data[:, 1])
    grid = data[:, 2].reshape(len(re), len(im))
    d = 0.1
    pad = np.pad(grid, 1, constant_values=-np.inf)
    maxima = []
    # interior local maxima only: on the re_min / re_max edges the peak may lie outside the window
    for i in range(1, len(re) - 1):
        for j in range(len(im)):
            nb = pad[i : i + 3, j : j + 3].copy()
            nb[1, 1] = -np.inf
            if j == 0:
                nb[:, 0] = pad[i : i + 3, 2]  # mirror across the real axis
            if grid[i, j] >= nb.max():
                maxima.append(complex(re[i], im[j]))
    poles = [complex(p["re"], p["im"]) for p in json.loads((out / "poles.json").read_text())["poles"] if p["im"] >= 0]
    assert maxima
    for p in poles:
        assert min(max(abs(p.real - m.real), abs(p.imag - m.imag)) for m in maxima) <= d + 1e-9
    for m in maxima:
        assert min(max(abs(p.real - m.real), abs(p.imag - m.imag)) for p in poles) <= d + 1e-9


def test_spectrum_plot_has_modulus(full_run):
    header, rows = read_csv(full_run[1] / "plot_spectrum.csv")
    assert header == ["operator", "re", "im", "modulus"]
    for _, a, b, m in rows:
        assert float(m) == pytest.approx(math.hypot(float(a), float(b)), rel=1e-9)


def test_report_is_byte_identical_across_runs(tmp_path):
    tasks = ["invariant", {"name": "spectrum", "k": 4}, {"name": "poles", "strip": [-0.2, 0.2, 2.0], "d": 0.1}]
    blobs = []
    for i in range(2):
        cfg = write_config(tmp_path, model="bundled:perturbed", grid=[4, 8], tasks=tasks, output_dir=f"o{i}", seed=3)
        assert main(["run", str(cfg)]) == EXIT_OK
        blobs.append((tmp_path / f"o{i}" / "report.json").read_bytes())
    assert blobs[0] == blobs[1]


# gating and errors


def test_unknown_task_is_usage_error(tmp_path, capsys):
    cfg = write_config(tmp_path, model="bundled:constant", tasks=["validate", "frobnicate"])
    assert main(["run", str(cfg)]) == EXIT_USAGE
    assert "frobnicate" in capsys.readouterr().err


def test_non_expanding_model_stops_at_validate(tmp_path):
    path = tmp_path / "flat.json"
    save_model(linear_full_branch_model(1, lambda_target=0.5), path)
    cfg = write_config(tmp_path, model=str(path), grid=[4, 8], tasks=["invariant", "spectrum"], output_dir="o")
    assert main(["run", str(cfg)]) == EXIT_MODEL
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["tasks"]["validate"]["status"] == "failed"
    assert rep["tasks"]["invariant"]["status"] == "skipped"
    assert rep["tasks"]["spectrum"]["status"] == "skipped"
    assert rep["status"] == "failed"


def test_failed_check_writes_partial_report(tmp_path, capsys):
    cfg = write_config(tmp_path, model="bundled:constant", grid=[4, 8],
                       tasks=[{"name": "projector", "center": [0.0, 6.2832], "radius": 0.1}, "invert"],
                       tolerances={"pole_threshold": 1e-6, "projector_idempotency": 1e-12}, output_dir="o")
    assert main(["run", str(cfg)]) == EXIT_CHECK
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["failed_check"] == "projector_idempotency"
    assert rep["tasks"]["invert"]["status"] == "skipped"
    assert "projector_idempotency" in capsys.readouterr().err


def test_dependencies_are_added_and_ordered():
    cfg = parse_run_config({"model": "bundled:constant", "tasks": ["report", "projector"]})
    assert [n for n, _ in cfg.tasks] == ["validate", "poles", "projector", "report"]


@pytest.mark.parametrize("data", [
    {"tasks": ["validate"]},
    {"model": "bundled:constant", "grid": "abc"},
    {"model": "bundled:constant", "tolerances": {"column_sum": -1}},
    {"model": "bundled:constant", "tolerances": {"bogus": 1}},
])
def test_bad_configs(data):
    with pytest.raises(UsageError):
        parse_run_config(data)


def test_missing_model_file_is_usage_error(tmp_path):
    cfg = write_config(tmp_path, model="nope.json", output_dir="o")
    assert main(["run", str(cfg)]) == EXIT_USAGE


def test_malformed_model_file_is_model_error(tmp_path):
    (tmp_path / "m.json").write_text("{broken")
    cfg = write_config(tmp_path, model="m.json", output_dir="o")
    assert main(["run", str(cfg)]) == EXIT_MODEL


def test_emit_without_artifacts(tmp_path):
    assert emit_plot_data(tmp_path / "missing") == EXIT_NOINPUT
    assert emit_plot_data(tmp_path) == EXIT_NOINPUT


def test_emit_with_report_but_deleted_artifact(full_run, tmp_path):
    out = tmp_path / "copy"
    out.mkdir()
    (out / "report.json").write_bytes((full_run[1] / "report.json").read_bytes())
    assert emit_plot_data(out) == EXIT_NOINPUT


# subcommands


def test_validate_subcommand(tmp_path, capsys):
    path = tmp_path / "m.json"
    save_model(bundled_model("constant"), path)
    assert main(["validate", str(path), "--grid", "8"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["passed"] is True
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["validate", str(bad)]) == EXIT_STRUCTURE


def test_model_check_subcommand(tmp_path, capsys):
    path = tmp_path / "flat.json"
    save_model(linear_full_branch_model(1, lambda_target=0.5), path)
    assert main(["model", "check", str(path), "--samples", "200"]) == EXIT_MODEL
    assert main(["model", "check", "bundled:constant", "--samples", "200"]) == EXIT_OK


def test_transfer_subcommand(tmp_path, capsys):
    assert main(["transfer", "--t", "0.7", "--grid", "4,8", "--out-dir", str(tmp_path)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["column_sum_error"] <= 1e-12 and abs(out["tv_norm"] - 1) <= 1e-10
    assert (tmp_path / "transfer.bin").exists()


def test_resolvent_subcommand_both_paths(tmp_path, capsys):
    for path in ("quad", "gen"):
        assert main(["resolvent", "--z", "2,1", "--path", path, "--grid", "4,8", "--out-dir", str(tmp_path)]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["tv_norm"] <= 0.5 + 1e-6


def test_invert_ladder_subcommand(tmp_path, capsys):
    assert main(["invert", "--k", "50", "--ladder", "--grid", "4,8", "--out-dir", str(tmp_path)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert {"t", "a", "k", "weak_error", "tv_error"} <= set(out)
    header, rows = read_csv(tmp_path / "ladder.csv")
    assert [float(r[header.index("k")]) for r in rows] == [6.25, 12.5, 25.0, 50.0]


def test_measure_norm_subcommand(tmp_path, capsys):
    assert main(["invariant", "--grid", "4,8", "--out-dir", str(tmp_path)]) == EXIT_OK
    capsys.readouterr()
    assert main(["measure", "norm", str(tmp_path / "invariant.csv"), "--grid", "4,8"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["mass"][0] == pytest.approx(1.0, abs=1e-12) and out["d_norm"] >= out["tv"]


def test_bad_arguments_are_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["transfer"]) == EXIT_USAGE
    assert main(["resolvent", "--z", "x,y"]) == EXIT_USAGE


def test_help_lists_exit_codes(capsys):
    assert main(["--help"]) == 0
    text = capsys.readouterr().out
    for code in ("64", "66"):
        assert code in text


def test_dumps_fixed_precision():
    assert json.loads(dumps({"b": 1 / 3, "a": 1 + 2j})) == {"a": [1.0, 2.0], "b": 0.3333333333}
    assert dumps({"b": 1, "a": 2}).index('"a"') < dumps({"b": 1, "a": 2}).index('"b"')


def test_console_script_respects_thread_cap(tmp_path):
    env = {"SGS_THREADS": "1", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "semigroup_spectra.cli", "transfer", "--t", "0.5", "--grid", "4,8",
                           "--out-dir", str(tmp_path)], capture_output=True, text=True, env=env)
    assert proc.returncode == EXIT_OK, proc.stderr
    assert json.loads(proc.stdout)["dim"] == 64
