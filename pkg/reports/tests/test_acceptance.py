"""Secondary acceptance: deterministic rendering and the bench grouping shape."""

import csv

from mpcreports.cli import main
from mpcreports.render import latency_groups
from mpcreports.schemas import BENCH, LAPS, METRICS, TRAJECTORY, read_rows


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return str(path)


def make_inputs(tmp_path):
    bench_rows = [
        [mode, B, T, 10, f"{1.0 + T * (0.02 if mode == 'fused' else 1.0):.3f}",
         "0.4", 31]
        for mode in ("fused", "naive") for B in (1, 256) for T in (2, 10, 50)
    ]
    traj_rows = [
        [i * 0.05, 0.1 * i, 0.02 * i, 0.0, 1.0 + 0.1 * i, 0.5, 0.0, 3.0, 3.0, 0, 0.2]
        for i in range(30)
    ]
    metric_rows = [[u, u * 4096, u - 3.0, min(1.0, u / 20), 2.0, 0.0, 900.0]
                   for u in range(1, 25)]
    lap_rows = [["ac_mpc", 2, 5, i, 1, f"{5.1 + 0.1 * i:.3f}"] for i in range(3)]
    return {
        "latency_bars": write_csv(tmp_path / "bench.csv", BENCH, bench_rows),
        "trajectory_topview": write_csv(tmp_path / "traj.csv", TRAJECTORY, traj_rows),
        "training_curve": write_csv(tmp_path / "metrics.csv", METRICS, metric_rows),
        "laptime_table": write_csv(tmp_path / "laps.csv", LAPS, lap_rows),
    }


def test_criterion_10_reports_determinism_and_grouping(tmp_path):
    inputs = make_inputs(tmp_path)
    # every kind renders byte-identically across two runs on fixed inputs
    for kind, src in inputs.items():
        suffix = ".txt" if kind == "laptime_table" else ".png"
        blobs = []
        for run in range(2):
            out = tmp_path / f"{kind}_{run}{suffix}"
            assert main([kind, "--in", src, "--out", str(out)]) == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1], kind
    # the bench figure groups by horizon with one bar group per (T, mode)
    rows = read_rows(inputs["latency_bars"], BENCH)
    groups = latency_groups(rows)
    assert len(groups) == 6
    keys = [key for key, _ in groups]
    assert keys == sorted(keys)
    assert {mode for _T, mode in keys} == {"fused", "naive"}
