"""CSV schemas of the solver package's outputs, plus validating readers.

The report tool is a pure function of its input files: it knows nothing about
the producing code beyond these documented column sets.
"""

import csv

BENCH = ["mode", "B", "T", "K", "forward_ms", "backward_ms", "dispatches"]
TRAJECTORY = ["t", "x", "y", "theta", "vx", "vy", "omega", "u1", "u2", "gate_idx", "reward"]
METRICS = ["update", "step", "mean_reward", "lap_rate", "mean_solver_iters",
           "approx_grad_frac", "steps_per_sec"]
LAPS = ["mode", "T", "K", "episode", "completed", "lap_time_s"]


class SchemaError(ValueError):
    """Input file does not match the documented column set."""


def read_rows(path, schema):
    """Read a CSV with the given schema; raises SchemaError with a column
    diagnostic on mismatch. An empty (header-only) file yields zero rows."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, expected header {schema}")
        if list(reader.fieldnames) != schema:
            missing = [c for c in schema if c not in reader.fieldnames]
            extra = [c for c in reader.fieldnames if c not in schema]
            raise SchemaError(
                f"{path}: header mismatch (missing columns {missing}, "
                f"unexpected columns {extra})"
            )
        return list(reader)
