import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fusedmpc import batchexec, dynamics, gradlayer, ilqr, qcost


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile every numba kernel once so timed tests measure the algorithms."""
    model = dynamics.DynModel.planar_quadrotor(dt=0.05)
    n_u = model.n_u
    T = 3
    settings = ilqr.SolveSettings(T=T, u_min=np.zeros(n_u), u_max=np.full(n_u, 12.0),
                                  K_max=2)
    diag = np.full((T, model.n_x + n_u), 0.5)
    p = qcost.StageCostParams.from_diag(diag, np.zeros((T, model.n_x + n_u)), model.n_x)
    res = ilqr.solve(model, 0.1 * np.ones(model.n_x), p, np.ones((T, n_u)), settings)
    lin = ilqr.linearize(model, res.traj)
    seed = gradlayer.BackwardSeed(np.zeros((T + 1, model.n_x)), np.zeros((T, n_u)))
    gradlayer.backward(res, lin, p, seed)
    ilqr.boxqp(np.eye(2), np.array([-0.5, 0.2]), -np.ones(2), np.ones(2))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One visible line per acceptance criterion at the end of the run."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            name = getattr(report, "nodeid", "")
            if "test_acceptance.py" in name:
                label = name.split("::")[-1]
                lines.append((label, outcome.upper()))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for label, outcome in sorted(lines):
            terminalreporter.write_line(f"[ACCEPTANCE] {label}: {outcome}")
