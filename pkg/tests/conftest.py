from __future__ import annotations

import pytest

from randvortex.fixedpoint import DiamondConfig, picard_solve
from randvortex.kernels import lamb_oseen, make_builtin_kernel
from randvortex.vortex import run_particle_system

# Lamb-Oseen data (circulation 1, t0 = 1, nu = 1/2) on a horizon long enough for field recovery
LO_NU = 0.5
LO_T = 0.2
LO_GRID = {"R": 4.0, "h": 0.25, "dt_grid": 0.05}
LO_EPS = 0.5
LO_SUPPORT = 3.0
LO_DT = 0.01
LO_SNAPS = (0.1, 0.15, 0.2)


@pytest.fixture(autouse=True)
def restore_threads():
    # the CLI --threads flag changes the process-wide worker count
    import numba

    n = numba.get_num_threads()
    yield
    numba.set_num_threads(n)


@pytest.fixture(scope="session")
def bs2():
    return make_builtin_kernel("biot_savart_2d")


@pytest.fixture(scope="session")
def lo_omega():
    return lamb_oseen(1.0, 1.0, LO_NU, support_radius=LO_SUPPORT)


@pytest.fixture(scope="session")
def lo_drift(bs2, lo_omega):
    b, state = picard_solve(bs2, lo_omega, LO_NU, LO_T, LO_GRID, DiamondConfig(LO_EPS, 200, LO_DT, seed=101))
    return b, state


@pytest.fixture(scope="session")
def lo_run(bs2, lo_omega, lo_drift):
    """Mean-field run with N = 1000 copies of 112 lattice points (about 1.1e5 samples)."""
    b, _ = lo_drift
    return run_particle_system(bs2, lo_omega, LO_EPS, 1000, LO_NU, LO_DT, LO_T, seed=202, mode="mean_field",
                               drift=b, observe_times=list(LO_SNAPS))

