"""Random vortex method: McKean-Vlasov particle solver with singular convolution drifts."""
from __future__ import annotations

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .bounds import (
    BoundReport,
    StructureConstants,
    aronson_envelope,
    build_constants,
    calibrate_aronson_M,
    calibrate_kappa,
    kappa1,
    lipschitz_constant,
    sharp_density_bound,
    sphere_surface,
    structure_constants,
    verify_I_bound,
    verify_J_bound,
)
from .fixedpoint import DiamondConfig, PicardError, PicardState, apply_K_diamond, picard_solve
from .kernels import (
    LawSample,
    SingularKernel,
    VorticityField,
    check_growth,
    convolve_with_law,
    drift_from_ensemble,
    make_builtin_kernel,
)
from .sde import DriftField, PathBatch, cameron_martin_weight, density_kde, feynman_kac_expectation, simulate_paths
from .vortex import FieldGrid, recover_velocity, recover_vorticity, run_particle_system
