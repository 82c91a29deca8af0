"""Space-time trace finite elements for diffusion on evolving closed curves."""

__version__ = "0.1.0"

from .mesh import build_time_partition, build_uniform_mesh  # noqa: E402
from .surface import make_test_surface, manufacture_problem  # noqa: E402
from .march import MarchOptions, SolverPolicy, run_march  # noqa: E402
from .analysis import compute_errors, eoc_table  # noqa: E402

__all__ = [
    "build_uniform_mesh", "build_time_partition", "make_test_surface", "manufacture_problem",
    "MarchOptions", "SolverPolicy", "run_march", "compute_errors", "eoc_table",
]
