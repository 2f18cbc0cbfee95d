import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

logger = logging.getLogger("latentact")

SCHEMA_VERSION = "1"

# Column sums of a stochastic matrix must match 1 within this.
STOCHASTIC_ATOL = 1e-10
# Entries down to -NEGATIVE_CLAMP are round-off and clamp to 0.
NEGATIVE_CLAMP = 1e-12

# Exhaustive k! permutation search stops here.
MAX_PERMUTATION_K = 9

EXACT_FEASIBILITY_TOL = 1e-8
EXACT_CONE_TOL = 1e-8
ESTIMATED_CONE_TOL = 1e-3

DEFAULT_OUT_DIR = "runs"
DEFAULT_CONFIG_DIR = "configs"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def sampled_feasibility_tol(min_column_count: int) -> float:
    """Feasibility tolerance for empirical P: 3/sqrt(N_min) over observed columns."""
    if min_column_count < 1:
        return float("inf")
    return 3.0 / min_column_count**0.5


def package_version() -> str | None:
    """Project version from pyproject.toml; the project runs from a source
    checkout, so there is no installed distribution metadata to read."""
    pyproject = Path(__file__).resolve().parent.parent / "pyproject.toml"
    try:
        with pyproject.open("rb") as f:
            return tomllib.load(f)["project"]["version"]
    except (OSError, KeyError, tomllib.TOMLDecodeError):
        return None
