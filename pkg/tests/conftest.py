import pytest

from isaplan import primitives as pr
from isaplan.world import LaneGeometry

T = 0.32


@pytest.fixture(scope="session")
def session_gain_sets():
    """One shared identified gain-set build; identification dominates test time."""
    return pr.default_gain_sets(LaneGeometry(), T, seed=7, n_traj=12)
