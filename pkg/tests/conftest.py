import numpy as np
import pytest

from romnet.loading import CycleSchedule
from romnet.material import default_material
from romnet.mesh import BladeParams, generate_toy_blade_mesh
from romnet.thermal import ThermalParams, build_thermal_model


@pytest.fixture(scope="session")
def material():
    return default_material()


@pytest.fixture(scope="session")
def small_blade():
    return BladeParams(divisions=(3, 2, 8))


@pytest.fixture(scope="session")
def small_mesh(small_blade):
    return generate_toy_blade_mesh(small_blade)


@pytest.fixture(scope="session")
def small_thermal(small_mesh, small_blade):
    return build_thermal_model(small_mesh, small_blade, ThermalParams())


@pytest.fixture(scope="session")
def schedule():
    return CycleSchedule()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_log(request):
    """Per-criterion result lines, echoed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        terminalreporter.write_line(results[key])
