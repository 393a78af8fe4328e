import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vortopt import fem
from vortopt.functionals import ObjectiveParams
from vortopt.mesh import ChannelGeometry, build_channel_mesh
from vortopt.shapegrad import evaluate_gradient

settings.register_profile("vortopt", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow])
settings.load_profile("vortopt")

CURL = ObjectiveParams(gamma1=1.0, gamma2=0.0, alpha=5.0)

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def geometry():
    return ChannelGeometry()


@pytest.fixture(scope="session")
def channel_mesh(geometry):
    """Unadapted initial mesh at h_min = 1/50, h_max = 1/30."""
    return build_channel_mesh(geometry, 1 / 50, 1 / 30)


@pytest.fixture(scope="session")
def channel_dofmap(channel_mesh):
    return fem.build_dofmap(channel_mesh)


@pytest.fixture(scope="session")
def curl_eval(channel_mesh):
    return evaluate_gradient(channel_mesh, CURL)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
