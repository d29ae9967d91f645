import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nel_pose.selftest import SMALL_CAM, small_observation, small_scene, small_world

settings.register_profile(
    "repo", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def world():
    """(embed cfg, meshes, surface models) for the small 48 x 36 camera."""
    return small_world(0)


@pytest.fixture
def small_obs(world):
    cfg, meshes, models = world
    rng = np.random.default_rng(11)
    scene = small_scene(rng)
    return scene, small_observation(scene, meshes, models, cfg, rng)


@pytest.fixture(scope="session")
def cam():
    return SMALL_CAM


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def report(request):
    """report(tag, ok, detail) records one acceptance line for the end-of-run summary."""

    def _report(tag: str, ok: bool, detail: str):
        line = f"{tag} {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        request.config.stash[ACCEPTANCE].append(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
