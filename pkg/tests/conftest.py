import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from uwsplat.scene import Camera, GaussianCloud

settings.register_profile(
    "default",
    max_examples=int(os.environ.get("HYPOTHESIS_EXAMPLES", "40")),
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda t: int(t.split()[1].rstrip(':'))):
            terminalreporter.write_line(line)


def random_cloud(rng, n, spread=0.07, medium=True):
    """Small cloud packed around the origin, sized for a 16x16 view from ~0.8 units."""
    kw = {}
    if medium:
        kw = dict(
            beta_d=rng.uniform(0.05, 0.5, (n, 3)),
            beta_b=rng.uniform(0.05, 0.5, (n, 3)),
            veil=rng.uniform(0.05, 0.95, (n, 3)),
        )
    return GaussianCloud.from_decoded(
        rng.uniform(-spread, spread, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        scales=rng.uniform(0.02, 0.06, (n, 3)),
        opacities=rng.uniform(0.3, 0.9, n),
        colors=rng.uniform(0.2, 1.0, (n, 3)),
        **kw,
    )


def small_camera(size=16, eye=(0.0, -0.8, 0.1), fov=30.0):
    return Camera.look_at(eye, [0.0, 0.0, 0.0], width=size, height=size, fov_deg=fov)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
