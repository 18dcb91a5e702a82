import numpy as np
import pytest

from neuroloc import headmodel


@pytest.fixture(scope="session")
def desk():
    """Desk-scale head model: 10 mm grid inside 70 mm, 60 sensors."""
    space, sensors, lead = headmodel.build_head_model()
    return space, sensors, lead


@pytest.fixture(scope="session")
def small_head():
    space, sensors, lead = headmodel.build_head_model(
        region_radius_mm=40.0, grid_spacing_mm=10.0, n_sensors=30)
    return space, sensors, lead


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def cube_space(n=8, spacing=10.0, sphere_radius=90.0):
    """Even-sized n^3 lattice clipped to a ball, for generator-shape tests."""
    from neuroloc.headmodel import SourceSpace

    coords = (np.arange(n) - (n - 1) / 2.0) * spacing
    X, Y, Z = np.meshgrid(coords, coords, coords, indexing="ij")
    r = np.sqrt(X ** 2 + Y ** 2 + Z ** 2)
    mask = r <= (n / 2.0) * spacing
    iz, iy, ix = np.nonzero(mask.transpose(2, 1, 0))
    points = np.stack([coords[ix], coords[iy], coords[iz]], axis=1)
    return SourceSpace(grid_spacing=spacing, origin=np.full(3, coords[0]), mask=mask,
                       points=points, sphere_radius=sphere_radius)


@pytest.fixture(scope="session")
def tiny_problem():
    """Grid 8^3, M = 10 sensors, one noisy dipole."""
    from neuroloc import simulate
    from neuroloc.headmodel import build_sensor_array, compute_lead_field

    space = cube_space(8)
    sensors = build_sensor_array(10, 120)
    lead = compute_lead_field(space, sensors)
    src = simulate.make_dipole(space, [20, 10, 25], [0, 50, 0])
    obs = simulate.add_noise(simulate.forward(lead, src), 21.6, seed=0)
    return space, lead, src, obs


_CRITERIA = []


@pytest.fixture
def criterion():
    """``record(name, ok, detail)`` for the acceptance summary printed at the end."""
    def record(name, ok, detail=""):
        _CRITERIA.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
