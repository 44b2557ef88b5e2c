import numpy as np
import pytest

from holopower.holo_opt import TargetScene

WAVELENGTHS = (639e-9, 515e-9, 473e-9)
PITCH = 8e-6


def random_scene(rng, size=16, distances=(-0.005, 0.005), primaries=3):
    """Random target split into horizontal bands, one per plane."""
    k = len(distances)
    intensity = rng.uniform(0.05, 0.95, (primaries, size, size))
    rows = np.minimum(np.arange(size) * k // size, k - 1)
    labels = np.broadcast_to(rows[:, None], (size, size))
    masks = labels[None] == np.arange(k)[:, None, None]
    return TargetScene(intensity, masks, tuple(distances), PITCH)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record_criterion(name, passed, detail):
    """Remember a criterion outcome for the end-of-run summary and echo it."""
    line = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE[name] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n.split("-")[1])):
        terminalreporter.write_line(ACCEPTANCE[name])
