import numpy as np
import pytest

from tractfilter import sta
from tractfilter.fields import STField, VolumeGrid


def real_coeffs(rng, j, shape=()):
    """Random coefficients obeying v[-m] = (-1)^m conj(v[m])."""
    v = rng.normal(size=shape + (2 * j + 1,)) + 1j * rng.normal(size=shape + (2 * j + 1,))
    out = np.empty_like(v)
    out[..., j] = v[..., j].real
    for m in range(1, j + 1):
        out[..., j + m] = v[..., j + m]
        out[..., j - m] = (-1) ** m * np.conj(v[..., j + m])
    return out


def random_field(rng, j, dims=(10, 10, 10), spacing=(1.0, 1.0, 1.0), real=True):
    grid = VolumeGrid(dims, spacing)
    if real:
        data = real_coeffs(rng, j, tuple(dims))
    else:
        data = rng.normal(size=tuple(dims) + (2 * j + 1,)) + 1j * rng.normal(size=tuple(dims) + (2 * j + 1,))
    return STField(grid, data)


def smooth_field(rng, j, dims=(12, 12, 12), sigma=1.5):
    from tractfilter.fields import RadialKernel, convolve_radial

    return convolve_radial(random_field(rng, j, dims), RadialKernel("gaussian", sigma))


def unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def rel_err(a, b):
    scale = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def y2(n):
    return sta.eval_sph_harmonics(2, np.asarray(n, dtype=float))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
