from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from torusmf.green import green_function
from torusmf.spectral import ScalarField, TorusGrid, grid


@pytest.fixture(scope="session")
def g64() -> TorusGrid:
    return grid(64)


@pytest.fixture(scope="session")
def g256() -> TorusGrid:
    return grid(256)


@pytest.fixture(scope="session")
def g512() -> TorusGrid:
    return grid(512)


@pytest.fixture(scope="session")
def green512_origin(g512):
    return green_function(g512, (0.0, 0.0)).with_expansion()


def random_band_limited(g: TorusGrid, rng, kmax: int = 8, amplitude: float = 1.0):
    """Random real field supported on |k| <= kmax, built in spectral space."""
    spec = np.zeros((g.n, g.n // 2 + 1), dtype=np.complex128)
    for k1 in range(-kmax, kmax + 1):
        for k2 in range(0, kmax + 1):
            if k1 == 0 and k2 == 0:
                continue
            re, im = rng.standard_normal(2)
            spec[k1 % g.n, k2] = (re + 1j * im) / (1.0 + k1 * k1 + k2 * k2)
    vals = np.fft.irfft2(spec, s=(g.n, g.n)) * g.n * g.n
    scale = amplitude / max(np.max(np.abs(vals)), 1e-30)
    return ScalarField(g, vals * scale)
