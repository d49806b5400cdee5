"""Uniform periodic grids and spectral calculus on the unit flat torus.

The domain is [0,1)^2 with unit total area. Fields are sampled on an n-by-n
grid, so every sample carries quadrature weight 1/n^2 and integrals reduce to
grid means. Differential operators act on the band-limited trigonometric
interpolant and are exact for resolved modes; the k = 0 mode of a Laplacian
output is zero by construction, which encodes the zero-mean compatibility
condition of the periodic problem.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi
FOUR_PI_SQ = 4.0 * np.pi**2

_MIN_N = 32


class SpectralError(ValueError):
    """A field or operation violated the grid layer's preconditions."""


class TorusGrid:
    """Uniform n-by-n sampling of the unit torus, n a power of two, n >= 32.

    Holds the wavenumber arrays shared by all spectral operations. Instances
    are interned by `grid(n)`, so identity comparison is safe for cache keys.
    """

    def __init__(self, n: int):
        if not isinstance(n, (int, np.integer)) or n < _MIN_N or (n & (n - 1)) != 0:
            raise SpectralError(f"grid size must be a power of two >= {_MIN_N}, got {n!r}")
        self.n = int(n)
        self.spacing = 1.0 / self.n
        # integer wavenumbers, rfft layout: full frequencies along axis 0,
        # nonnegative along axis 1
        k_full = np.fft.fftfreq(self.n, d=self.spacing)
        k_half = np.fft.rfftfreq(self.n, d=self.spacing)
        self.k1 = k_full[:, None]
        self.k2 = k_half[None, :]
        self.ksq = self.k1**2 + self.k2**2
        self.lap_symbol = -FOUR_PI_SQ * self.ksq
        inv = np.zeros_like(self.ksq)
        np.divide(1.0, self.lap_symbol, out=inv, where=self.ksq > 0)
        self.inv_lap_symbol = inv
        # Hermitian weights for k-space quadratic sums: interior rfft columns
        # represent a conjugate pair, the k2 = 0 and Nyquist columns do not.
        w = np.full((1, self.n // 2 + 1), 2.0)
        w[0, 0] = 1.0
        w[0, -1] = 1.0
        self.pair_weight = w
        x = np.arange(self.n) * self.spacing
        self.x1 = x[:, None]
        self.x2 = x[None, :]

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense coordinate arrays (X1, X2), both shaped (n, n)."""
        X1, X2 = np.broadcast_arrays(self.x1, self.x2)
        return X1.copy(), X2.copy()

    def __repr__(self) -> str:
        return f"TorusGrid(n={self.n})"


@functools.lru_cache(maxsize=None)
def grid(n: int) -> TorusGrid:
    """Interned grid factory; repeated calls with the same n share arrays."""
    return TorusGrid(n)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Immutable sample array on a TorusGrid.

    The value buffer is made read-only at construction; operations return new
    fields rather than mutating. Non-finite samples are rejected outright so
    downstream operators can assume clean data.
    """

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n, self.grid.n):
            raise SpectralError(
                f"field shape {v.shape} does not match grid n={self.grid.n}"
            )
        if not np.isfinite(v).all():
            bad = int(np.count_nonzero(~np.isfinite(v)))
            raise SpectralError(f"field contains {bad} non-finite samples")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, g: TorusGrid, c: float) -> "ScalarField":
        return cls(g, np.full((g.n, g.n), float(c)))

    @classmethod
    def from_function(cls, g: TorusGrid, fn) -> "ScalarField":
        return cls(g, fn(*np.broadcast_arrays(g.x1, g.x2)))

    def mean(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class PeakEstimate:
    """Location and value of a field maximum after sub-grid refinement.

    `refined` is False when the 3x3 quadratic fit around the grid argmax was
    degenerate (flat or non-concave); the grid point itself is reported then.
    """

    value: float
    x1: float
    x2: float
    refined: bool


def integrate(f: ScalarField) -> float:
    """Integral over the torus; the grid mean, since the area is one."""
    return float(f.values.mean())


def _rfft(f: ScalarField) -> np.ndarray:
    return np.fft.rfft2(f.values)


def _irfft(g: TorusGrid, spec: np.ndarray) -> np.ndarray:
    return np.fft.irfft2(spec, s=(g.n, g.n))


def laplacian(f: ScalarField) -> ScalarField:
    """Spectral Laplacian; exact for the band-limited interpolant.

    The output mean is zero because the k = 0 symbol vanishes.
    """
    g = f.grid
    return ScalarField(g, _irfft(g, _rfft(f) * g.lap_symbol))


def inverse_laplacian(f: ScalarField) -> ScalarField:
    """Solve Laplace(v) = f - mean(f) with mean(v) = 0.

    The k = 0 mode of the input is discarded (projected to the solvable
    subspace); the output is the unique zero-mean solution.
    """
    g = f.grid
    return ScalarField(g, _irfft(g, _rfft(f) * g.inv_lap_symbol))


def gradient(f: ScalarField) -> tuple[ScalarField, ScalarField]:
    """Spectral gradient. The Nyquist row/column of the differentiated axis
    is dropped: its first derivative has no real representative."""
    g = f.grid
    spec = _rfft(f)
    m1 = (2j * np.pi) * g.k1.copy()
    m1[g.n // 2, 0] = 0.0
    m2 = (2j * np.pi) * g.k2.copy()
    m2[0, -1] = 0.0
    d1 = _irfft(g, spec * m1)
    d2 = _irfft(g, spec * m2)
    return ScalarField(g, d1), ScalarField(g, d2)


def dirichlet_from_rfft(g: TorusGrid, spec: np.ndarray) -> float:
    """Dirichlet integral of the interpolant from its rfft2 coefficients."""
    scale = 1.0 / g.n**4
    return float(np.sum(g.pair_weight * FOUR_PI_SQ * g.ksq * np.abs(spec) ** 2) * scale)


def dirichlet_energy(f: ScalarField) -> float:
    """Integral of |grad f|^2 over the torus, computed in k-space."""
    return dirichlet_from_rfft(f.grid, _rfft(f))


def spectral_power(f: ScalarField) -> float:
    """Sum of squared Fourier coefficient moduli; Parseval partner of
    integrate(f^2)."""
    g = f.grid
    spec = _rfft(f)
    return float(np.sum(g.pair_weight * np.abs(spec) ** 2) / g.n**4)


def translate(f: ScalarField, s1: float, s2: float) -> ScalarField:
    """Band-limited translation x -> x + (s1, s2) of the interpolant.

    Exact for fields with no Nyquist content; the Nyquist modes are dropped
    because their shifted phase has no real representative.
    """
    g = f.grid
    spec = _rfft(f)
    spec[g.n // 2, :] = 0.0
    spec[:, -1] = 0.0
    phase = np.exp(-2j * np.pi * (g.k1 * s1 + g.k2 * s2))
    return ScalarField(g, _irfft(g, spec * phase))


def wrap_displacement(a: np.ndarray, b) -> np.ndarray:
    """Signed displacement a - b reduced to (-1/2, 1/2] per coordinate."""
    d = np.asarray(a, dtype=np.float64) - b
    return d - np.round(d)


def torus_distance(p: tuple[float, float], q: tuple[float, float]) -> float:
    d1 = wrap_displacement(np.float64(p[0]), q[0])
    d2 = wrap_displacement(np.float64(p[1]), q[1])
    return float(np.hypot(d1, d2))


def ball_mask(g: TorusGrid, center: tuple[float, float], radius: float) -> np.ndarray:
    """Boolean mask of grid points within torus distance `radius` of center."""
    d1 = wrap_displacement(np.broadcast_to(g.x1, (g.n, g.n)), center[0])
    d2 = wrap_displacement(np.broadcast_to(g.x2, (g.n, g.n)), center[1])
    return d1**2 + d2**2 < radius**2


_STENCIL_XI = np.array([-1.0, 0.0, 1.0])


_SNAP_REL = 1.0e-6  # sub-grid shifts below this fraction of a cell are noise


def refine_peak(f: ScalarField, i: int, j: int) -> PeakEstimate:
    """Refine a grid maximum at index (i, j) by a biquadratic 3x3 fit.

    Uses the orthogonal-polynomial least-squares fit on the 3x3 stencil; the
    stationary point of the fitted quadratic gives the sub-grid location.
    Falls back to the grid point (refined=False) when the fitted quadratic is
    not concave or the shift leaves the stencil cell. Shifts smaller than
    _SNAP_REL of a cell are reported as exactly zero: they sit below the
    fit's own roundoff and would otherwise break exact symmetries.
    """
    g = f.grid
    n = g.n
    idx = (np.arange(i - 1, i + 2) % n)[:, None], (np.arange(j - 1, j + 2) % n)[None, :]
    s = f.values[idx]
    xi = _STENCIL_XI
    b = float((s * xi[:, None]).sum() / 6.0)
    c = float((s * xi[None, :]).sum() / 6.0)
    d = float((s * (xi[:, None] ** 2 - 2.0 / 3.0)).sum() / 2.0)
    e = float((s * (xi[:, None] * xi[None, :])).sum() / 4.0)
    q = float((s * (xi[None, :] ** 2 - 2.0 / 3.0)).sum() / 2.0)
    a0 = float(s.sum() / 9.0)
    det = 4.0 * d * q - e * e
    if not (d < 0.0 and det > 0.0):
        return PeakEstimate(float(f.values[i, j]), i * g.spacing, j * g.spacing, False)
    s1 = (-2.0 * q * b + e * c) / det
    s2 = (-2.0 * d * c + e * b) / det
    if abs(s1) > 1.0 or abs(s2) > 1.0:
        return PeakEstimate(float(f.values[i, j]), i * g.spacing, j * g.spacing, False)
    if abs(s1) < _SNAP_REL:
        s1 = 0.0
    if abs(s2) < _SNAP_REL:
        s2 = 0.0
    val = (
        a0
        + b * s1
        + c * s2
        + d * (s1 * s1 - 2.0 / 3.0)
        + e * s1 * s2
        + q * (s2 * s2 - 2.0 / 3.0)
    )
    return PeakEstimate(
        float(val),
        float(((i + s1) * g.spacing) % 1.0),
        float(((j + s2) * g.spacing) % 1.0),
        True,
    )


def max_location(f: ScalarField) -> PeakEstimate:
    """Global maximum of the sampled field with sub-grid quadratic refinement."""
    i, j = np.unravel_index(int(np.argmax(f.values)), f.values.shape)
    return refine_peak(f, int(i), int(j))
