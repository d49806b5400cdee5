"""Prescribed weight functions h with closed-form derivatives.

The weight may change sign; every quantity involving ln h is only defined on
the positivity set, and evaluators guard it with a relative floor: points
with h below `floor_rel * max h` are rejected rather than silently clamped.

Supported kinds:

constant            h = c                              params [c]
cosine_sum          h = c0 + sum a_i cos(2 pi m_i x1) cos(2 pi l_i x2)
                                                       params [c0, a1,m1,l1, ...]
gaussian_bump_exp   h = s exp(-a (sin^2 pi x1 + sin^2 pi x2))
                                                       params [s, a]
user_fourier        h = c0 + sum a_i cos(2 pi k_i.x) + b_i sin(2 pi k_i.x)
                                                       params [c0, k1,l1,a1,b1, ...]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import ScalarField, TorusGrid

TWO_PI = 2.0 * np.pi

_KINDS = ("constant", "cosine_sum", "gaussian_bump_exp", "user_fourier")

FLOOR_REL = 1.0e-3


class PositivityError(ValueError):
    """A log-derived quantity was requested below the positivity floor."""


@dataclass(frozen=True)
class PrescribedFunction:
    kind: str
    params: tuple[float, ...]
    _max_cache: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown prescribed-function kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        self._validate()

    # -- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, c: float) -> "PrescribedFunction":
        return cls("constant", (c,))

    @classmethod
    def cosine_sum(cls, c0: float, terms) -> "PrescribedFunction":
        flat = [c0]
        for a, m, l in terms:
            flat += [a, m, l]
        return cls("cosine_sum", tuple(flat))

    @classmethod
    def gaussian_bump_exp(cls, scale: float = 1.0, decay: float = 1.0) -> "PrescribedFunction":
        return cls("gaussian_bump_exp", (scale, decay))

    @classmethod
    def user_fourier(cls, c0: float, terms) -> "PrescribedFunction":
        flat = [c0]
        for k, l, a, b in terms:
            flat += [k, l, a, b]
        return cls("user_fourier", tuple(flat))

    @classmethod
    def from_spec(cls, d: dict) -> "PrescribedFunction":
        return cls(d["kind"], tuple(d["params"]))

    def spec_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}

    # -- validation ----------------------------------------------------------

    def _validate(self):
        p = self.params
        if self.kind == "constant":
            if len(p) != 1:
                raise ValueError("constant kind takes exactly one parameter")
        elif self.kind == "cosine_sum":
            if len(p) < 1 or (len(p) - 1) % 3 != 0:
                raise ValueError("cosine_sum params must be [c0, a,m,l, ...]")
        elif self.kind == "gaussian_bump_exp":
            if len(p) != 2 or p[0] <= 0:
                raise ValueError("gaussian_bump_exp takes [scale > 0, decay]")
        elif self.kind == "user_fourier":
            if len(p) < 1 or (len(p) - 1) % 4 != 0:
                raise ValueError("user_fourier params must be [c0, k,l,a,b, ...]")
        if self.max_value() <= 0.0:
            raise ValueError("prescribed function must be positive somewhere")

    # -- pointwise evaluation -----------------------------------------------

    def _terms(self):
        p = self.params
        if self.kind == "cosine_sum":
            return [(p[i], p[i + 1], p[i + 2]) for i in range(1, len(p), 3)]
        if self.kind == "user_fourier":
            return [(p[i], p[i + 1], p[i + 2], p[i + 3]) for i in range(1, len(p), 4)]
        return []

    def evaluate(self, x1, x2) -> np.ndarray:
        x1 = np.asarray(x1, dtype=np.float64)
        x2 = np.asarray(x2, dtype=np.float64)
        p = self.params
        if self.kind == "constant":
            return np.broadcast_to(np.float64(p[0]), np.broadcast_shapes(x1.shape, x2.shape)).copy()
        if self.kind == "cosine_sum":
            out = np.full(np.broadcast_shapes(x1.shape, x2.shape), p[0])
            for a, m, l in self._terms():
                out = out + a * np.cos(TWO_PI * m * x1) * np.cos(TWO_PI * l * x2)
            return out
        if self.kind == "gaussian_bump_exp":
            s, a = p
            return s * np.exp(-a * (np.sin(np.pi * x1) ** 2 + np.sin(np.pi * x2) ** 2))
        out = np.full(np.broadcast_shapes(x1.shape, x2.shape), p[0])
        for k, l, a, b in self._terms():
            ph = TWO_PI * (k * x1 + l * x2)
            out = out + a * np.cos(ph) + b * np.sin(ph)
        return out

    def gradient(self, x1, x2) -> tuple[np.ndarray, np.ndarray]:
        """Analytic (d h/d x1, d h/d x2)."""
        x1 = np.asarray(x1, dtype=np.float64)
        x2 = np.asarray(x2, dtype=np.float64)
        shape = np.broadcast_shapes(x1.shape, x2.shape)
        g1 = np.zeros(shape)
        g2 = np.zeros(shape)
        if self.kind == "constant":
            return g1, g2
        if self.kind == "cosine_sum":
            for a, m, l in self._terms():
                c1, s1 = np.cos(TWO_PI * m * x1), np.sin(TWO_PI * m * x1)
                c2, s2 = np.cos(TWO_PI * l * x2), np.sin(TWO_PI * l * x2)
                g1 += -a * TWO_PI * m * s1 * c2
                g2 += -a * TWO_PI * l * c1 * s2
            return g1, g2
        if self.kind == "gaussian_bump_exp":
            s, a = self.params
            h = self.evaluate(x1, x2)
            # grad ln h = -a pi (sin 2 pi x1, sin 2 pi x2)
            return (
                h * (-a * np.pi * np.sin(TWO_PI * x1)),
                h * (-a * np.pi * np.sin(TWO_PI * x2)),
            )
        for k, l, a, b in self._terms():
            ph = TWO_PI * (k * x1 + l * x2)
            d = -a * np.sin(ph) + b * np.cos(ph)
            g1 += TWO_PI * k * d
            g2 += TWO_PI * l * d
        return g1, g2

    def laplacian_h(self, x1, x2) -> np.ndarray:
        """Analytic Laplacian of h itself (not of ln h)."""
        x1 = np.asarray(x1, dtype=np.float64)
        x2 = np.asarray(x2, dtype=np.float64)
        shape = np.broadcast_shapes(x1.shape, x2.shape)
        out = np.zeros(shape)
        if self.kind == "constant":
            return out
        if self.kind == "cosine_sum":
            for a, m, l in self._terms():
                out += (
                    -a
                    * TWO_PI**2
                    * (m**2 + l**2)
                    * np.cos(TWO_PI * m * x1)
                    * np.cos(TWO_PI * l * x2)
                )
            return out
        if self.kind == "gaussian_bump_exp":
            h = self.evaluate(x1, x2)
            g1, g2 = self.gradient(x1, x2)
            lap_log = self._lap_log_gaussian(x1, x2)
            return h * lap_log + (g1**2 + g2**2) / h
        for k, l, a, b in self._terms():
            ph = TWO_PI * (k * x1 + l * x2)
            out += -(TWO_PI**2) * (k**2 + l**2) * (a * np.cos(ph) + b * np.sin(ph))
        return out

    def _lap_log_gaussian(self, x1, x2) -> np.ndarray:
        _, a = self.params
        return -2.0 * a * np.pi**2 * (np.cos(TWO_PI * x1) + np.cos(TWO_PI * x2))

    # -- log-derived quantities (positivity-guarded) -------------------------

    def positivity_floor(self) -> float:
        return FLOOR_REL * self.max_value()

    def _guard(self, x1, x2) -> np.ndarray:
        h = self.evaluate(x1, x2)
        floor = self.positivity_floor()
        if np.any(h < floor):
            worst = float(np.min(h))
            raise PositivityError(
                f"h = {worst:.3e} below positivity floor {floor:.3e}; "
                "log quantities are undefined there"
            )
        return h

    def log_value(self, x1, x2) -> np.ndarray:
        return np.log(self._guard(x1, x2))

    def log_gradient(self, x1, x2) -> tuple[np.ndarray, np.ndarray]:
        h = self._guard(x1, x2)
        g1, g2 = self.gradient(x1, x2)
        return g1 / h, g2 / h

    def log_laplacian(self, x1, x2) -> np.ndarray:
        """Analytic Laplacian of ln h on the positivity set."""
        if self.kind == "gaussian_bump_exp":
            self._guard(x1, x2)
            return self._lap_log_gaussian(x1, x2)
        h = self._guard(x1, x2)
        g1, g2 = self.gradient(x1, x2)
        return (self.laplacian_h(x1, x2) - (g1**2 + g2**2) / h) / h

    # -- grid helpers ---------------------------------------------------------

    def field(self, g: TorusGrid) -> ScalarField:
        return ScalarField(g, self.evaluate(*np.broadcast_arrays(g.x1, g.x2)))

    def max_value(self, samples: int = 1024) -> float:
        """Max of h over a dense sample; cached. For the supported kinds the
        sampling error is far below the positivity-floor granularity."""
        if not self._max_cache:
            x = np.arange(samples) / samples
            vals = self.evaluate(x[:, None], x[None, :])
            self._max_cache.append(float(vals.max()))
        return self._max_cache[0]

    def positivity_mask(self, g: TorusGrid) -> np.ndarray:
        """Grid mask of the trusted positivity region h >= floor."""
        h = self.evaluate(*np.broadcast_arrays(g.x1, g.x2))
        return h >= self.positivity_floor()
