"""Independent reference solutions used to validate the solvers.

These deliberately avoid the package's solution paths: the laminate corrector
comes from a scalar constant-flux ODE (pointwise bisection plus a Brent solve
for the flux constant), not from any 2-D field solve.
"""

import numpy as np
from scipy.optimize import brentq


class LaminateShearOracle:
    """Shear cell problem for a = alpha(y1) I, b = beta(y1), xi = gamma e2 x e1.

    The corrector is pi = (0, phi(y1)); e = gamma + phi' satisfies
    alpha(y1) e + beta(y1) |e|^(p-2) e = s pointwise with mean(e) = gamma.
    """

    def __init__(self, alpha_fn, beta_fn, gamma, p, n=8192):
        self.alpha_fn = alpha_fn
        self.beta_fn = beta_fn
        self.gamma = float(gamma)
        self.p = float(p)
        y = (np.arange(n) + 0.5) / n
        self._al = alpha_fn(y)
        self._be = beta_fn(y)
        self.flux = self._solve_flux()

    def _e_pointwise(self, al, be, s):
        """Monotone root of al*e + be*|e|^(p-2)*e = s by vectorized bisection."""
        p = self.p
        bound = np.abs(s) / np.min(al) + abs(self.gamma) + 1.0
        lo = np.full_like(al, -bound)
        hi = np.full_like(al, bound)
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            g = al * mid + be * np.abs(mid) ** (p - 2.0) * mid - s
            neg = g < 0
            lo = np.where(neg, mid, lo)
            hi = np.where(neg, hi, mid)
        return 0.5 * (lo + hi)

    def _solve_flux(self):
        def mean_defect(s):
            return float(np.mean(self._e_pointwise(self._al, self._be, s))
                         - self.gamma)

        s_hi = 1.0
        while mean_defect(s_hi) < 0:
            s_hi *= 2.0
        s_lo = -1.0
        while mean_defect(s_lo) > 0:
            s_lo *= 2.0
        return brentq(mean_defect, s_lo, s_hi, xtol=1e-14, rtol=1e-15)

    def e_at(self, y):
        """Total shear gamma + phi'(y1) at arbitrary points."""
        y = np.asarray(y, dtype=float)
        return self._e_pointwise(self.alpha_fn(y), self.beta_fn(y), self.flux)

    def phi_prime_at(self, y):
        return self.e_at(y) - self.gamma

    def effective_shear_flux(self):
        """(m_21, M_21): the two parts of the constant total flux."""
        e = self._e_pointwise(self._al, self._be, self.flux)
        m21 = float(np.mean(self._al * e))
        M21 = float(np.mean(self._be * np.abs(e) ** (self.p - 2.0) * e))
        return m21, M21


def laminate_alpha(y):
    return 2.0 + np.cos(2.0 * np.pi * y)


def laminate_beta(y):
    return 1.0 + 0.5 * np.cos(2.0 * np.pi * y)
