"""Almost-periodic coefficient fields represented as finite trigonometric polynomials.

A field u(y) = sum_k c_k exp(i k.y) with real frequency vectors k and complex
amplitudes c_k is the computable stand-in for a Bohr almost-periodic function.
Hermitian symmetry of the term list keeps every evaluation real.  Means,
Besicovitch seminorms, epsilon-rescaling and rounding to a common period are
the only operations the solvers need.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CertificationError, LadyError

_REALNESS_RTOL = 1e-12


def _as_freq(vec, dim):
    k = np.asarray(vec, dtype=float).reshape(-1)
    if k.size != dim:
        raise ValueError(f"frequency {vec!r} has length {k.size}, expected {dim}")
    return tuple(k.tolist())


@dataclass(frozen=True)
class TrigPolynomial:
    """Finite real-valued trigonometric polynomial in `dim` variables.

    ``terms`` maps frequency tuples (rad per unit) to complex amplitudes.
    Invariants: for every (k, c) the term (-k, conj(c)) is present, frequencies
    are pairwise distinct, and the zero frequency appears at most once.
    """

    dim: int
    terms: tuple = field(default=())  # tuple of (freq tuple, complex amplitude)

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        canon = []
        for freq, amp in self.terms:
            canon.append((_as_freq(freq, self.dim), complex(amp)))
        canon.sort(key=lambda t: t[0])
        freqs = [t[0] for t in canon]
        if len(set(freqs)) != len(freqs):
            raise ValueError("frequencies must be pairwise distinct")
        lookup = dict(canon)
        for k, c in canon:
            mk = tuple(-x for x in k)
            if mk not in lookup:
                raise ValueError(f"missing Hermitian partner for frequency {k}")
            pc = lookup[mk]
            if abs(pc - c.conjugate()) > 1e-12 * max(1.0, abs(c)):
                raise ValueError(f"amplitude at {mk} is not the conjugate of {k}")
        object.__setattr__(self, "terms", tuple(canon))

    # -- constructors -------------------------------------------------------

    @staticmethod
    def constant(value, dim=1):
        v = float(value)
        if v == 0.0:
            return TrigPolynomial(dim, ())
        return TrigPolynomial(dim, (((0.0,) * dim, complex(v)),))

    @staticmethod
    def from_cosines(dim, modes):
        """Build sum of A*cos(k.y + phase) from (k, A[, phase]) triples."""
        acc = {}
        for mode in modes:
            k, amp = mode[0], mode[1]
            phase = mode[2] if len(mode) > 2 else 0.0
            k = _as_freq(k, dim)
            mk = tuple(-x for x in k)
            if k == mk:  # zero frequency: contributes the plain constant
                acc[k] = acc.get(k, 0j) + complex(amp * np.cos(phase))
                continue
            c = 0.5 * amp * np.exp(1j * phase)
            acc[k] = acc.get(k, 0j) + c
            acc[mk] = acc.get(mk, 0j) + c.conjugate()
        return TrigPolynomial(dim, tuple((k, c) for k, c in acc.items() if c != 0))

    # -- algebra -------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = TrigPolynomial.constant(other, self.dim)
        if other.dim != self.dim:
            raise ValueError("dimension mismatch in addition")
        acc = dict(self.terms)
        for k, c in other.terms:
            acc[k] = acc.get(k, 0j) + c
        return TrigPolynomial(self.dim, tuple((k, c) for k, c in acc.items() if c != 0))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            if other == 0:
                return TrigPolynomial(self.dim, ())
            return TrigPolynomial(
                self.dim, tuple((k, other * c) for k, c in self.terms)
            )
        if other.dim != self.dim:
            raise ValueError("dimension mismatch in product")
        acc = {}
        for k1, c1 in self.terms:
            for k2, c2 in other.terms:
                k = tuple(a + b for a, b in zip(k1, k2))
                acc[k] = acc.get(k, 0j) + c1 * c2
        return TrigPolynomial(
            self.dim, tuple((k, c) for k, c in acc.items() if abs(c) > 0)
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def translate(self, shift):
        """Shifted polynomial u(. + a); amplitudes pick up phases exp(i k.a)."""
        a = np.asarray(shift, dtype=float).reshape(-1)
        if a.size != self.dim:
            raise ValueError("shift length must equal dim")
        return TrigPolynomial(
            self.dim,
            tuple((k, c * np.exp(1j * float(np.dot(k, a)))) for k, c in self.terms),
        )

    # -- queries -------------------------------------------------------------

    @property
    def l1_offmean(self):
        """Sum of |c_k| over nonzero frequencies (the oscillation budget)."""
        zero = (0.0,) * self.dim
        return float(sum(abs(c) for k, c in self.terms if k != zero))

    @property
    def l1_total(self):
        return float(sum(abs(c) for _, c in self.terms))

    @property
    def sup_bound(self):
        """Rigorous upper bound for sup |u|."""
        return self.l1_total

    def depends_on_axis(self, axis):
        return any(k[axis] != 0.0 for k, _ in self.terms)

    def evaluate(self, point):
        """Evaluate at one point or an array of points of shape (..., dim)."""
        pts = np.asarray(point, dtype=float)
        if pts.shape == () and self.dim == 1:
            pts = pts.reshape(1)
        if pts.shape[-1] != self.dim:
            raise ValueError(
                f"point has trailing length {pts.shape[-1]}, expected {self.dim}"
            )
        out = np.zeros(pts.shape[:-1], dtype=complex)
        for k, c in self.terms:
            out += c * np.exp(1j * (pts @ np.asarray(k)))
        scale = self.l1_total
        if scale > 0 and np.max(np.abs(out.imag)) > _REALNESS_RTOL * scale:
            raise LadyError("evaluation lost realness; Hermitian symmetry broken")
        return out.real if out.shape else float(out.real)

    def __call__(self, point):
        return self.evaluate(point)

    def mean_value(self):
        """The mean of the field: its zero-frequency amplitude."""
        zero = (0.0,) * self.dim
        for k, c in self.terms:
            if k == zero:
                return float(c.real)
        return 0.0

    def empirical_mean(self, window, samples=2048):
        """Trapezoidal average over the centered cube [-L, L]^dim.

        The tensor-product trapezoid rule factorizes exactly over the terms of
        a trigonometric polynomial, so the value is computed per term from
        one-dimensional trapezoid sums.  Converges to mean_value() at rate
        O(1/L) for fixed samples resolving the oscillations.
        """
        L = float(window)
        if L <= 0:
            raise ValueError("window must be positive")
        n = int(samples)
        if n < 2:
            raise ValueError("samples must be at least 2")
        grid = np.linspace(-L, L, n)
        total = 0j
        for k, c in self.terms:
            factor = 1.0 + 0j
            for kj in k:
                if kj == 0.0:
                    continue
                factor *= np.trapezoid(np.exp(1j * kj * grid), grid) / (2.0 * L)
            total += c * factor
        return float(total.real)

    def besicovitch_seminorm(self, p, window, samples=None):
        """(window average of |u|^p)^(1/p) on [-L, L]^dim via dense sampling."""
        if p < 1:
            raise ValueError("p must be >= 1")
        L = float(window)
        if L <= 0:
            raise ValueError("window must be positive")
        if samples is None:
            kmax = max(
                (max(abs(x) for x in k) for k, _ in self.terms), default=1.0
            )
            samples = int(min(200_000 ** (1.0 / self.dim), max(512, 8 * kmax * L)))
        axes = [np.linspace(-L, L, int(samples))] * self.dim
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        vals = np.abs(self.evaluate(mesh)) ** p
        for ax in reversed(axes):
            vals = np.trapezoid(vals, ax, axis=-1)
        return float(vals / (2.0 * L) ** self.dim) ** (1.0 / p)

    def scale_sample(self, eps, x=None, t=None):
        """Sample the epsilon-rescaled field: spatial arguments become x/eps
        and the temporal argument t/eps^2.

        The variable convention is positional: dim 1 means (tau,), dim 2 means
        (y1, y2) and dim 3 means (y1, y2, tau).
        """
        eps = float(eps)
        if eps <= 0:
            raise ValueError("eps must be positive")
        if self.dim == 1:
            pts = np.asarray(t, dtype=float)[..., None] / eps**2
        elif self.dim == 2:
            pts = np.asarray(x, dtype=float) / eps
        else:
            xs = np.asarray(x, dtype=float) / eps
            ts = np.broadcast_to(
                np.asarray(t, dtype=float)[..., None] / eps**2, xs.shape[:-1] + (1,)
            )
            pts = np.concatenate([xs, ts], axis=-1)
        return self.evaluate(pts)

    def periodic_approximation(self, Q, axes=None):
        """Round frequency components to the lattice (2 pi / Q) Z.

        Returns (approximant, max_perturbation).  The approximant has common
        period Q in every rounded variable; the perturbation never exceeds
        pi / Q.  Colliding frequencies are merged by summing amplitudes.
        `axes` restricts rounding to a subset of variables (default: all).
        """
        Q = int(Q)
        if Q < 1:
            raise ValueError("Q must be a positive integer")
        which = range(self.dim) if axes is None else tuple(axes)
        unit = 2.0 * np.pi / Q
        acc = {}
        worst = 0.0
        for k, c in self.terms:
            rk = list(k)
            for ax in which:
                rk[ax] = unit * np.round(k[ax] / unit)
                worst = max(worst, abs(rk[ax] - k[ax]))
            rk = tuple(rk)
            acc[rk] = acc.get(rk, 0j) + c
        poly = TrigPolynomial(self.dim, tuple((k, c) for k, c in acc.items() if c != 0))
        return poly, worst

    # -- serialization -------------------------------------------------------

    def to_dict(self):
        return {
            "dim": self.dim,
            "terms": [
                {"freq": list(k), "re": c.real, "im": c.imag} for k, c in self.terms
            ],
        }

    @staticmethod
    def from_dict(data):
        return TrigPolynomial(
            int(data["dim"]),
            tuple(
                (tuple(t["freq"]), complex(t["re"], t["im"])) for t in data["terms"]
            ),
        )


def saturation(r):
    """Bounded-Lipschitz forcing shape r -> r / (1 + |r|), componentwise."""
    r = np.asarray(r, dtype=float)
    return r / (1.0 + np.abs(r))


@dataclass(frozen=True)
class ForcingLaw:
    """Velocity forcing f(tau, r) = g(tau) + gain * sat(r) with sat = r/(1+|r|)."""

    g: tuple  # one dim-1 TrigPolynomial per velocity component
    saturation_gain: float = 0.0

    def __post_init__(self):
        if self.saturation_gain < 0:
            raise ValueError("saturation_gain must be nonnegative")
        for comp in self.g:
            if comp.dim != 1:
                raise ValueError("forcing components must be dim-1 (tau) polynomials")

    @property
    def n_components(self):
        return len(self.g)

    @property
    def g_sup_bound(self):
        """Rigorous bound for sup_tau |g(tau)| (Euclidean across components)."""
        return float(np.sqrt(sum(comp.sup_bound**2 for comp in self.g)))

    @property
    def affine_bound(self):
        """c with |f(tau, r)| <= c (1 + |r|) for all tau, r."""
        return self.g_sup_bound + self.saturation_gain

    def evaluate(self, tau, r):
        """f(tau, r); r has shape (..., n_components), tau broadcasts."""
        r = np.asarray(r, dtype=float)
        out = self.saturation_gain * saturation(r)
        for c, comp in enumerate(self.g):
            out[..., c] += comp.evaluate(np.asarray(tau, dtype=float)[..., None])
        return out

    def mean_g(self):
        """Componentwise tau-mean of g."""
        return np.array([comp.mean_value() for comp in self.g])

    def to_dict(self):
        return {
            "g": [comp.to_dict() for comp in self.g],
            "saturation_gain": self.saturation_gain,
        }

    @staticmethod
    def from_dict(data):
        return ForcingLaw(
            tuple(TrigPolynomial.from_dict(d) for d in data["g"]),
            float(data["saturation_gain"]),
        )


@dataclass(frozen=True)
class Bounds:
    """Certified structural constants of a coefficient set."""

    nu0: float
    nu1: float
    nu2: float
    Lambda: float
    lipschitz_k: float

    def __post_init__(self):
        for name in ("nu0", "nu1", "nu2", "Lambda", "lipschitz_k"):
            if getattr(self, name) <= 0 and name != "lipschitz_k":
                raise ValueError(f"{name} must be positive")
        if self.lipschitz_k < 0:
            raise ValueError("lipschitz_k must be nonnegative")

    def to_dict(self):
        return {
            "nu0": self.nu0,
            "nu1": self.nu1,
            "nu2": self.nu2,
            "Lambda": self.Lambda,
            "lipschitz_k": self.lipschitz_k,
        }


def _spectral_norm(mat):
    return float(np.linalg.norm(mat, ord=2))


@dataclass(frozen=True)
class CoefficientSet:
    """The microstructure (rho, a, b, f) with certified bounds.

    Certification uses l1 coefficient sums, which bound the oscillation of a
    trigonometric polynomial rigorously (sampling could miss extrema):
    pointwise the field sits within [mean - sum|c_k|, mean + sum|c_k|].
    """

    rho: TrigPolynomial           # density over y, dim 2
    a: tuple                       # 2x2 nested tuple of dim-3 polynomials (y, tau)
    b: TrigPolynomial              # dim 3
    forcing: ForcingLaw
    bounds: Bounds
    p: float

    def __post_init__(self):
        if self.rho.dim != 2:
            raise ValueError("rho must be a dim-2 polynomial over y")
        if self.b.dim != 3:
            raise ValueError("b must be a dim-3 polynomial over (y, tau)")
        if len(self.a) != 2 or any(len(row) != 2 for row in self.a):
            raise ValueError("a must be a 2x2 array of polynomials")
        for row in self.a:
            for entry in row:
                if entry.dim != 3:
                    raise ValueError("entries of a must be dim-3 polynomials")
        if self.a[0][1].terms != self.a[1][0].terms:
            raise ValueError("a must be symmetric")
        if self.p < 2:
            raise ValueError("p must be at least 2 (N = 2 admissibility)")
        self._certify()

    def _certify(self):
        bnd = self.bounds
        # A1: lambda_min(mean matrix) minus the l1 oscillation of the matrix.
        mean_a = np.array(
            [[self.a[i][j].mean_value() for j in range(2)] for i in range(2)]
        )
        lam_min = float(np.linalg.eigvalsh(0.5 * (mean_a + mean_a.T))[0])
        osc = 0.0
        zero = (0.0, 0.0, 0.0)
        freqs = set()
        for row in self.a:
            for entry in row:
                freqs.update(k for k, _ in entry.terms if k != zero)
        amp = {i_j: dict(poly.terms) for i_j, poly in
               (((i, j), self.a[i][j]) for i in range(2) for j in range(2))}
        for k in freqs:
            mat = np.array(
                [[amp[(i, j)].get(k, 0j) for j in range(2)] for i in range(2)]
            )
            osc += _spectral_norm(mat)
        if lam_min - osc < bnd.nu0 - 1e-12:
            raise CertificationError(
                f"A1 fails: certified min eigenvalue {lam_min - osc:.6g} < nu0 {bnd.nu0}"
            )
        # A2: nu1 <= b <= nu2 pointwise.
        mb, ob = self.b.mean_value(), self.b.l1_offmean
        if mb - ob < bnd.nu1 - 1e-12 or mb + ob > bnd.nu2 + 1e-12:
            raise CertificationError(
                f"A2 fails: b in [{mb - ob:.6g}, {mb + ob:.6g}] not within "
                f"[{bnd.nu1}, {bnd.nu2}]"
            )
        # A3: 1/Lambda <= rho <= Lambda and positive mean.
        mr, orr = self.rho.mean_value(), self.rho.l1_offmean
        if mr - orr < 1.0 / bnd.Lambda - 1e-12 or mr + orr > bnd.Lambda + 1e-12:
            raise CertificationError(
                f"A3 fails: rho in [{mr - orr:.6g}, {mr + orr:.6g}] not within "
                f"[{1.0 / bnd.Lambda:.6g}, {bnd.Lambda}]"
            )
        if mr <= 0:
            raise CertificationError("A3 fails: mean of rho must be positive")
        # A4: |f(tau, 0)| <= k and Lipschitz constant <= k.
        if self.forcing.g_sup_bound > bnd.lipschitz_k + 1e-12:
            raise CertificationError("A4 fails: sup|g| exceeds lipschitz_k")
        if self.forcing.saturation_gain > bnd.lipschitz_k + 1e-12:
            raise CertificationError("A4 fails: saturation_gain exceeds lipschitz_k")

    # -- certified envelopes used by CFL rules -------------------------------

    @property
    def a_sup_bound(self):
        """Upper bound for the spectral norm of a(y, tau), any (y, tau)."""
        mean_a = np.array(
            [[self.a[i][j].mean_value() for j in range(2)] for i in range(2)]
        )
        osc = sum(
            self.a[i][j].l1_offmean for i in range(2) for j in range(2)
        )
        return float(np.linalg.norm(mean_a, 2)) + osc

    @property
    def rho_min_bound(self):
        return max(self.rho.mean_value() - self.rho.l1_offmean, 1e-300)

    def a_is_time_independent(self):
        return not any(
            self.a[i][j].depends_on_axis(2) for i in range(2) for j in range(2)
        )

    def b_is_time_independent(self):
        return not self.b.depends_on_axis(2)

    # -- sampling -------------------------------------------------------------

    def sample_a(self, eps, x, t):
        """a(x/eps, t/eps^2) at points x of shape (..., 2); returns (..., 2, 2)."""
        out = np.empty(np.asarray(x).shape[:-1] + (2, 2))
        for i in range(2):
            for j in range(2):
                out[..., i, j] = self.a[i][j].scale_sample(eps, x=x, t=t)
        return out

    def sample_b(self, eps, x, t):
        return self.b.scale_sample(eps, x=x, t=t)

    def sample_rho(self, eps, x):
        return self.rho.scale_sample(eps, x=x)

    # -- serialization --------------------------------------------------------

    def to_dict(self):
        return {
            "rho": self.rho.to_dict(),
            "a": [[self.a[i][j].to_dict() for j in range(2)] for i in range(2)],
            "b": self.b.to_dict(),
            "forcing": self.forcing.to_dict(),
            "bounds": self.bounds.to_dict(),
            "p": self.p,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def from_dict(data):
        return CoefficientSet(
            rho=TrigPolynomial.from_dict(data["rho"]),
            a=tuple(
                tuple(TrigPolynomial.from_dict(d) for d in row) for row in data["a"]
            ),
            b=TrigPolynomial.from_dict(data["b"]),
            forcing=ForcingLaw.from_dict(data["forcing"]),
            bounds=Bounds(**data["bounds"]),
            p=float(data["p"]),
        )

    @staticmethod
    def from_json(text):
        return CoefficientSet.from_dict(json.loads(text))


# spec-shaped functional aliases ------------------------------------------------

def evaluate(poly, point):
    return poly.evaluate(point)


def mean_value(poly):
    return poly.mean_value()


def empirical_mean(poly, window, samples=2048):
    return poly.empirical_mean(window, samples)


def besicovitch_seminorm(poly, p, window, samples=None):
    return poly.besicovitch_seminorm(p, window, samples)


def scale_sample(poly, eps, grid_points):
    """Sample poly(x/eps, t/eps^2) over a list of (x, t) pairs."""
    xs = np.array([np.atleast_1d(np.asarray(x, dtype=float)) for x, _ in grid_points])
    ts = np.array([float(t) for _, t in grid_points])
    if poly.dim == 1:
        return poly.scale_sample(eps, t=ts)
    if poly.dim == 2:
        return poly.scale_sample(eps, x=xs)
    return poly.scale_sample(eps, x=xs, t=ts)


def periodic_approximation(poly, Q):
    return poly.periodic_approximation(Q)
