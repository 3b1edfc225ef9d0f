import numpy as np
import pytest

from homlady.ap_field import Bounds, CoefficientSet, ForcingLaw, TrigPolynomial

TWO_PI = 2.0 * np.pi


def make_laminate(p=3.0, forcing_amp=0.0, saturation_gain=0.0):
    """Spatial laminate microstructure: a = (2 + cos 2pi y1) I, b = 1 + cos(2pi y1)/2,
    rho = 1 + 0.4 cos(2pi y1)."""
    a_diag = TrigPolynomial.from_cosines(3, [((TWO_PI, 0.0, 0.0), 1.0)]) + 2.0
    a_off = TrigPolynomial(3, ())
    b = TrigPolynomial.from_cosines(3, [((TWO_PI, 0.0, 0.0), 0.5)]) + 1.0
    rho = TrigPolynomial.from_cosines(2, [((TWO_PI, 0.0), 0.4)]) + 1.0
    gx = TrigPolynomial.from_cosines(1, [((1.0,), 0.5 * forcing_amp)]) + forcing_amp
    gy = TrigPolynomial(1, ())
    k_needed = max(np.sqrt((1.5 * forcing_amp) ** 2), saturation_gain, 1e-9)
    return CoefficientSet(
        rho=rho,
        a=((a_diag, a_off), (a_off, a_diag)),
        b=b,
        forcing=ForcingLaw((gx, gy), saturation_gain=saturation_gain),
        bounds=Bounds(nu0=1.0, nu1=0.5, nu2=1.5, Lambda=1.0 / 0.6,
                      lipschitz_k=float(k_needed)),
        p=p,
    )


def make_constant(nu0=1.0, nu1=0.5, p=2.0, rho0=1.0, forcing_amp=0.0):
    """Constant microstructure: a = nu0 I, b = nu1, rho = rho0."""
    a_diag = TrigPolynomial.constant(nu0, 3)
    a_off = TrigPolynomial(3, ())
    gx = TrigPolynomial.constant(forcing_amp)
    gy = TrigPolynomial(1, ())
    return CoefficientSet(
        rho=TrigPolynomial.constant(rho0, 2),
        a=((a_diag, a_off), (a_off, a_diag)),
        b=TrigPolynomial.constant(nu1, 3),
        forcing=ForcingLaw((gx, gy)),
        bounds=Bounds(nu0=nu0, nu1=nu1, nu2=nu1, Lambda=max(rho0, 1.0 / rho0),
                      lipschitz_k=max(forcing_amp, 1e-9)),
        p=p,
    )


@pytest.fixture(scope="session")
def laminate_coeffs():
    return make_laminate()


@pytest.fixture(scope="session")
def constant_coeffs():
    return make_constant()
