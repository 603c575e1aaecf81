"""Intralayer and interlayer hopping functions, their radial Fourier transforms
and the interlayer coupling constants derived from them."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import special

from .geometry import A0_CC, A_GRAPHENE, rot

AMP_CUTOFF = 1e-12  # eV
R0_SK = 0.319 * A0_CC
K_ABS = 4 * np.pi / (3 * A_GRAPHENE)


class QuadratureError(RuntimeError):
    def __init__(self, msg, estimate=np.nan):
        super().__init__(f"{msg} (error estimate {estimate:.3e})")
        self.estimate = estimate


# ---------------------------------------------------------------- intralayer

@dataclass(frozen=True)
class IntralayerModel:
    """In-plane hopping h(r).

    kind: 'slater-koster-inplane' -> Vpppi * exp(-(|r| - a0)/r0)
          'nearest-neighbor'      -> Vpppi on |r| = a0 (within 1e-6 A), 0 elsewhere
          'tabulated'             -> linear interpolation of (table_r, table_h)
    The r = 0 (onsite) value is excluded from lattice sums unless include_onsite.
    """
    kind: str = "slater-koster-inplane"
    Vpppi: float = -2.7
    a0: float = A0_CC
    r0: float = R0_SK
    amp_cutoff: float = AMP_CUTOFF
    include_onsite: bool = False
    table_r: Optional[tuple] = None
    table_h: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("slater-koster-inplane", "nearest-neighbor", "tabulated"):
            raise ValueError(f"unknown intralayer kind {self.kind!r}")
        if self.kind == "tabulated" and (self.table_r is None or self.table_h is None):
            raise ValueError("tabulated model needs table_r and table_h")
        if self.r0 <= 0:
            raise ValueError("r0 must be positive")

    @property
    def cutoff(self) -> float:
        """Distance beyond which |h| < amp_cutoff (Angstrom)."""
        if self.kind == "nearest-neighbor":
            return self.a0 * 1.01
        if self.kind == "tabulated":
            return float(self.table_r[-1])
        if self.Vpppi == 0:
            return self.a0
        return self.a0 + self.r0 * np.log(abs(self.Vpppi) / self.amp_cutoff)

    def radial(self, r):
        r = np.asarray(r, float)
        if self.kind == "slater-koster-inplane":
            h = self.Vpppi * np.exp(-(r - self.a0) / self.r0)
        elif self.kind == "nearest-neighbor":
            h = np.where(np.abs(r - self.a0) < 1e-6, self.Vpppi, 0.0)
        else:
            h = np.interp(r, self.table_r, self.table_h, right=0.0)
        return np.where(r <= self.cutoff, h, 0.0)

    def lattice_value(self, r):
        """Value used inside lattice sums: onsite term dropped unless requested."""
        r = np.asarray(r, float)
        h = self.radial(r)
        if not self.include_onsite:
            h = np.where(r < 1e-9, 0.0, h)
        return h


def eval_intralayer(model: IntralayerModel, r) -> float:
    r = np.asarray(r, float)
    return model.radial(np.linalg.norm(r, axis=-1))


# ---------------------------------------------------------------- interlayer

@dataclass(frozen=True)
class InterlayerModel:
    """Interlayer hopping h12(r), radial part times an optional angular factor
    acting on the transform.

    kind: 'slater-koster'  (Vpppi, Vppsigma, a0, r0, ell)
          'exponential-B1' amp * exp(-gamma sqrt(r^2 + ell^2))
          'yukawa-2.4'     amp * exp(-gamma sqrt(r^2 + ell^2)) / sqrt(r^2 + ell^2)
          'zero'
    """
    kind: str = "slater-koster"
    Vpppi: float = -2.7
    Vppsigma: float = 0.48
    a0: float = A0_CC
    r0: float = R0_SK
    ell: float = 3.5
    gamma: float = 1.0
    amp: float = 1.0
    amp_cutoff: float = AMP_CUTOFF
    angular: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("slater-koster", "exponential-B1", "yukawa-2.4", "zero"):
            raise ValueError(f"unknown interlayer kind {self.kind!r}")
        if self.ell < 0:
            raise ValueError("ell must be non-negative")

    @property
    def is_radial(self) -> bool:
        return self.angular is None

    def radial(self, r):
        r = np.asarray(r, float)
        d = np.sqrt(r * r + self.ell ** 2)
        if self.kind == "slater-koster":
            with np.errstate(invalid="ignore", divide="ignore"):
                c2 = np.where(d > 0, r * r / np.where(d > 0, d * d, 1.0), 0.0)
            return (self.Vpppi * np.exp(-(d - self.a0) / self.r0) * c2
                    + self.Vppsigma * np.exp(-(d - self.ell) / self.r0) * (1 - c2))
        if self.kind == "exponential-B1":
            return self.amp * np.exp(-self.gamma * d)
        if self.kind == "yukawa-2.4":
            return self.amp * np.exp(-self.gamma * d) / d
        return np.zeros_like(r)

    def envelope_rmax(self, rel=1e-16, rstep=0.25, rlim=5000.0) -> float:
        """Radius beyond which |h(r)| r stays below rel times its peak."""
        if self.kind == "zero":
            return 1.0
        r = np.arange(0.0, rlim, rstep)
        env = np.abs(self.radial(r)) * np.maximum(r, 1.0)
        peak = env.max()
        above = np.nonzero(env > rel * peak)[0]
        return float(r[min(above[-1] + 2, len(r) - 1)])

    @property
    def cutoff(self) -> float:
        """Distance beyond which |h12| < amp_cutoff."""
        if self.kind == "zero":
            return 0.0
        r = np.arange(0.0, 5000.0, 0.05)
        above = np.nonzero(np.abs(self.radial(r)) >= self.amp_cutoff)[0]
        return float(r[min(above[-1] + 1, len(r) - 1)]) if len(above) else 0.0


def eval_interlayer(model: InterlayerModel, r) -> float:
    r = np.asarray(r, float)
    return model.radial(np.linalg.norm(r, axis=-1))


# ---------------------------------------------------------------- Hankel transforms

def _panels(model: InterlayerModel, kmax: float, nodes: int):
    rmax = model.envelope_rmax()
    # panel width resolves both the hopping scale and the Bessel oscillation
    width = min(0.5, np.pi / max(kmax, 1e-12) / 2)
    if model.kind == "slater-koster":
        width = min(width, model.r0)
    npan = int(np.ceil(rmax / width))
    edges = np.linspace(0.0, rmax, npan + 1)
    x, w = leggauss(nodes)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    r = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wr = (half[:, None] * w[None, :]).ravel()
    return r, wr


def _hankel_sum(model, k, kernel, nodes):
    k = np.atleast_1d(np.asarray(k, float))
    r, w = _panels(model, max(k.max(), 1.0), nodes)
    hw = model.radial(r) * w
    out = np.empty(len(k))
    for i in range(0, len(k), 64):
        kk = k[i:i + 64]
        out[i:i + 64] = kernel(kk[:, None] * r[None, :], r[None, :]) @ hw
    return out


def _checked(model, k, kernel, tol):
    lo = _hankel_sum(model, k, kernel, 20)
    hi = _hankel_sum(model, k, kernel, 32)
    est = np.max(np.abs(hi - lo)) if len(hi) else 0.0
    if not np.all(np.isfinite(hi)) or est > tol:
        raise QuadratureError("Hankel quadrature did not converge", est)
    return hi


def hankel_transform(model: InterlayerModel, k, tol: float = 1e-10):
    """2 pi int_0^inf h(r) J0(k r) r dr (eV A^2)."""
    scalar = np.ndim(k) == 0
    if np.any(np.asarray(k) < 0):
        raise ValueError("k must be non-negative")
    out = 2 * np.pi * _checked(model, k, lambda kr, r: special.j0(kr) * r, tol / (2 * np.pi))
    return float(out[0]) if scalar else out


def hankel_derivative(model: InterlayerModel, k, tol: float = 1e-10):
    """d/dk of the radial transform: -2 pi int h(r) J1(k r) r^2 dr (eV A^3)."""
    scalar = np.ndim(k) == 0
    out = -2 * np.pi * _checked(model, k, lambda kr, r: special.j1(kr) * r * r, tol / (2 * np.pi))
    return float(out[0]) if scalar else out


def _j0pp(x):
    # second derivative of J0: -J0(x) + J1(x)/x, with the x -> 0 limit -1/2
    xs = np.where(np.abs(x) < 1e-8, 1.0, x)
    return np.where(np.abs(x) < 1e-8, -0.5, -special.j0(x) + special.j1(xs) / xs)


def hankel_second_derivative(model: InterlayerModel, k, tol: float = 1e-9):
    scalar = np.ndim(k) == 0
    out = 2 * np.pi * _checked(model, k, lambda kr, r: _j0pp(kr) * r ** 3, tol / (2 * np.pi))
    return float(out[0]) if scalar else out


def closed_form_transform(model: InterlayerModel, k):
    """Exact transforms of the two analytic families."""
    k = np.asarray(k, float)
    s = np.sqrt(k * k + model.gamma ** 2)
    if model.kind == "yukawa-2.4":
        return model.amp * 2 * np.pi * np.exp(-model.ell * s) / s
    if model.kind == "exponential-B1":
        return model.amp * 2 * np.pi * model.gamma * np.exp(-model.ell * s) * (1 + model.ell * s) / s ** 3
    raise ValueError(f"no closed form for {model.kind}")


def closed_form_derivative(model: InterlayerModel, k):
    k = np.asarray(k, float)
    g, l = model.gamma, model.ell
    s = np.sqrt(k * k + g * g)
    ds = k / s
    if model.kind == "yukawa-2.4":
        # d/ds [e^{-l s}/s] = -e^{-l s}(l s + 1)/s^2
        return model.amp * 2 * np.pi * (-np.exp(-l * s) * (l * s + 1) / s ** 2) * ds
    if model.kind == "exponential-B1":
        # d/ds [e^{-l s}(1 + l s)/s^3] = -e^{-l s}(l^2 s^2 + 3 l s + 3)/s^4
        return model.amp * 2 * np.pi * g * (-np.exp(-l * s) * (l * l * s * s + 3 * l * s + 3) / s ** 4) * ds
    raise ValueError(f"no closed form for {model.kind}")


class RadialTable:
    """Chebyshev interpolant of the radial transform and its first two
    derivatives on [0, kmax], built once and then read concurrently."""

    def __init__(self, model: InterlayerModel, kmax: float = 4 * K_ABS, degree: int = 96):
        self.kmax = kmax
        x = np.cos(np.pi * (np.arange(degree + 1) + 0.5) / (degree + 1))
        kk = 0.5 * kmax * (x + 1)
        self._c = [np.polynomial.chebyshev.chebfit(x, f(model, kk), degree)
                   for f in (hankel_transform, hankel_derivative, hankel_second_derivative)]

    def __call__(self, k, deriv: int = 0):
        x = 2 * np.asarray(k, float) / self.kmax - 1
        return np.polynomial.chebyshev.chebval(x, self._c[deriv])


# ---------------------------------------------------------------- coefficients

@dataclass(frozen=True)
class InterlayerCoeffs:
    w1: float        # eV
    w2: float        # eV
    w3: float        # eV
    w1prime: float   # eV A, radial derivative at |K| divided by |Gamma| (signed)
    zeta: float
    xi: float        # 1/A scaled by epsilon, see extract_interlayer_coeffs
    lam: np.ndarray  # (6,) complex
    mu: np.ndarray   # (3,) complex
    hK: float        # radial transform at |K| (eV A^2)
    epsilon: float

    @property
    def w1prime_abs(self) -> float:
        return abs(self.w1prime)


def _angular_values(model: InterlayerModel):
    if model.angular is None:
        return np.ones(6, complex), np.zeros(3, complex)
    lam = np.array([model.angular(rot(np.pi * i / 3) @ np.array([1.0, 0.0])) for i in range(6)],
                   complex)
    mu = np.empty(3, complex)
    h = 1e-5
    for j in range(3):
        u = lambda p: rot(2 * np.pi * j / 3 + p) @ np.array([1.0, 0.0])
        mu[j] = (model.angular(u(h)) - model.angular(u(-h))) / (2 * h) / K_ABS
    return lam, mu


def extract_interlayer_coeffs(model: InterlayerModel, geom, epsilon: float) -> InterlayerCoeffs:
    """Shell couplings w1, w2, w3, gradient coupling and the dimensionless ratios.

    zeta = h(2|K|)/h(|K|) and xi = epsilon h'(|K|)/h(|K|), which equal the
    normalized definitions once h_rad(|K|) is scaled to epsilon."""
    Kabs = float(np.linalg.norm(geom.K))
    area = geom.cell_area
    hk = hankel_transform(model, np.array([Kabs, 2 * Kabs, np.sqrt(7) * Kabs]))
    dh = hankel_derivative(model, Kabs)
    lam, mu = _angular_values(model)
    if hk[0] == 0:
        zeta = xi = 0.0
    else:
        zeta = hk[1] / hk[0]
        xi = epsilon * dh / hk[0]
    return InterlayerCoeffs(w1=hk[0] / area, w2=hk[1] / area, w3=hk[2] / area,
                            w1prime=dh / area, zeta=float(zeta), xi=float(xi),
                            lam=lam, mu=mu, hK=float(hk[0]), epsilon=float(epsilon))


def ell_of_epsilon(epsilon, gamma_cal=None, eps0: float = 0.05, ell0: float = 3.5):
    """Interlayer distance ell = gamma |log eps|, calibrated so ell(eps0) = ell0."""
    e = np.asarray(epsilon, float)
    if np.any(e <= 0) or np.any(e >= 1):
        raise ValueError("epsilon must lie in (0, 1)")
    if gamma_cal is None:
        gamma_cal = ell0 / abs(np.log(eps0))
    out = gamma_cal * np.abs(np.log(e))
    return float(out) if np.ndim(epsilon) == 0 else out


def yukawa_ell(epsilon: float, gamma: float, lam0: float = 1.0) -> float:
    """Layer distance making the normalized yukawa transform equal epsilon at |K|."""
    s = np.sqrt(K_ABS ** 2 + gamma ** 2)
    return -np.log(lam0 * epsilon * s / (2 * np.pi)) / s


def b1_ell(epsilon: float, gamma: float, lam0: Optional[float] = None) -> float:
    """Layer distance for the exponential family with h(|K|) = lam0 * epsilon."""
    from scipy.optimize import brentq
    s = np.sqrt(K_ABS ** 2 + gamma ** 2)
    zmax = 2 * np.pi * gamma / s ** 3
    lam0 = zmax if lam0 is None else lam0
    if not 0 < lam0 <= zmax:
        raise ValueError("lam0 out of range for the exponential family")
    target = lam0 * epsilon
    z = lambda x: zmax * np.exp(-x * s) * (1 + x * s) - target
    hi = 1.0
    while z(hi) > 0:
        hi *= 2
    return brentq(z, 0.0, hi, xtol=1e-14)


# ---------------------------------------------------------------- decay assumption

@dataclass
class AssumptionReport:
    eta: float
    nu: float
    constants: dict      # bound name -> smallest constant making it hold on the grid
    caps: dict
    passed: dict
    normalization_error: float
    failures: list = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def to_dict(self):
        return {"eta": self.eta, "nu": self.nu, "constants": self.constants, "caps": self.caps,
                "passed": self.passed, "normalization_error": self.normalization_error,
                "failures": self.failures}


def _min_const_power(lhs, base_eps, expo):
    """Smallest C >= 1 with lhs <= C (C eps)^expo, found by bisection in log C."""
    lhs = np.asarray(lhs, float)
    if np.all(lhs <= 0):
        return 0.0

    def ok(C):
        return np.all(lhs <= C * (C * base_eps) ** expo * (1 + 1e-12))

    lo, hi = 0.0, 1.0
    while not ok(np.exp(hi)):
        lo, hi = hi, 2 * hi + 1
        if hi > 700:
            return np.inf
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if ok(np.exp(mid)):
            hi = mid
        else:
            lo = mid
    return float(np.exp(hi))


def check_assumption(model_for_eps: Callable[[float], InterlayerModel], eta: float, nu: float,
                     eps_grid, k_grid, caps: Optional[dict] = None) -> AssumptionReport:
    """Evaluate the decay hypotheses on a momentum grid and an epsilon grid.

    model_for_eps(eps) returns the interlayer model at that epsilon; the radial
    transform is normalized by its value at |K| times eps (so h_rad(|K|) = eps
    up to the recorded normalization error, which is measured before rescaling
    against the model's own amplitude)."""
    eps_grid = np.asarray(eps_grid, float)
    k_grid = np.asarray(k_grid, float)
    if eps_grid.size == 0 or k_grid.size == 0:
        raise ValueError("grids must be nonempty")
    caps = caps or {}
    names = ["neighbor_grad", "neighbor_2K", "global", "shell_K", "shell_2K", "shell_sqrt7K"]
    data = {n: [] for n in names}
    norm_err = 0.0
    failures = []
    for eps in eps_grid:
        m = model_for_eps(float(eps))
        try:
            h = hankel_transform(m, k_grid)
            d1 = hankel_derivative(m, k_grid)
            d2 = hankel_second_derivative(m, k_grid)
            hK = hankel_transform(m, K_ABS)
            dK = hankel_derivative(m, K_ABS)
            h2K = hankel_transform(m, 2 * K_ABS)
        except QuadratureError as exc:
            failures.append({"epsilon": float(eps), "error": str(exc)})
            continue
        norm_err = max(norm_err, abs(hK - eps) / eps)
        # bounds are stated for the radial profile as given
        s0, s1, s2 = np.abs(h), np.abs(d1), np.abs(d2)
        data["neighbor_grad"].append((abs(dK) / eps ** ((1 + eta) / 2),))
        data["neighbor_2K"].append((abs(h2K) / eps ** ((3 + eta) / 2),))
        data["global"].append((np.max(s0 + s1 + s2),))
        kk = k_grid / K_ABS
        for name, kmin, lhs, ex in (("shell_K", 1 - nu, s0 + s1 + s2, eta * kk),
                                    ("shell_2K", 2 * (1 - nu), s0 + s1, (1 + eta) / 2 * kk),
                                    ("shell_sqrt7K", np.sqrt(7) * (1 - nu), s0,
                                     (2 + eta) / np.sqrt(7) * kk)):
            sel = kk >= kmin
            data[name].append((lhs[sel], eps, ex[sel]))
    consts = {}
    for name in names:
        rows = data[name]
        if not rows:
            consts[name] = np.inf
        elif name in ("neighbor_grad", "neighbor_2K", "global"):
            consts[name] = float(max(r[0] for r in rows))
        else:
            consts[name] = max((_min_const_power(l, e, x) for l, e, x in rows if len(l)),
                               default=0.0)
    passed = {n: bool(consts[n] <= caps.get(n, 1e3)) for n in names}
    passed["normalization"] = bool(norm_err <= caps.get("normalization", 1e-6))
    return AssumptionReport(eta=eta, nu=nu, constants=consts,
                            caps={n: caps.get(n, 1e3) for n in names}, passed=passed,
                            normalization_error=float(norm_err), failures=failures)
