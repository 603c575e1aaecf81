"""Band-concentrated Gaussian wave packets, sampling of continuum envelopes onto
the tight-binding lattice, relative errors and epsilon-scaling fits."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.fft import fft2

from .bloch import dirac_data
from .continuum import (ContinuumParams, FieldGrid, GridOperator, NumericalFailure, PlaneWaveBasis,
                        build_bm_matrix, eigenpacket, evolve, grid_coords, make_basis, make_params,
                        multiscale_evolve, multiscale_residual)
from .geometry import SiteTable, build_site_table, make_lattice, reciprocal_data, moire_points, rot
from .hopping import InterlayerModel, IntralayerModel, ell_of_epsilon
from .tightbinding import assemble, propagate

EPS0 = 0.05
THETA0_DEG = 1.05
ELL0 = 3.5
R_DEFAULT = 86.60


@dataclass(frozen=True)
class PacketSpec:
    """Gaussian packet on one continuum band.

    band counts from charge neutrality: 0 is the first band above, -1 the
    first band below. sigma_r is in Angstrom."""
    k0: tuple = (0.0, 0.0)
    band: int = 0
    sigma_r: float = 20.0
    margin: float = 10.0

    def __post_init__(self):
        if not self.sigma_r > 0:
            raise ValueError("sigma_r must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")

    def check_fits(self, R: float):
        if 4 * self.sigma_r + self.margin > R:
            raise ValueError(f"packet support 4*sigma_r={4 * self.sigma_r:.2f} A plus margin "
                             f"{self.margin:g} A exceeds the truncation radius {R:g} A")


@dataclass
class TBState:
    psi: np.ndarray
    sites: SiteTable

    def norm(self) -> float:
        return float(np.linalg.norm(self.psi))


@dataclass
class ErrorSeries:
    times: list
    eta1: list
    eta2: list
    ablation: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def check(self):
        vals = list(self.eta1) + list(self.eta2) + [x for v in self.ablation.values() for x in v]
        if any(not (0 <= x <= 2 + 1e-12) for x in vals):
            raise ValueError("relative errors must lie in [0, 2]")

    def columns(self):
        cols = {"time_hbar_per_eV": list(self.times), "eta1_rel": list(self.eta1),
                "eta2_rel": list(self.eta2)}
        for k in sorted(self.ablation):
            cols[f"eta_{k.replace('+', '_plus_')}_rel"] = list(self.ablation[k])
        return cols


def band_index(basis: PlaneWaveBasis, band: int) -> int:
    """Absolute eigenvalue index for a band counted from neutrality."""
    n = 2 * len(basis.G) + int(band)
    if not 0 <= n < 4 * len(basis.G):
        raise ValueError("band outside the plane-wave spectrum")
    return n


def make_initial(spec: PacketSpec, params: ContinuumParams, basis: PlaneWaveBasis,
                 M=(3, 3), N=(81, 81), order_for_eigvec="1") -> FieldGrid:
    """c * Phi_n(x; k0) * exp(-|x|^2 / (2 sigma_r^2)) on the centered supercell grid."""
    n = band_index(basis, spec.band)
    phi, E = eigenpacket(np.asarray(spec.k0, float), n, params, order_for_eigvec, basis, M, N)
    _, _, X = grid_coords(phi.L, *phi.N)
    g = np.exp(-(X[..., 0] ** 2 + X[..., 1] ** 2) / (2 * spec.sigma_r ** 2))
    f = phi.copy(data=phi.data * g)
    nrm = f.norm()
    if nrm == 0:
        raise NumericalFailure("packet has zero norm")
    f.data /= nrm
    f.meta.update({"sigma_r_angstrom": spec.sigma_r, "band_offset": spec.band,
                   "band_energy_eV": E, "eigvec_order": str(order_for_eigvec),
                   "gauge": "largest plane-wave coefficient real and positive"})
    return f


def spectral_concentration(f: FieldGrid, k0, basis: PlaneWaveBasis, radius: float) -> float:
    """Fraction of discrete Fourier power within radius of the shifted harmonics
    k0 + G (layer 1) and k0 + G + s1 (layer 2)."""
    from .continuum import grid_momenta
    px, py, _ = grid_momenta(f.L, *f.N)
    F = np.abs(fft2(f.data, axes=(1, 2))) ** 2
    total = F.sum()
    if total == 0:
        return 1.0
    inside = 0.0
    for layer, off in ((0, np.zeros(2)), (1, basis.s1)):
        centers = np.asarray(k0, float) + basis.G + off
        P = np.stack([px.ravel(), py.ravel()], 1)
        mask = np.zeros(P.shape[0], bool)
        for c in centers:
            mask |= np.hypot(P[:, 0] - c[0], P[:, 1] - c[1]) <= radius
        mask = mask.reshape(px.shape)
        inside += F[2 * layer:2 * layer + 2][:, mask].sum()
    return float(inside / total)


def interpolate(f: FieldGrid, x) -> np.ndarray:
    """Trigonometric interpolant of every component at physical points x (n, 2).
    Exact for fields band-limited to the grid."""
    x = np.atleast_2d(np.asarray(x, float))
    u = np.linalg.solve(f.L.T, x.T).T
    N1, N2 = f.N
    C = fft2(f.data, axes=(1, 2)) / (N1 * N2)
    n1 = np.fft.fftfreq(N1) * N1
    n2 = np.fft.fftfreq(N2) * N2
    E1 = np.exp(2j * np.pi * np.outer(u[:, 0], n1))
    E2 = np.exp(2j * np.pi * np.outer(u[:, 1], n2))
    out = np.empty((f.data.shape[0], len(x)), complex)
    for c in range(f.data.shape[0]):
        out[c] = np.sum((E1 @ C[c]) * E2, axis=1)
    return out


def sample_to_lattice(f: FieldGrid, sites: SiteTable, params: ContinuumParams, T: float = 0.0,
                      eshift: Optional[float] = None, rotate_K: bool = True,
                      edge_tol: float = 1e-9) -> TBState:
    """Lattice state eps * f_comp(x) * exp(i K_j . x) * exp(-i E_D T) at each site x.

    K_j is the Dirac point of layer j (rotated with the layer); rotate_K=False
    uses the unrotated K and exists only for regression tests."""
    x = sites.positions
    u = np.linalg.solve(f.L.T, x.T).T
    if np.any(np.abs(u) >= 0.5 - edge_tol):
        raise ValueError("sites lie outside the field's supercell")
    vals = interpolate(f, x)
    comp = 2 * (sites.layer.astype(int) - 1) + sites.sublattice.astype(int)
    amp = vals[comp, np.arange(len(x))]
    spec = sites.spec
    K = reciprocal_data(spec).K
    phase = np.empty(len(x))
    for j in (1, 2):
        m = sites.layer == j
        Kj = rot(spec.layer_angle(j)) @ K if rotate_K else K
        phase[m] = x[m] @ Kj
    e = params.eshift if eshift is None else eshift
    psi = params.epsilon * amp * np.exp(1j * phase) * np.exp(-1j * e * T)
    return TBState(psi, sites)


def relative_error(cont: TBState, ref: TBState) -> float:
    if cont.psi.shape != ref.psi.shape:
        raise ValueError("states live on different site tables")
    d = np.linalg.norm(ref.psi)
    if d == 0:
        raise ValueError("reference state has zero norm")
    return float(np.linalg.norm(cont.psi - ref.psi) / d)


def group_velocity(k0, n: int, params: ContinuumParams, order, basis: PlaneWaveBasis,
                   h: float = 1e-4, gap_tol: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of E_n at k0 (Angstrom per hbar/eV)."""
    k0 = np.asarray(k0, float)
    w = np.linalg.eigvalsh(build_bm_matrix(k0, params, order, basis))
    gaps = [abs(w[n] - w[m]) for m in (n - 1, n + 1) if 0 <= m < len(w)]
    if gaps and min(gaps) <= gap_tol:
        raise ValueError("band is degenerate at k0; group velocity undefined")
    g = np.zeros(2)
    for i in range(2):
        dk = np.zeros(2)
        dk[i] = h
        ep = np.linalg.eigvalsh(build_bm_matrix(k0 + dk, params, order, basis))[n]
        em = np.linalg.eigvalsh(build_bm_matrix(k0 - dk, params, order, basis))[n]
        g[i] = (ep - em) / (2 * h)
    return g


# ---------------------------------------------------------------- experiments

def beta_calibrated(theta0_deg=THETA0_DEG, eps0=EPS0) -> float:
    return 2 * np.sin(np.deg2rad(theta0_deg) / 2) / eps0


def auto_supercell(params: ContinuumParams, R: float, margin: float = 10.0, per_cell: int = 27):
    """Smallest multiple-of-3 supercell whose inscribed disk holds R + margin, and an odd
    grid with about per_cell points per moire period."""
    am = np.linalg.norm(params.am[0])
    height = am * np.sin(np.pi / 3)
    M = 3
    while 0.5 * M * height < R + margin:
        M += 3
    N = per_cell * M
    N += 1 - N % 2
    return (M, M), (N, N)


@dataclass
class Experiment:
    epsilon: float
    spec: object
    params: ContinuumParams
    sites: SiteTable
    H: object
    basis: PlaneWaveBasis
    M: tuple
    N: tuple
    f0: FieldGrid
    psi0: TBState
    timings: dict


@dataclass
class ContinuumSetup:
    epsilon: float
    spec: object
    params: ContinuumParams
    basis: PlaneWaveBasis
    M: tuple
    N: tuple
    f0: FieldGrid
    packet: PacketSpec
    inter: InterlayerModel
    intra: IntralayerModel
    timings: dict


def continuum_setup(epsilon: float = EPS0, packet: Optional[PacketSpec] = None,
                    intra: Optional[IntralayerModel] = None,
                    inter_for_eps: Optional[Callable[[float], InterlayerModel]] = None,
                    theta_deg: Optional[float] = None, G_shells: float = 5.0,
                    supercell=None, grid=None, k0_point: str = "Gamma",
                    R: Optional[float] = None, lattice_kw: Optional[dict] = None,
                    beta: Optional[float] = None, band: int = 0,
                    sigma_r: Optional[float] = None, margin: float = 0.0) -> ContinuumSetup:
    """Parameters and the initial packet at one epsilon.

    theta follows 2 sin(theta/2) = beta eps with beta calibrated at eps0 unless
    given; ell follows the logarithmic calibration unless inter_for_eps is given.
    The supercell must hold a disk of radius R (default: the packet support).
    Without an explicit packet, one is centered at the named moire point with
    width sigma_r (default 1/eps Angstrom)."""
    tm = {}
    t0 = time.perf_counter()
    intra = intra or IntralayerModel()
    if theta_deg is None:
        beta = beta_calibrated() if beta is None else beta
        theta_deg = np.rad2deg(2 * np.arcsin(beta * epsilon / 2))
    inter = inter_for_eps(epsilon) if inter_for_eps else InterlayerModel(ell=ell_of_epsilon(epsilon))
    spec = make_lattice(theta_deg=theta_deg, epsilon=epsilon, **(lattice_kw or {}))
    params = make_params(spec, intra, inter, dirac=dirac_data(intra, spec))
    tm["parameters"] = time.perf_counter() - t0
    if packet is None:
        k0 = moire_points(reciprocal_data(spec))[k0_point] if k0_point else np.zeros(2)
        packet = PacketSpec(k0=tuple(map(float, k0)), band=band,
                            sigma_r=1.0 / epsilon if sigma_r is None else sigma_r, margin=margin)
    if supercell is None or grid is None:
        Ma, Na = auto_supercell(params, R if R is not None else 4 * packet.sigma_r)
        supercell = supercell or Ma
        grid = grid or Na
    basis = make_basis(params, G_shells * np.linalg.norm(params.bm[0]))
    t0 = time.perf_counter()
    f0 = make_initial(packet, params, basis, supercell, grid)
    tm["initial"] = time.perf_counter() - t0
    f0.meta.update({"k0": list(packet.k0), "epsilon": epsilon, "theta_deg": float(theta_deg),
                    "ell_angstrom": float(inter.ell), "supercell": list(supercell),
                    "grid": list(grid)})
    return ContinuumSetup(epsilon, spec, params, basis, tuple(supercell), tuple(grid), f0,
                          packet, inter, intra, tm)


def setup_experiment(epsilon: float = EPS0, R: float = R_DEFAULT, packet: Optional[PacketSpec] = None,
                     nthreads: int = 1, **kw) -> Experiment:
    """Continuum setup plus the truncated TB Hamiltonian and the paired initial state."""
    cs = continuum_setup(epsilon, packet=packet, R=R, **kw)
    cs.packet.check_fits(R)
    t0 = time.perf_counter()
    sites = build_site_table(cs.spec, R)
    H = assemble(sites, cs.intra, cs.inter, nthreads=nthreads)
    cs.timings["tb_assembly"] = time.perf_counter() - t0
    psi0 = sample_to_lattice(cs.f0, sites, cs.params, 0.0)
    cs.f0.meta["R_angstrom"] = float(R)
    return Experiment(epsilon, cs.spec, cs.params, sites, H, cs.basis, cs.M, cs.N,
                      cs.f0, psi0, cs.timings)


def tb_reference(exp: Experiment, snapshots: Sequence[float], dt: float = 2.0, tol: float = 1e-10):
    T = max(snapshots)
    return dict(propagate(exp.H, exp.psi0.psi, dt, T, snapshots, tol=tol))


def continuum_run(exp: Experiment, order, snapshots: Sequence[float], method: str = "krylov",
                  dt: float = 1.0):
    T = max(snapshots)
    op = GridOperator(exp.params, order, exp.f0.L, exp.f0.N)
    if method == "rk4":
        dt = min(dt, 0.2 / op.norm_estimate())
    return dict(evolve(exp.f0, exp.params, order, dt, T, snapshots, method=method, op=op))


def compare_models(exp: Experiment, snapshots: Sequence[float], orders=("1", "2"),
                   ablations=("1+grad", "1+h2", "1+nnn"), tb_dt: float = 2.0,
                   method: str = "krylov", ref=None) -> ErrorSeries:
    """Relative lattice errors of each continuum model against the TB reference."""
    snaps = sorted(float(s) for s in snapshots)
    t0 = time.perf_counter()
    ref = ref or tb_reference(exp, snaps, dt=tb_dt)
    exp.timings["tb_propagation"] = time.perf_counter() - t0
    etas = {}
    for order in list(orders) + list(ablations):
        t0 = time.perf_counter()
        run = continuum_run(exp, order, snaps, method=method)
        etas[order] = [relative_error(sample_to_lattice(run[t], exp.sites, exp.params, t),
                                      TBState(ref[t], exp.sites)) for t in snaps]
        exp.timings[f"continuum_{order}"] = time.perf_counter() - t0
    es = ErrorSeries(snaps, etas.get("1", []), etas.get("2", []),
                     {k: etas[k] for k in ablations},
                     meta={k: v for k, v in exp.f0.meta.items() if k != "k"})
    es.check()
    return es


def fit_slope(eps, eta):
    """Least-squares slope of log eta against log eps and the RMS fit residual."""
    x = np.log(np.asarray(eps, float))
    y = np.log(np.asarray(eta, float))
    A = np.stack([x, np.ones_like(x)], 1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return float(coef[0]), resid


@dataclass
class SweepResult:
    eps: list
    eta1: list
    eta2: list
    slope1: float = np.nan
    slope2: float = np.nan
    resid1: float = np.nan
    resid2: float = np.nan
    t_fixed: float = 1.0
    failed: Optional[str] = None


def epsilon_sweep(eps_list, t_fixed: float = 1.0, R: float = R_DEFAULT, setup_kw=None,
                  workers: int = 1) -> SweepResult:
    """eta1, eta2 at t_fixed for each epsilon and the fitted log-log slopes."""
    eps_list = sorted(float(e) for e in eps_list)
    if len(eps_list) < 4:
        raise ValueError("the sweep needs at least four epsilon values")
    if eps_list[0] < 0.05 - 1e-12 or eps_list[-1] > 0.175 + 1e-12:
        raise ValueError("epsilon values must lie in [0.05, 0.175]")
    setup_kw = setup_kw or {}

    def one(e):
        exp = setup_experiment(e, R=R, **setup_kw)
        es = compare_models(exp, [t_fixed], ablations=())
        return es.eta1[0], es.eta2[0]

    res = SweepResult([], [], [], t_fixed=t_fixed)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            futs = [ex.submit(one, e) for e in eps_list]
            outs = []
            for e, fu in zip(eps_list, futs):
                try:
                    outs.append((e, fu.result()))
                except Exception as exc:  # keep partial results
                    res.failed = f"epsilon={e}: {exc}"
                    break
    else:
        outs = []
        for e in eps_list:
            try:
                outs.append((e, one(e)))
            except Exception as exc:
                res.failed = f"epsilon={e}: {exc}"
                break
    for e, (a, b) in outs:
        res.eps.append(e)
        res.eta1.append(a)
        res.eta2.append(b)
    if res.failed is None:
        res.slope1, res.resid1 = fit_slope(res.eps, res.eta1)
        res.slope2, res.resid2 = fit_slope(res.eps, res.eta2)
    return res


def multiscale_run(setup, snapshots, dt: Optional[float] = None, weights=(1.0, 1.0, 1.0)):
    op = GridOperator(setup.params, "1", setup.f0.L, setup.f0.N)
    if dt is None:
        nrm = op.norm_estimate()
        dt = 0.2 / nrm if nrm > 0 else max(snapshots)
    return multiscale_evolve(setup.f0, setup.params, dt, max(snapshots), snapshots, weights)


@dataclass
class MultiscaleCheck:
    epsilon: float
    t: float
    rel_diff: float       # |f_multiscale - f_direct| / |f0|
    residual: float


def multiscale_vs_direct(epsilon: float, t: float = 1.0, dt: Optional[float] = None,
                         **kw) -> MultiscaleCheck:
    """Continuum-only comparison of the multiscale sum with direct second-order evolution."""
    cs = continuum_setup(epsilon, **kw)
    op1 = GridOperator(cs.params, "1", cs.f0.L, cs.f0.N)
    dt = dt or 0.05 / op1.norm_estimate()
    ms = multiscale_evolve(cs.f0, cs.params, dt, t, [t])
    direct = evolve(cs.f0, cs.params, "2", 1.0, t, [t], method="krylov", krylov_tol=1e-13)[-1][1]
    comb = ms.combined[-1]
    rel = np.linalg.norm(comb.data - direct.data) / np.linalg.norm(cs.f0.data)
    res = float(multiscale_residual(ms)[-1]) / cs.f0.norm()
    return MultiscaleCheck(epsilon, t, float(rel), res)
