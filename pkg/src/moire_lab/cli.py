"""moire-lab command line: configuration, one subcommand per study, output files
and a run report.

    moire-lab <subcommand> --config cfg.json --out DIR [--threads N] [--seed S] [--assert]

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 an
acceptance check failed in --assert mode.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
import time
import warnings
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import formats
from .bloch import SymmetryViolation, dirac_data
from .continuum import GridOperator, NumericalFailure, band_structure, evolve, make_params, parse_order
from .geometry import A0_CC, A_GRAPHENE, build_site_table, kpath, make_lattice, moire_points, reciprocal_data
from .hopping import (K_ABS, R0_SK, InterlayerModel, IntralayerModel, QuadratureError, check_assumption,
                      closed_form_transform, ell_of_epsilon, extract_interlayer_coeffs, yukawa_ell)
from .tightbinding import KrylovError, assemble, propagate
from .wavepacket import (compare_models, continuum_setup, epsilon_sweep, multiscale_run,
                         setup_experiment)

log = logging.getLogger("moire_lab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 2, 3, 4
NUMERICAL_ERRORS = (NumericalFailure, KrylovError, QuadratureError, SymmetryViolation,
                    np.linalg.LinAlgError, FloatingPointError)

# reference values used by --assert (value, relative tolerance)
REFERENCE_INTRA = {"mu_eV": (0.79, 0.01), "v_eV_angstrom": (5.23, 0.01),
                   "vd_eV_angstrom2": (-1.12, 0.02), "vo_eV_angstrom2": (-2.25, 0.02)}
REFERENCE_INTER = {"w1_meV": (110.85, 0.01), "w2_meV": (1.56, 0.03), "w3_meV": (0.06, 0.15),
                   "w1prime_abs_meV_angstrom": (226.15, 0.01)}
ENERGY_WINDOWS = {"v_dK_meV": (160, 180), "w1prime_dK_meV": (6, 9), "vd_dK2_meV": (0.5, 2.5),
                  "vo_dK2_meV": (0.5, 2.5), "w2_meV": (1, 2.5)}
SLOPE_TARGETS = {"order1": (1.98, 0.15), "order2": (2.98, 0.20)}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LatticeCfg(_Strict):
    a_angstrom: float = Field(A_GRAPHENE, gt=0)
    theta_deg: float = Field(1.05, gt=0, lt=180)
    epsilon: float = Field(0.05, gt=0, lt=1)
    dshift_angstrom: tuple[float, float] = (0.0, 0.0)
    tauA_angstrom: Optional[tuple[float, float]] = None


class IntraCfg(_Strict):
    kind: Literal["slater-koster-inplane", "nearest-neighbor", "tabulated"] = "slater-koster-inplane"
    Vpppi_eV: float = -2.7
    a0_angstrom: float = Field(A0_CC, gt=0)
    r0_angstrom: float = Field(R0_SK, gt=0)
    include_onsite: bool = False
    table_r_angstrom: Optional[list[float]] = None
    table_h_eV: Optional[list[float]] = None


class InterParamsCfg(_Strict):
    Vpppi_eV: float = -2.7
    Vppsigma_eV: float = 0.48
    a0_angstrom: float = Field(A0_CC, gt=0)
    r0_angstrom: float = Field(R0_SK, gt=0)
    ell_angstrom: float = Field(3.5, ge=0)
    gamma_per_angstrom: float = Field(1.0, gt=0)
    amp_eV: Optional[float] = None            # exponential family prefactor
    amp_eV_angstrom: Optional[float] = None   # yukawa family prefactor


class InterCfg(_Strict):
    kind: Literal["slater-koster", "exponential-B1", "yukawa-2.4", "zero"] = "slater-koster"
    params: InterParamsCfg = InterParamsCfg()

    @model_validator(mode="after")
    def _amp_units(self):
        p = self.params
        if self.kind == "yukawa-2.4" and p.amp_eV is not None:
            raise ValueError("yukawa prefactor is amp_eV_angstrom")
        if self.kind == "exponential-B1" and p.amp_eV_angstrom is not None:
            raise ValueError("exponential prefactor is amp_eV")
        return self


class HoppingCfg(_Strict):
    intra: IntraCfg = IntraCfg()
    inter: InterCfg = InterCfg()


class TruncationCfg(_Strict):
    R_angstrom: float = Field(86.60, gt=0)


class PairCfg(_Strict):
    M1: int = Field(gt=0)
    M2: int = Field(gt=0)


class GridCfg(_Strict):
    N1: int = Field(gt=1)
    N2: int = Field(gt=1)


class ContinuumCfg(_Strict):
    G_cut_bm_units: float = Field(5.0, gt=0)   # plane-wave cutoff in units of |b_m|
    supercell: Optional[PairCfg] = None
    grid: Optional[GridCfg] = None
    order: str = "1"
    method: Literal["krylov", "rk4"] = "krylov"

    @field_validator("order")
    @classmethod
    def _order(cls, v):
        parse_order(v)
        return v


class PacketCfg(_Strict):
    band: int = 0
    k0_point: Optional[Literal["K", "Gamma", "M", "Kprime"]] = "Gamma"
    k0_per_angstrom: Optional[tuple[float, float]] = None
    sigma_r_angstrom: Optional[float] = Field(None, gt=0)   # default 1/epsilon
    margin_angstrom: float = Field(0.0, ge=0)


class EvolutionCfg(_Strict):
    dt_hbar_per_eV: float = Field(2.0, gt=0)             # lattice Krylov step cap
    cont_dt_hbar_per_eV: Optional[float] = Field(None, gt=0)
    T_hbar_per_eV: float = Field(10.0, gt=0)
    snapshot_times_hbar_per_eV: list[float] = []
    krylov_tol: float = Field(1e-10, gt=0)

    @model_validator(mode="after")
    def _snaps(self):
        if any(s < 0 or s > self.T_hbar_per_eV for s in self.snapshot_times_hbar_per_eV):
            raise ValueError("snapshot times must lie in [0, T]")
        return self


class SweepCfg(_Strict):
    eps_list: list[float] = [0.05, 0.075, 0.1, 0.125, 0.15, 0.175]
    t_fixed_hbar_per_eV: float = Field(1.0, gt=0)
    interlayer_rule: Literal["log-calibrated", "yukawa-normalized", "fixed"] = "log-calibrated"
    yukawa_gamma_per_angstrom: float = Field(1.0, gt=0)
    yukawa_scale_eV_angstrom2: float = Field(10.5, gt=0)


class BandsCfg(_Strict):
    path: list[Literal["K", "Gamma", "M", "Kprime"]] = ["K", "Gamma", "M", "K"]
    samples_per_segment: int = Field(20, gt=0)
    nbands_out: int = Field(8, gt=0)
    check_convergence: bool = True


class SymmetryCfg(_Strict):
    R_angstrom: float = Field(40.0, gt=0)
    supercell: PairCfg = PairCfg(M1=3, M2=3)
    grid: GridCfg = GridCfg(N1=27, N2=27)
    trials: int = Field(3, gt=0)
    dshifts_angstrom: list[tuple[float, float]] = [(0.3, -0.7), (1.0, 0.4)]


class AssumptionCfg(_Strict):
    eta: float = Field(0.5, gt=0, lt=1)
    nu: float = Field(0.1, gt=0, lt=1)
    eps_list: list[float] = [0.05, 0.075, 0.1, 0.125, 0.15, 0.175]
    k_max_K_units: float = Field(3.0, gt=0)
    nk: int = Field(60, gt=1)
    caps: dict[str, float] = {}
    interlayer_rule: Literal["log-calibrated", "yukawa-normalized", "fixed"] = "log-calibrated"


class ExperimentConfig(_Strict):
    lattice: LatticeCfg = LatticeCfg()
    hopping: HoppingCfg = HoppingCfg()
    truncation: TruncationCfg = TruncationCfg()
    continuum: ContinuumCfg = ContinuumCfg()
    packet: PacketCfg = PacketCfg()
    evolution: EvolutionCfg = EvolutionCfg()
    sweep: SweepCfg = SweepCfg()
    bands: BandsCfg = BandsCfg()
    symmetry: SymmetryCfg = SymmetryCfg()
    assumption: AssumptionCfg = AssumptionCfg()
    seed: int = 0


def load_config(path) -> tuple[ExperimentConfig, str]:
    """Validated config and the sha256 of its canonical JSON form."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, config_hash(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------- model builders

def intra_model(cfg: ExperimentConfig) -> IntralayerModel:
    c = cfg.hopping.intra
    tab_r = tuple(c.table_r_angstrom) if c.table_r_angstrom else None
    tab_h = tuple(c.table_h_eV) if c.table_h_eV else None
    return IntralayerModel(kind=c.kind, Vpppi=c.Vpppi_eV, a0=c.a0_angstrom, r0=c.r0_angstrom,
                           include_onsite=c.include_onsite, table_r=tab_r, table_h=tab_h)


def inter_model(cfg: ExperimentConfig, ell: Optional[float] = None) -> InterlayerModel:
    c = cfg.hopping.inter
    p = c.params
    amp = p.amp_eV if c.kind == "exponential-B1" else p.amp_eV_angstrom
    return InterlayerModel(kind=c.kind, Vpppi=p.Vpppi_eV, Vppsigma=p.Vppsigma_eV, a0=p.a0_angstrom,
                           r0=p.r0_angstrom, ell=p.ell_angstrom if ell is None else ell,
                           gamma=p.gamma_per_angstrom, amp=1.0 if amp is None else amp)


def inter_family(cfg: ExperimentConfig, rule: str):
    """Interlayer model as a function of epsilon."""
    eps0 = cfg.lattice.epsilon
    ell0 = cfg.hopping.inter.params.ell_angstrom
    if rule == "fixed":
        m = inter_model(cfg)
        return lambda e: m
    if rule == "log-calibrated":
        return lambda e: inter_model(cfg, ell=ell_of_epsilon(e, eps0=eps0, ell0=ell0))
    g = cfg.sweep.yukawa_gamma_per_angstrom
    lam0 = cfg.sweep.yukawa_scale_eV_angstrom2
    return lambda e: InterlayerModel(kind="yukawa-2.4", gamma=g, amp=1.0, ell=yukawa_ell(e, g, lam0))


def lattice_kw(cfg: ExperimentConfig) -> dict:
    c = cfg.lattice
    kw = {"a": c.a_angstrom, "dshift": c.dshift_angstrom}
    if c.tauA_angstrom is not None:
        kw["tauA"] = c.tauA_angstrom
    return kw


def lattice_spec(cfg: ExperimentConfig):
    return make_lattice(theta_deg=cfg.lattice.theta_deg, epsilon=cfg.lattice.epsilon, **lattice_kw(cfg))


def beta_of(cfg: ExperimentConfig) -> float:
    return 2 * np.sin(np.deg2rad(cfg.lattice.theta_deg) / 2) / cfg.lattice.epsilon


def setup_kw(cfg: ExperimentConfig, sweep: bool = False) -> dict:
    """Keyword arguments for continuum_setup / setup_experiment."""
    cc, pc = cfg.continuum, cfg.packet
    kw = dict(intra=intra_model(cfg), G_shells=cc.G_cut_bm_units, lattice_kw=lattice_kw(cfg),
              band=pc.band, sigma_r=pc.sigma_r_angstrom, margin=pc.margin_angstrom,
              k0_point=pc.k0_point)
    if sweep:
        kw["inter_for_eps"] = inter_family(cfg, cfg.sweep.interlayer_rule)
        kw["beta"] = beta_of(cfg)
        kw["sigma_r"] = None
    else:
        m = inter_model(cfg)
        kw["inter_for_eps"] = lambda e: m
        kw["theta_deg"] = cfg.lattice.theta_deg
        if cc.supercell is not None:
            kw["supercell"] = (cc.supercell.M1, cc.supercell.M2)
        if cc.grid is not None:
            kw["grid"] = (cc.grid.N1, cc.grid.N2)
        if pc.k0_per_angstrom is not None:
            from .wavepacket import PacketSpec
            sig = pc.sigma_r_angstrom or 1.0 / cfg.lattice.epsilon
            kw["packet"] = PacketSpec(k0=tuple(pc.k0_per_angstrom), band=pc.band, sigma_r=sig,
                                      margin=pc.margin_angstrom)
    return kw


def snapshot_times(cfg: ExperimentConfig):
    ev = cfg.evolution
    return sorted(set(float(s) for s in ev.snapshot_times_hbar_per_eV) | {float(ev.T_hbar_per_eV)})


# ---------------------------------------------------------------- run context

class Run:
    """Output directory, stage timings, manifest and acceptance checks of one invocation."""

    def __init__(self, command, cfg, chash, out, threads, seed):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.report = formats.RunReport(command=command, config_hash=chash, version=_version(),
                                        seed=seed, threads=threads)
        self.threads = threads
        self.seed = seed
        self.t0 = time.perf_counter()

    @contextlib.contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.report.stages[name] = self.report.stages.get(name, 0.0) + time.perf_counter() - t0

    def path(self, name) -> Path:
        return self.out / name

    def emit(self, path):
        self.report.add_file(path, self.out)
        return path

    def check(self, name, ok, **detail):
        self.report.checks[name] = {"passed": bool(ok), **detail}

    @property
    def checks_ok(self) -> bool:
        return all(c["passed"] for c in self.report.checks.values())

    def finish(self, code, error=""):
        r = self.report
        r.exit_code = code
        r.status = {EXIT_OK: "ok", EXIT_CONFIG: "config-error", EXIT_NUMERIC: "numerical-failure",
                    EXIT_ACCEPT: "acceptance-failure"}.get(code, "error")
        r.error = error
        r.wall_time_s = time.perf_counter() - self.t0
        formats.write_json(self.path("run_report.json"), r.to_dict())
        return code


def _version() -> str:
    try:
        from importlib.metadata import version
        return version("artifact")
    except Exception:
        return "0+unknown"


def _within(x, ref, rel):
    return abs(x - ref) <= rel * abs(ref)


# ---------------------------------------------------------------- subcommands

def cmd_params(run: Run):
    cfg = run.cfg
    with run.stage("intralayer"):
        intra = intra_model(cfg)
        spec = lattice_spec(cfg)
        dd = dirac_data(intra, spec)
    with run.stage("interlayer"):
        inter = inter_model(cfg)
        rec = reciprocal_data(spec)
        cf = extract_interlayer_coeffs(inter, rec, spec.epsilon)
    dK = rec.dK
    rows = [("mu", dd.eshift, "eV"), ("v", dd.v, "eV_angstrom"),
            ("alpha_re", dd.alpha.real, "eV_angstrom"), ("alpha_im", dd.alpha.imag, "eV_angstrom"),
            ("vd", dd.vd, "eV_angstrom2"), ("vo_re", dd.vo.real, "eV_angstrom2"),
            ("vo_im", dd.vo.imag, "eV_angstrom2"), ("vo_abs", abs(dd.vo), "eV_angstrom2"),
            ("w1", 1e3 * cf.w1, "meV"), ("w2", 1e3 * cf.w2, "meV"), ("w3", 1e3 * cf.w3, "meV"),
            ("w1prime", 1e3 * cf.w1prime, "meV_angstrom"),
            ("w1prime_abs", 1e3 * cf.w1prime_abs, "meV_angstrom"),
            ("zeta", cf.zeta, "dimensionless"), ("xi", cf.xi, "dimensionless"),
            ("ell", inter.ell, "angstrom"), ("dK", dK, "per_angstrom"),
            ("v_dK", 1e3 * dd.v * dK, "meV"), ("w1prime_dK", 1e3 * cf.w1prime_abs * dK, "meV"),
            ("vd_dK2", 1e3 * abs(dd.vd) * dK ** 2, "meV"),
            ("vo_dK2", 1e3 * abs(dd.vo) * dK ** 2, "meV")]
    for i, z in enumerate(cf.lam):
        rows += [(f"lambda{i}_re", z.real, "dimensionless"), (f"lambda{i}_im", z.imag, "dimensionless")]
    for j, z in enumerate(cf.mu):
        rows += [(f"mu{j}_re", z.real, "angstrom"), (f"mu{j}_im", z.imag, "angstrom")]
    run.emit(formats.write_csv(run.path("params.csv"), ["quantity", "value", "unit"], rows))
    doc = {f"{n}_{u}": v for n, v, u in rows}
    if inter.kind in ("exponential-B1", "yukawa-2.4"):
        ks = K_ABS * np.array([1.0, 2.0, np.sqrt(7.0)])
        cw = closed_form_transform(inter, ks) / rec.cell_area
        doc["closed_form_meV"] = {"w1": 1e3 * cw[0], "w2": 1e3 * cw[1], "w3": 1e3 * cw[2]}
    doc["dirac_fd_rel_error"] = dd.fd_rel_error
    run.emit(formats.write_json(run.path("params.json"), doc))

    got = {"mu_eV": dd.eshift, "v_eV_angstrom": dd.v, "vd_eV_angstrom2": dd.vd,
           "vo_eV_angstrom2": dd.vo.real if abs(dd.vo.real) >= abs(dd.vo.imag) else dd.vo.imag,
           "w1_meV": 1e3 * cf.w1, "w2_meV": 1e3 * cf.w2, "w3_meV": 1e3 * cf.w3,
           "w1prime_abs_meV_angstrom": 1e3 * cf.w1prime_abs}
    for k, (ref, rel) in {**REFERENCE_INTRA, **REFERENCE_INTER}.items():
        run.check(k, _within(got[k], ref, rel), value=got[k], reference=ref, rel_tol=rel)
    scales = {"v_dK_meV": 1e3 * dd.v * dK, "w1prime_dK_meV": 1e3 * cf.w1prime_abs * dK,
              "vd_dK2_meV": 1e3 * abs(dd.vd) * dK ** 2, "vo_dK2_meV": 1e3 * abs(dd.vo) * dK ** 2,
              "w2_meV": 1e3 * cf.w2}
    for k, (lo, hi) in ENERGY_WINDOWS.items():
        run.check(f"scale_{k}", lo <= scales[k] <= hi, value=scales[k], window=[lo, hi])


def band_summary(energies, eshift, nb=2):
    """Width of the nb middle bands and the gap to the nearest remote band (eV)."""
    E = energies - eshift
    n = E.shape[1]
    lo, hi = n // 2 - nb // 2, n // 2 + nb // 2
    mid = E[:, lo:hi]
    width = float(mid.max() - mid.min())
    gap = float(min(E[:, hi].min() - mid.max(), mid.min() - E[:, lo - 1].max()))
    return width, gap


def cmd_bands(run: Run):
    cfg = run.cfg
    bc = cfg.bands
    with run.stage("parameters"):
        spec = lattice_spec(cfg)
        params = make_params(spec, intra_model(cfg), inter_model(cfg))
        pts = moire_points(reciprocal_data(spec))
        ks, arc = kpath([pts[p] for p in bc.path], bc.samples_per_segment)
    with run.stage("diagonalization"):
        G_cut = cfg.continuum.G_cut_bm_units * np.linalg.norm(params.bm[0])
        bb = band_structure(ks, params, cfg.continuum.order, G_cut,
                            check_convergence=bc.check_convergence)
    E = bb.energies - params.eshift
    n = E.shape[1]
    nb = min(bc.nbands_out, n)
    lo = n // 2 - nb // 2
    offs = list(range(-(nb // 2), nb - nb // 2))
    header = ["k_index", "arclength_per_angstrom", "kx_per_angstrom", "ky_per_angstrom"]
    header += [f"E_band{o:+d}_meV" for o in offs]
    rows = [[i, arc[i], ks[i, 0], ks[i, 1], *(1e3 * E[i, lo:lo + nb])] for i in range(len(ks))]
    run.emit(formats.write_csv(run.path("bands.csv"), header, rows))
    width, gap = band_summary(bb.energies, params.eshift)
    summary = {"middle_width_meV": 1e3 * width, "remote_gap_meV": 1e3 * gap,
               "converged": bb.converged, "convergence_shift_meV":
               None if bb.convergence_shift is None else 1e3 * bb.convergence_shift,
               "eig_residual_rel": bb.residual, "n_plane_waves": n // 4, "order": cfg.continuum.order}
    run.emit(formats.write_json(run.path("bands_summary.json"), summary))
    run.check("flat_width", width <= 0.025, width_meV=1e3 * width, limit_meV=25.0)
    run.check("remote_gap", gap > 2 * width, gap_meV=1e3 * gap)
    run.check("converged", bool(bb.converged) if bc.check_convergence else True)


def _snap_name(prefix, t):
    return f"{prefix}_t{t:012.4f}.moirfld"


def cmd_evolve(run: Run, model: str):
    cfg = run.cfg
    ev = cfg.evolution
    snaps = sorted(set(snapshot_times(cfg)) | {0.0})
    T = ev.T_hbar_per_eV
    R = cfg.truncation.R_angstrom
    eps = cfg.lattice.epsilon
    if model == "tb":
        with run.stage("setup"):
            exp = setup_experiment(eps, R=R, nthreads=run.threads, **setup_kw(cfg))
        with run.stage("propagation"):
            out = propagate(exp.H, exp.psi0.psi, ev.dt_hbar_per_eV, T, snaps, tol=ev.krylov_tol)
        n0 = np.linalg.norm(exp.psi0.psi)
        rows = []
        run.emit(formats.write_sites(run.path("tb_sites.csv"), exp.sites))
        for t, psi in out:
            run.emit(formats.write_tb_state(run.path(_snap_name("tb", t)), psi, t))
            nrm = np.linalg.norm(psi)
            rows.append((t, nrm, abs(nrm - n0) / n0 if n0 else 0.0))
        run.emit(formats.write_csv(run.path("norms.csv"), ["time_hbar_per_eV", "norm_l2",
                                                           "norm_drift_rel"], rows))
        drift = max(r[2] for r in rows)
        run.check("norm_drift", drift <= 1e-8, value=drift, limit=1e-8)
        return
    with run.stage("setup"):
        cs = continuum_setup(eps, R=R, **setup_kw(cfg))
    if model in ("cont1", "cont2"):
        order = "1" if model == "cont1" else "2"
        op = GridOperator(cs.params, order, cs.f0.L, cs.f0.N)
        dt = ev.cont_dt_hbar_per_eV
        if dt is None:
            nrm = op.norm_estimate()
            dt = 1.0 if cfg.continuum.method == "krylov" or nrm == 0 else 0.2 / nrm
        with run.stage("propagation"):
            out = evolve(cs.f0, cs.params, order, dt, T, snaps, method=cfg.continuum.method, op=op)
        n0 = cs.f0.norm()
        rows = []
        for t, f in out:
            run.emit(formats.write_field(run.path(_snap_name(model, t)), f.data, f.L, t))
            rows.append((t, f.norm(), abs(f.norm() - n0) / n0 if n0 else 0.0))
        run.emit(formats.write_csv(run.path("norms.csv"), ["time_hbar_per_eV", "norm_l2",
                                                           "norm_drift_rel"], rows))
        drift = max(r[2] for r in rows)
        run.check("norm_drift", drift <= 1e-6, value=drift, limit=1e-6)
        return
    # multiscale
    from .continuum import multiscale_residual
    with run.stage("propagation"):
        ms = multiscale_run(cs, snaps, dt=ev.cont_dt_hbar_per_eV)
    res = multiscale_residual(ms)
    n0 = cs.f0.norm()
    rows = []
    for i, t in enumerate(ms.times):
        comb, lead = ms.combined[i], ms.f1[i]
        run.emit(formats.write_field(run.path(_snap_name("multiscale", t)), comb.data, comb.L, t))
        corr = comb.data - lead.data
        rows.append((t, comb.norm(), lead.norm(), float(np.sqrt(np.sum(np.abs(corr) ** 2) * comb.dA)),
                     res[i] / n0 if n0 else 0.0))
    run.emit(formats.write_csv(run.path("norms.csv"),
                               ["time_hbar_per_eV", "norm_combined_l2", "norm_leading_l2",
                                "norm_correction_l2", "residual_rel"], rows))
    run.check("finite", all(np.isfinite(r[1]) for r in rows))


def cmd_compare(run: Run):
    cfg = run.cfg
    snaps = [t for t in snapshot_times(cfg) if t > 0]
    with run.stage("setup"):
        exp = setup_experiment(cfg.lattice.epsilon, R=cfg.truncation.R_angstrom,
                               nthreads=run.threads, **setup_kw(cfg))
    with run.stage("models"):
        es = compare_models(exp, snaps, tb_dt=cfg.evolution.dt_hbar_per_eV,
                            method=cfg.continuum.method)
    for k, v in exp.timings.items():
        run.report.stages[f"models.{k}"] = v
    run.emit(formats.write_columns(run.path("error_series.csv"), es.columns()))
    e1, e2 = np.array(es.eta1), np.array(es.eta2)
    run.check("order2_beats_order1", bool(np.all(e2 < e1)), eta1=e1, eta2=e2)
    abl = {k: np.array(v) for k, v in es.ablation.items()}
    if abl:
        gains = {k: float(np.mean(e1 - v)) for k, v in abl.items()}
        best = max(gains, key=gains.get)
        run.check("grad_smallest", best == "1+grad", mean_improvement=gains)
    if "1+nnn" in abl:
        d = np.abs(abl["1+nnn"] - e1)
        run.check("nnn_negligible", bool(np.all(d < 0.1 * e1)), abs_change=d)


def cmd_sweep(run: Run):
    cfg = run.cfg
    sc = cfg.sweep
    with run.stage("sweep"):
        res = epsilon_sweep(sc.eps_list, sc.t_fixed_hbar_per_eV, cfg.truncation.R_angstrom,
                            setup_kw=setup_kw(cfg, sweep=True), workers=run.threads)
    rows = list(zip(res.eps, res.eta1, res.eta2))
    run.emit(formats.write_csv(run.path("sweep.csv"), ["epsilon_dimensionless", "eta1_rel",
                                                       "eta2_rel"], rows))
    fit = {"slope_order1": res.slope1, "slope_order2": res.slope2, "rms_log_residual_order1":
           res.resid1, "rms_log_residual_order2": res.resid2, "t_fixed_hbar_per_eV": res.t_fixed,
           "n_points": len(res.eps), "failed": res.failed,
           "interlayer_rule": sc.interlayer_rule}
    run.emit(formats.write_json(run.path("fit.json"), fit))
    if res.failed:
        raise NumericalFailure(f"sweep stopped early: {res.failed}")
    run.check("n_points", len(res.eps) >= 5, value=len(res.eps))
    for key, s in (("order1", res.slope1), ("order2", res.slope2)):
        ref, tol = SLOPE_TARGETS[key]
        run.check(f"slope_{key}", abs(s - ref) <= tol, value=s, target=ref, tol=tol)


def cmd_symcheck(run: Run):
    from .symmetry import run_symcheck
    cfg = run.cfg
    sc = cfg.symmetry
    with run.stage("setup"):
        spec = lattice_spec(cfg)
        intra, inter = intra_model(cfg), inter_model(cfg)
        sym_spec = spec.replace(dshift=(0.0, 0.0))
        params = make_params(sym_spec, intra, inter)
        sites = build_site_table(sym_spec, sc.R_angstrom)
        H = assemble(sites, intra, inter, nthreads=run.threads)
        pts = moire_points(reciprocal_data(sym_spec))
        ks = [pts["Gamma"], pts["M"], 0.3 * pts["Gamma"] + 0.1 * pts["M"]]
    with run.stage("checks"):
        rep = run_symcheck(params, sites, H, inter, intra,
                           (sc.supercell.M1, sc.supercell.M2), (sc.grid.N1, sc.grid.N2),
                           sc.trials, run.seed, dshifts=sc.dshifts_angstrom, ks=ks)
    run.emit(formats.write_json(run.path("symreport.json"),
                                {"rows": rep.rows, "all_ok": rep.all_ok, "seed": run.seed}))
    run.check("all_verdicts", rep.all_ok,
              failed=[r["operator"] for r in rep.rows if not r["verdict"]])


def cmd_check_assumption(run: Run):
    cfg = run.cfg
    ac = cfg.assumption
    fam = inter_family(cfg, ac.interlayer_rule)
    ks = np.linspace(0.0, ac.k_max_K_units * K_ABS, ac.nk)
    with run.stage("bounds"):
        rep = check_assumption(fam, ac.eta, ac.nu, ac.eps_list, ks, caps=ac.caps)
    run.emit(formats.write_json(run.path("assumption.json"), rep.to_dict()))
    run.check("all_bounds", rep.all_passed, passed=rep.passed)


COMMANDS = {"params": cmd_params, "bands": cmd_bands, "compare": cmd_compare, "sweep": cmd_sweep,
            "symcheck": cmd_symcheck, "check-assumption": cmd_check_assumption}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moire-lab", description="Twisted bilayer continuum and lattice studies.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON experiment configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--assert", dest="do_assert", action="store_true",
                       help="exit 4 if an acceptance check fails")
        p.add_argument("-v", "--verbose", action="store_true")

    for name in COMMANDS:
        common(sub.add_parser(name))
    p = sub.add_parser("evolve")
    p.add_argument("model", choices=["tb", "cont1", "cont2", "multiscale"])
    common(p)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        log.error("--threads must be positive")
        return EXIT_CONFIG
    try:
        cfg, chash = load_config(args.config)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    seed = cfg.seed if args.seed is None else args.seed
    label = args.command + (f" {args.model}" if args.command == "evolve" else "")
    run = Run(label, cfg, chash, args.out, args.threads, seed)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore" if not args.verbose else "default")
            if args.command == "evolve":
                cmd_evolve(run, args.model)
            else:
                COMMANDS[args.command](run)
    except NUMERICAL_ERRORS as exc:
        log.error("numerical failure: %s", exc)
        return run.finish(EXIT_NUMERIC, f"{type(exc).__name__}: {exc}")
    except (ValueError, ConfigError) as exc:
        log.error("config error: %s", exc)
        return run.finish(EXIT_CONFIG, f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # unexpected: keep the partial manifest
        log.exception("run failed")
        return run.finish(EXIT_NUMERIC, f"{type(exc).__name__}: {exc}")
    for name, c in run.report.checks.items():
        log.info("%s %s", "PASS" if c["passed"] else "FAIL", name)
    if args.do_assert and not run.checks_ok:
        failed = [k for k, c in run.report.checks.items() if not c["passed"]]
        log.error("acceptance checks failed: %s", ", ".join(failed))
        return run.finish(EXIT_ACCEPT, "failed checks: " + ", ".join(failed))
    return run.finish(EXIT_OK)


if __name__ == "__main__":
    sys.exit(main())
