"""Fluid descriptions: slightly compressible oil and a Peng-Robinson mixture.

Everything here works on batches of cells: pressures have shape ``(N,)``
and compositions ``(N, nc)``.  Scalar inputs are accepted by the public
helpers and squeezed on return.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .errors import FlashFailure, InfeasibleSplitError, NumericalError

logger = logging.getLogger(__name__)

R_GAS = 8.314462618
SQRT2 = np.sqrt(2.0)
DELTA1 = 1.0 + SQRT2
DELTA2 = 1.0 - SQRT2
OMEGA_A = 0.45723553
OMEGA_B = 0.07779607

FLASH_TOL = 1e-8
TPD_TOL = -1e-10
FLASH_MAX_ITER = 500
STAB_MAX_ITER = 300
RR_TOL = 1e-12


class PhaseStatus(IntEnum):
    SinglePhaseOil = 0
    SinglePhaseGas = 1
    TwoPhase = 2


OIL = PhaseStatus.SinglePhaseOil
GAS = PhaseStatus.SinglePhaseGas
TWO = PhaseStatus.TwoPhase


@dataclass(frozen=True)
class ComponentSpec:
    name: str
    Tc: float
    Pc: float
    acentric: float
    molar_weight: float

    def __post_init__(self):
        if not (self.Tc > 0 and self.Pc > 0 and self.molar_weight > 0):
            raise ValueError(f"component {self.name}: Tc, Pc and molar weight must be positive")


@dataclass
class CellState:
    """Natural variables of a single cell."""
    p: float
    s_o: float
    s_g: float
    x: np.ndarray
    y: np.ndarray
    status: PhaseStatus = OIL


@dataclass
class FlashResult:
    stable: bool
    nu_o: float
    nu_g: float
    x: np.ndarray
    y: np.ndarray
    Z_o: float = np.nan
    Z_g: float = np.nan


# ---------------------------------------------------------------------------
# simple correlations

def oilwater_density(p, rho_ref: float, c_f: float, p_ref: float):
    """Exponential molar density and its pressure derivative."""
    p = np.asarray(p, dtype=float)
    rho = rho_ref * np.exp(c_f * (p - p_ref))
    return rho, c_f * rho


def relperm(s, s_r: float = 0.0, s_r_other: float = 0.0):
    """Quadratic relative permeability ``((s - s_r) / (1 - s_r - s_r_other))**2``.

    Returns ``(kr, dkr/ds)``; kr is clamped to [0, 1] with zero slope outside.
    """
    s = np.asarray(s, dtype=float)
    span = 1.0 - s_r - s_r_other
    se = (s - s_r) / span
    inside = (se > 0.0) & (se < 1.0)
    se_c = np.clip(se, 0.0, 1.0)
    kr = se_c * se_c
    dkr = np.where(inside, 2.0 * se_c / span, 0.0)
    return kr, dkr


def phase_mole_fraction(rho_o, rho_g, s_o, s_g):
    """Molar phase fractions from saturations: ``nu_l = rho_l s_l / sum(rho_m s_m)``."""
    mo = np.asarray(rho_o) * np.asarray(s_o)
    mg = np.asarray(rho_g) * np.asarray(s_g)
    tot = mo + mg
    return mo / tot, mg / tot


def saturation_from_mole_fraction(nu_g, rho_o, rho_g):
    """Inverse of :func:`phase_mole_fraction` for the gas saturation."""
    vg = nu_g / rho_g
    vo = (1.0 - nu_g) / rho_o
    return vg / (vg + vo)


# ---------------------------------------------------------------------------
# Peng-Robinson

def pr_cubic_roots(A, B):
    """Real roots of the PR cubic above the covolume, sorted ascending.

    Closed-form (Cardano / trigonometric) roots polished by Newton steps.
    Returns an ``(N, 3)`` array padded with NaN.
    """
    A = np.atleast_1d(np.asarray(A, dtype=float))
    B = np.atleast_1d(np.asarray(B, dtype=float))
    c2 = -(1.0 - B)
    c1 = A - 3.0 * B * B - 2.0 * B
    c0 = -(A * B - B * B - B ** 3)
    p = c1 - c2 * c2 / 3.0
    q = 2.0 * c2 ** 3 / 27.0 - c2 * c1 / 3.0 + c0
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    shift = -c2 / 3.0
    z = np.full(A.shape + (3,), np.nan)
    one = disc > 0
    if np.any(one):
        sq = np.sqrt(disc[one])
        t = np.cbrt(-q[one] / 2.0 + sq) + np.cbrt(-q[one] / 2.0 - sq)
        z[one, 0] = t + shift[one]
    three = ~one
    if np.any(three):
        pp = np.minimum(p[three], -1e-300)
        r = 2.0 * np.sqrt(-pp / 3.0)
        arg = np.clip(3.0 * q[three] / (pp * r), -1.0, 1.0)
        phi = np.arccos(arg) / 3.0
        for k in range(3):
            z[three, k] = r * np.cos(phi - 2.0 * np.pi * k / 3.0) + shift[three]
    with np.errstate(invalid="ignore"):
        for _ in range(2):
            f = ((z + c2[..., None]) * z + c1[..., None]) * z + c0[..., None]
            df = (3.0 * z + 2.0 * c2[..., None]) * z + c1[..., None]
            ok = np.isfinite(z) & (np.abs(df) > 1e-14)
            z = np.where(ok, z - f / np.where(ok, df, 1.0), z)
        z = np.where(z > B[..., None], z, np.nan)
    return np.sort(z, axis=-1)


def _select_root(roots, root: str):
    if root == "liquid":
        z = np.nanmin(np.where(np.isnan(roots), np.inf, roots), axis=-1)
    elif root == "vapor":
        z = np.nanmax(np.where(np.isnan(roots), -np.inf, roots), axis=-1)
    else:
        raise ValueError(f"unknown root selector {root!r}")
    if not np.all(np.isfinite(z)):
        raise NumericalError("PR cubic has no real root above the covolume")
    return z


class PengRobinson:
    """Peng-Robinson mixture at a fixed temperature with classical mixing rules."""

    def __init__(self, components, bip=None, temperature: float = 300.0):
        self.components = tuple(components)
        nc = len(self.components)
        if bip is None:
            bip = np.zeros((nc, nc))
        bip = np.asarray(bip, dtype=float)
        if bip.shape != (nc, nc) or not np.allclose(bip, bip.T) or np.any(np.diag(bip) != 0):
            raise ValueError("binary interaction matrix must be symmetric with zero diagonal")
        self.bip = bip
        self.nc = nc
        self.Tc = np.array([c.Tc for c in self.components])
        self.Pc = np.array([c.Pc for c in self.components])
        self.omega = np.array([c.acentric for c in self.components])
        self.mw = np.array([c.molar_weight for c in self.components])
        self.set_temperature(temperature)

    def set_temperature(self, T: float):
        self.T = float(T)
        kappa = 0.37464 + 1.54226 * self.omega - 0.26992 * self.omega ** 2
        alpha = (1.0 + kappa * (1.0 - np.sqrt(self.T / self.Tc))) ** 2
        a = OMEGA_A * (R_GAS * self.Tc) ** 2 / self.Pc * alpha
        self.b = OMEGA_B * R_GAS * self.Tc / self.Pc
        self.a_ij = (1.0 - self.bip) * np.sqrt(np.outer(a, a))

    def wilson_k(self, p):
        p = np.asarray(p, dtype=float)[..., None]
        return self.Pc / p * np.exp(5.373 * (1.0 + self.omega) * (1.0 - self.Tc / self.T))

    def _mix(self, p, comp):
        RT = R_GAS * self.T
        S = comp @ self.a_ij
        am = np.einsum("ni,ni->n", comp, S)
        bm = comp @ self.b
        A = am * p / RT ** 2
        B = bm * p / RT
        return S, am, bm, A, B

    def z_factor(self, p, comp, root: str = "liquid"):
        p = np.atleast_1d(np.asarray(p, dtype=float))
        comp = np.atleast_2d(np.asarray(comp, dtype=float))
        *_, A, B = self._mix(p, comp)
        return _select_root(pr_cubic_roots(A, B), root)

    def ln_phi(self, p, comp, Z):
        """ln of fugacity coefficients for a given compressibility root."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        comp = np.atleast_2d(np.asarray(comp, dtype=float))
        Z = np.atleast_1d(np.asarray(Z, dtype=float))
        S, am, bm, A, B = self._mix(p, comp)
        if np.any(Z <= B):
            raise NumericalError("compressibility factor at or below the covolume term")
        beta = self.b / bm[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            sigma = np.where(am[:, None] > 0, 2.0 * S / am[:, None], 0.0) - beta
            C = np.where(B > 0, A / (2.0 * SQRT2 * B), 0.0)
            L = np.log((Z + DELTA1 * B) / (Z + DELTA2 * B))
        return beta * (Z - 1.0)[:, None] - np.log(Z - B)[:, None] - (C * L)[:, None] * sigma

    def phase_properties(self, p, comp, root: str):
        """Density, ln phi and their derivatives w.r.t. pressure and (unnormalised) composition.

        Returns a dict with ``rho (N,)``, ``rho_p (N,)``, ``rho_x (N, nc)``,
        ``lnphi (N, nc)``, ``lnphi_p (N, nc)``, ``lnphi_x (N, nc, nc)`` and ``Z``.
        """
        p = np.atleast_1d(np.asarray(p, dtype=float))
        comp = np.atleast_2d(np.asarray(comp, dtype=float))
        RT = R_GAS * self.T
        S, am, bm, A, B = self._mix(p, comp)
        Z = _select_root(pr_cubic_roots(A, B), root)

        A_p, B_p = A / p, B / p
        A_x = 2.0 * S * (p / RT ** 2)[:, None]
        B_x = np.outer(p / RT, self.b)
        PZ = 3.0 * Z * Z - 2.0 * (1.0 - B) * Z + (A - 3.0 * B * B - 2.0 * B)
        PA = Z - B
        PB = Z * Z - (6.0 * B + 2.0) * Z - (A - 2.0 * B - 3.0 * B * B)
        Z_p = -(PA * A_p + PB * B_p) / PZ
        Z_x = -(PA[:, None] * A_x + PB[:, None] * B_x) / PZ[:, None]

        rho = p / (Z * RT)
        rho_p = 1.0 / (Z * RT) - rho * Z_p / Z
        rho_x = -(rho / Z)[:, None] * Z_x

        beta = self.b[None, :] / bm[:, None]
        sigma = 2.0 * S / am[:, None] - beta
        C = A / (2.0 * SQRT2 * B)
        e1, e2 = Z + DELTA1 * B, Z + DELTA2 * B
        L = np.log(e1 / e2)
        lnphi = beta * (Z - 1.0)[:, None] - np.log(Z - B)[:, None] - (C * L)[:, None] * sigma

        L_p = (Z_p + DELTA1 * B_p) / e1 - (Z_p + DELTA2 * B_p) / e2
        lnzb_p = (Z_p - B_p) / (Z - B)
        lnphi_p = (beta * Z_p[:, None] - lnzb_p[:, None] - (C * L_p)[:, None] * sigma)

        # composition derivatives: index [n, i, k] = d lnphi_i / d x_k
        beta_x = -beta[:, :, None] * (self.b / bm[:, None])[:, None, :]
        sigma_x = (2.0 * self.a_ij[None] / am[:, None, None]
                   - 4.0 * S[:, :, None] * S[:, None, :] / am[:, None, None] ** 2
                   - beta_x)
        C_x = (A_x * B[:, None] - A[:, None] * B_x) / (2.0 * SQRT2 * B[:, None] ** 2)
        L_x = (Z_x + DELTA1 * B_x) / e1[:, None] - (Z_x + DELTA2 * B_x) / e2[:, None]
        lnzb_x = (Z_x - B_x) / (Z - B)[:, None]
        lnphi_x = (beta_x * (Z - 1.0)[:, None, None]
                   + beta[:, :, None] * Z_x[:, None, :]
                   - lnzb_x[:, None, :]
                   - (C_x * L[:, None])[:, None, :] * sigma[:, :, None]
                   - (C * L)[:, None, None] * sigma_x
                   - C[:, None, None] * L_x[:, None, :] * sigma[:, :, None])
        return dict(Z=Z, rho=rho, rho_p=rho_p, rho_x=rho_x,
                    lnphi=lnphi, lnphi_p=lnphi_p, lnphi_x=lnphi_x)

    def min_gibbs_ln_phi(self, p, comp):
        """ln phi on the root of lowest Gibbs energy (used by the stability test)."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        comp = np.atleast_2d(np.asarray(comp, dtype=float))
        *_, A, B = self._mix(p, comp)
        roots = pr_cubic_roots(A, B)
        zl = _select_root(roots, "liquid")
        zv = _select_root(roots, "vapor")
        lp_l = self.ln_phi(p, comp, zl)
        same = zl == zv
        if np.all(same):
            return lp_l
        lp_v = self.ln_phi(p, comp, zv)
        g_l = np.einsum("ni,ni->n", comp, lp_l)
        g_v = np.einsum("ni,ni->n", comp, lp_v)
        return np.where((g_v < g_l)[:, None], lp_v, lp_l)


def pr_z_factor(eos: PengRobinson, p, composition, phase_root: str = "liquid"):
    """Compressibility factor; ``phase_root`` picks the smallest ('liquid') or largest ('vapor') root."""
    z = eos.z_factor(p, composition, phase_root)
    return float(z[0]) if np.ndim(p) == 0 and np.ndim(composition) == 1 else z


def fugacity_coefficients(eos: PengRobinson, p, composition, Z):
    """Fugacity coefficients phi_c for the given root."""
    lp = eos.ln_phi(p, composition, Z)
    phi = np.exp(lp)
    return phi[0] if np.ndim(composition) == 1 else phi


# ---------------------------------------------------------------------------
# phase split

def _rr_batch(z, K, tol: float = RR_TOL, max_iter: int = 200):
    """Vectorised Rachford-Rice for the gas fraction; NaN where no root exists."""
    z = np.atleast_2d(z)
    K = np.atleast_2d(K)
    km1 = K - 1.0
    kmax = K.max(axis=1)
    kmin = K.min(axis=1)
    feasible = (kmax > 1.0) & (kmin < 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = np.where(feasible, 1.0 / (1.0 - kmax), 0.0)
        hi = np.where(feasible, 1.0 / (1.0 - kmin), 1.0)

    def g(v):
        return np.sum(z * km1 / (1.0 + v[:, None] * km1), axis=1)

    def dg(v):
        d = 1.0 + v[:, None] * km1
        return -np.sum(z * km1 * km1 / (d * d), axis=1)

    width = hi - lo
    a = lo + 1e-14 * width
    b = hi - 1e-14 * width
    ga, gb = g(a), g(b)
    feasible &= (ga > 0) & (gb < 0)
    v = np.where(feasible, 0.5 * (a + b), np.nan)
    a = np.where(feasible, a, 0.0)
    b = np.where(feasible, b, 1.0)
    v0 = np.where(feasible, v, 0.5)
    done = ~feasible
    for _ in range(max_iter):
        gv = g(v0)
        # keep the bracket: g is decreasing in v
        a = np.where(gv > 0, v0, a)
        b = np.where(gv <= 0, v0, b)
        step = gv / dg(v0)
        vn = v0 - step
        out = (vn <= a) | (vn >= b) | ~np.isfinite(vn)
        vn = np.where(out, 0.5 * (a + b), vn)
        conv = np.abs(vn - v0) <= tol * np.maximum(1.0, np.abs(vn))
        v0 = np.where(done, v0, vn)
        done |= conv
        if done.all():
            break
    return np.where(feasible, v0, np.nan)


def rachford_rice(z, K):
    """Gas mole fraction solving ``sum z (K-1) / (1 + nu (K-1)) = 0``.

    The root is searched in the open window between the asymptotes, so
    negative-flash values outside [0, 1] can be returned.
    """
    z1 = np.atleast_2d(np.asarray(z, dtype=float))
    K1 = np.atleast_2d(np.asarray(K, dtype=float))
    if not (np.all(K1.max(axis=1) > 1.0) and np.all(K1.min(axis=1) < 1.0)):
        raise InfeasibleSplitError("Rachford-Rice needs K values on both sides of one")
    nu = _rr_batch(z1, K1)
    if np.any(np.isnan(nu)):
        raise InfeasibleSplitError("no sign change of the Rachford-Rice function")
    return float(nu[0]) if np.ndim(z) == 1 else nu


def _stability_batch(eos: PengRobinson, p, z):
    """Two-sided tangent-plane test.  Returns (unstable, K_trial, converged)."""
    z = np.clip(z, 1e-20, None)
    z = z / z.sum(axis=1, keepdims=True)
    d = np.log(z) + eos.min_gibbs_ln_phi(p, z)
    kw = eos.wilson_k(p)
    n = len(p)
    unstable = np.zeros(n, dtype=bool)
    converged = np.ones(n, dtype=bool)
    k_out = np.ones_like(z)
    best_tm = np.full(n, np.inf)
    for trial in ("vapor", "liquid"):
        lnW = np.log(z * kw) if trial == "vapor" else np.log(z / kw)
        active = np.ones(n, dtype=bool)
        tm = np.zeros(n)
        trivial = np.zeros(n, dtype=bool)
        for _ in range(STAB_MAX_ITER):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            W = np.exp(lnW[idx])
            w = W / W.sum(axis=1, keepdims=True)
            lp = eos.min_gibbs_ln_phi(p[idx], w)
            lnW_new = d[idx] - lp
            delta = np.max(np.abs(lnW_new - lnW[idx]), axis=1)
            lnW[idx] = lnW_new
            Wn = np.exp(lnW_new)
            wn = Wn / Wn.sum(axis=1, keepdims=True)
            triv = np.max(np.abs(wn - z[idx]), axis=1) < 1e-6
            fin = (delta < 1e-10) | triv
            trivial[idx[triv]] = True
            active[idx[fin]] = False
        if active.any():
            converged[active] = False
            logger.warning("stability test did not converge for %d cells", active.sum())
        W = np.exp(lnW)
        w = W / W.sum(axis=1, keepdims=True)
        lp = eos.min_gibbs_ln_phi(p, w)
        tm = 1.0 + np.sum(W * (lnW + lp - d - 1.0), axis=1)
        hit = (tm < TPD_TOL) & ~trivial & ~active
        ktrial = w / z if trial == "vapor" else z / w
        better = hit & (tm < best_tm)
        k_out[better] = ktrial[better]
        best_tm = np.where(better, tm, best_tm)
        unstable |= hit
    return unstable, k_out, converged


def stability_test(eos: PengRobinson, p, z):
    """Michelsen tangent-plane stability with Wilson initial K values.

    Returns ``(stable, K)`` where ``K`` are the trial K values of the most
    negative stationary point (ones when stable).
    """
    p1 = np.atleast_1d(np.asarray(p, dtype=float))
    z1 = np.atleast_2d(np.asarray(z, dtype=float))
    unstable, K, _ = _stability_batch(eos, p1, z1)
    if np.ndim(z) == 1:
        return bool(not unstable[0]), K[0]
    return ~unstable, K


def _flash_batch(eos: PengRobinson, p, z, K0=None):
    """Successive substitution on K.  Returns dict of arrays plus status flags."""
    n = len(p)
    K = eos.wilson_k(p) if K0 is None else np.array(K0, dtype=float)
    nu = np.full(n, np.nan)
    x = z.copy()
    y = z.copy()
    ok = np.zeros(n, dtype=bool)
    trivial = np.zeros(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    zo = np.full(n, np.nan)
    zg = np.full(n, np.nan)
    for _ in range(FLASH_MAX_ITER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Ki = K[idx]
        v = _rr_batch(z[idx], Ki)
        bad = np.isnan(v)
        if bad.any():
            failed[idx[bad]] = True
            active[idx[bad]] = False
            idx, Ki, v = idx[~bad], Ki[~bad], v[~bad]
            if idx.size == 0:
                break
        xi = z[idx] / (1.0 + v[:, None] * (Ki - 1.0))
        yi = Ki * xi
        po = eos.phase_properties(p[idx], xi, "liquid")
        pg = eos.phase_properties(p[idx], yi, "vapor")
        ratio = xi * np.exp(po["lnphi"]) / (yi * np.exp(pg["lnphi"]))
        err = np.max(np.abs(ratio - 1.0), axis=1)
        conv = err < FLASH_TOL
        x[idx], y[idx], nu[idx] = xi, yi, v
        zo[idx], zg[idx] = po["Z"], pg["Z"]
        K[idx] = Ki * ratio
        triv = np.max(np.abs(np.log(K[idx])), axis=1) < 1e-4
        trivial[idx[triv & ~conv]] = True
        ok[idx[conv]] = True
        active[idx[conv | triv]] = False
    failed |= active
    return dict(nu=nu, x=x, y=y, K=K, Z_o=zo, Z_g=zg, ok=ok, trivial=trivial, failed=failed)


def flash(eos: PengRobinson, p: float, z, stable: bool | None = None, K0=None) -> FlashResult:
    """Isothermal two-phase split at (p, T, z).

    Pass ``stable=True`` to skip the computation.  Raises
    :class:`FlashFailure` when the iteration cap is exceeded.
    """
    z = np.asarray(z, dtype=float)
    if stable is None:
        stable, K0 = stability_test(eos, p, z)
    if stable:
        return FlashResult(True, 1.0, 0.0, z.copy(), z.copy())
    res = _flash_batch(eos, np.array([float(p)]), z[None, :], None if K0 is None else K0[None, :])
    if res["failed"][0] and not res["trivial"][0]:
        raise FlashFailure(f"flash did not converge at p={p}")
    if res["trivial"][0]:
        return FlashResult(True, 1.0, 0.0, z.copy(), z.copy())
    nu = float(res["nu"][0])
    return FlashResult(False, 1.0 - nu, nu, res["x"][0], res["y"][0],
                       float(res["Z_o"][0]), float(res["Z_g"][0]))


# ---------------------------------------------------------------------------
# fluid models used by the simulator

@dataclass
class OilWaterFluid:
    """Single flowing oil component; connate water only occupies pore volume."""
    rho_ref: float = 5000.0
    c_oil: float = 1.45e-9
    p_ref: float = 1.0e7
    mu_oil: float = 1e-3
    mu_gas: float = 2e-5
    s_or: float = 0.0
    s_gr: float = 0.0
    nc: int = field(default=1, init=False)

    def phase_density(self, p, comp, phase: str):
        rho, drho = oilwater_density(p, self.rho_ref, self.c_oil, self.p_ref)
        return rho, drho, np.zeros((np.size(p), 1))

    def substitute(self, state, cells) -> np.ndarray:
        return np.zeros(0, dtype=np.intp)

    def surface_volumes(self, molar_rates, p_std: float, T_std: float):
        rho, _ = oilwater_density(p_std, self.rho_ref, self.c_oil, self.p_ref)
        q = np.asarray(molar_rates, dtype=float).reshape(-1)
        return float(q.sum() / rho), 0.0


@dataclass
class CompositionalFluid:
    """Two-phase hydrocarbon system described by Peng-Robinson."""
    eos: PengRobinson
    mu_oil: float = 1e-3
    mu_gas: float = 2e-5
    s_or: float = 0.0
    s_gr: float = 0.0

    @property
    def nc(self) -> int:
        return self.eos.nc

    @property
    def temperature(self) -> float:
        return self.eos.T

    def phase_density(self, p, comp, phase: str):
        pr = self.eos.phase_properties(p, comp, "liquid" if phase == "oil" else "vapor")
        return pr["rho"], pr["rho_p"], pr["rho_x"]

    def phase_properties(self, p, comp, phase: str):
        return self.eos.phase_properties(p, comp, "liquid" if phase == "oil" else "vapor")

    def substitute(self, state, cells) -> np.ndarray:
        """Variable switching on ``cells``; returns the cells whose status changed."""
        return substitute_batch(self, state, np.asarray(cells, dtype=np.intp))

    def surface_volumes(self, molar_rates, p_std: float, T_std: float):
        q = np.asarray(molar_rates, dtype=float)
        tot = q.sum()
        if tot <= 0:
            return 0.0, 0.0
        z = q / tot
        eos = PengRobinson(self.eos.components, self.eos.bip, T_std)
        unstable, K, _ = _stability_batch(eos, np.array([p_std]), z[None, :])
        if unstable[0]:
            res = _flash_batch(eos, np.array([p_std]), z[None, :], K)
            if res["ok"][0] and 0.0 < res["nu"][0] < 1.0:
                nu = res["nu"][0]
                ro = eos.phase_properties(np.array([p_std]), res["x"], "liquid")["rho"][0]
                rg = eos.phase_properties(np.array([p_std]), res["y"], "vapor")["rho"][0]
                return float(tot * (1 - nu) / ro), float(tot * nu / rg)
        zl = eos.z_factor(np.array([p_std]), z[None, :], "liquid")[0]
        zv = eos.z_factor(np.array([p_std]), z[None, :], "vapor")[0]
        if zl == zv and zl > 0.3:
            return 0.0, float(tot * zv * R_GAS * T_std / p_std)
        return float(tot * zl * R_GAS * T_std / p_std), 0.0


def _normalize(c):
    c = np.clip(c, 0.0, None)
    s = c.sum(axis=-1, keepdims=True)
    return c / np.where(s > 0, s, 1.0)


def substitute_batch(fluid: CompositionalFluid, state, cells: np.ndarray) -> np.ndarray:
    """Phase appearance/disappearance for a subset of cells of a field state."""
    if cells.size == 0:
        return cells
    eos = fluid.eos
    status = state.status[cells]
    changed = []

    # disappearance in two-phase cells
    two = cells[status == TWO]
    if two.size:
        sg = state.sg[two]
        gone_g = two[sg < 0.0]
        gone_o = two[sg > 1.0]
        for lost, new_status in ((gone_g, OIL), (gone_o, GAS)):
            if lost.size == 0:
                continue
            p = state.p[lost]
            x, y = _normalize(state.x[lost]), _normalize(state.y[lost])
            ro = fluid.phase_density(p, x, "oil")[0]
            rg = fluid.phase_density(p, y, "gas")[0]
            so = 1.0 - state.sg[lost]
            mo, mg = ro * so, rg * state.sg[lost]
            zc = _normalize((mo[:, None] * x + mg[:, None] * y) / (mo + mg)[:, None])
            state.x[lost] = zc
            state.y[lost] = zc
            state.sg[lost] = 0.0 if new_status == OIL else 1.0
            state.status[lost] = new_status
            changed.append(lost)
        keep = two[(state.status[two] == TWO)]
        state.x[keep] = _normalize(state.x[keep])
        state.y[keep] = _normalize(state.y[keep])

    # appearance in cells that were single phase before this update
    single = cells[status != TWO]
    if single.size:
        z = _normalize(np.where((status[status != TWO] == OIL)[:, None],
                                state.x[single], state.y[single]))
        state.x[single] = z
        state.y[single] = z
        p = state.p[single]
        unstable, K, _ = _stability_batch(eos, p, z)
        cand = np.flatnonzero(unstable)
        if cand.size:
            res = _flash_batch(eos, p[cand], z[cand], K[cand])
            nu = res["nu"]
            good = res["ok"] & (nu > 0.0) & (nu < 1.0)
            if np.any(res["failed"] & ~res["trivial"]):
                logger.warning("flash failed in %d cells; keeping single phase",
                               int(np.sum(res["failed"] & ~res["trivial"])))
            sel = cand[good]
            if sel.size:
                tgt = single[sel]
                x, y = res["x"][good], res["y"][good]
                ro = fluid.phase_density(p[sel], x, "oil")[0]
                rg = fluid.phase_density(p[sel], y, "gas")[0]
                state.x[tgt] = x
                state.y[tgt] = y
                state.sg[tgt] = saturation_from_mole_fraction(nu[good], ro, rg)
                state.status[tgt] = TWO
                changed.append(tgt)
    if changed:
        return np.sort(np.concatenate(changed))
    return np.zeros(0, dtype=np.intp)


def variable_substitution(state: CellState, p: float, T: float, fluid: CompositionalFluid) -> CellState:
    """Single-cell variable switching (see :func:`substitute_batch`)."""
    from .state import FieldState

    if abs(fluid.eos.T - T) > 0:
        fluid = replace(fluid, eos=PengRobinson(fluid.eos.components, fluid.eos.bip, T))
    fs = FieldState(
        p=np.array([p], dtype=float),
        sg=np.array([state.s_g], dtype=float),
        x=np.array([state.x], dtype=float),
        y=np.array([state.y], dtype=float),
        status=np.array([int(state.status)], dtype=np.int8),
    )
    try:
        substitute_batch(fluid, fs, np.array([0]))
    except (FlashFailure, NumericalError):
        logger.warning("variable substitution failed; keeping previous status")
        return state
    return CellState(p=float(fs.p[0]), s_o=float(1.0 - fs.sg[0]), s_g=float(fs.sg[0]),
                     x=fs.x[0].copy(), y=fs.y[0].copy(), status=PhaseStatus(int(fs.status[0])))
