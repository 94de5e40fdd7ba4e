"""Arterial wall constitutive model.

Passive anisotropic hyperelasticity (isotropic matrix + two fiber families),
the four-state cross-bridge kinetics of smooth muscle with stretch-dependent
calcium and phosphatase activity, calcium-channel-blocker modulation, and the
active stress response driven by an evolving active stretch.

All evaluation routines are vectorized: tensors carry arbitrary leading batch
dimensions, quantities per fiber family carry a trailing fiber axis.
Stresses are second Piola-Kirchhoff (kPa), stretches dimensionless, calcium
concentrations in uM, rates in 1/s.
"""

from __future__ import annotations

from dataclasses import dataclass, replace, fields

import numpy as np

from .errors import LocalSolveError, MaterialError

# Guard width for the active stretch rate denominator, kPa.
ACTIVE_RATE_DENOMINATOR_EPS = 1e-6

# Tolerances of the quadrature point backward-Euler solve.
LOCAL_NEWTON_TOL = 1e-10
LOCAL_NEWTON_MAXIT = 50


@dataclass(frozen=True)
class PassiveParams:
    """Stiffnesses (kPa) and exponents of the passive energy."""

    alpha1: float = 11.52507
    alpha2: float = 151.73775
    alpha3: float = 2.75662
    alpha4: float = 1.27631
    alpha5: float = 3.08798

    def validate(self):
        if min(self.alpha1, self.alpha2, self.alpha4) < 0:
            raise MaterialError("passive stiffnesses must be nonnegative")
        if self.alpha5 <= 1:
            raise MaterialError("alpha5 must exceed 1 for a differentiable "
                                "fiber energy at the activation threshold")


@dataclass(frozen=True)
class KineticParams:
    """Cross-bridge cycling, calcium and phosphatase kinetics.

    Rate constants of attachment/detachment (k3, k4, k7) are fixed; the
    phosphorylation rate follows the calcium level, the dephosphorylation
    rate k25 is itself a state variable.  Fields without a published value
    (tau_c, tau_p, tau_k, k25_min) default to the values listed in the
    output provenance header.
    """

    k3: float = 0.134            # 1/s
    k4: float = 0.00166          # 1/s
    k7: float = 0.000066         # 1/s
    ca50: float = 0.4            # uM
    eta: float = 0.1624          # 1/s
    gamma1_max: float = 0.5131   # uM
    gamma2: float = 50.0         # 1/uM
    gamma3_max: float = 0.9      # uM
    lam50_c: float = 1.2
    gamma4: float = 200.0
    zeta1: float = 100.0         # s
    gamma5: float = 50.0         # s
    zeta2: float = 1000.0
    dlam_p_min: float = -0.00001
    gamma6: float = 1.5          # 1/s
    lam50_p: float = 1.0
    lam_c_rate_min: float = -0.0443    # 1/s
    lam_c_rate_max: float = 0.0443     # 1/s
    k25_rate_min: float = -0.0010694   # 1/s^2
    k25_rate_max: float = 0.0009735    # 1/s^2
    lam_p_rate_min: float = -0.0002323  # 1/s
    lam_p_rate_max: float = 0.0000699   # 1/s
    k25_min: float = 0.2         # 1/s
    tau_c: float = 0.0           # uM
    tau_p: float = 0.0
    tau_k: float = 0.0           # 1/s
    lam_c_start: float = 1.0
    lam_a_start: float = 1.0
    lam_p_start: float = 1.0
    lam_e_start: float = 1.0
    k25_start: float = 1.82758   # 1/s

    def validate(self):
        if self.ca50 <= 0 or self.lam50_c <= 0 or self.lam50_p <= 0:
            raise MaterialError("half-activation constants must be positive")
        for lo, hi, name in (
            (self.lam_c_rate_min, self.lam_c_rate_max, "lam_c rate"),
            (self.k25_rate_min, self.k25_rate_max, "k25 rate"),
            (self.lam_p_rate_min, self.lam_p_rate_max, "lam_p rate"),
        ):
            if lo > hi:
                raise MaterialError(f"{name} bounds are inverted")


@dataclass(frozen=True)
class ActiveParams:
    """Active stress stiffness, driving stress and strain rate scales."""

    mu_a: float = 11.857     # kPa
    kappa: float = 148.262   # kPa
    beta1: float = 0.001006  # 1/s
    beta2: float = 0.0       # kPa

    def validate(self):
        if self.mu_a <= 0 or self.kappa <= 0 or self.beta1 <= 0:
            raise MaterialError("active parameters must be positive")


@dataclass(frozen=True)
class DrugParams:
    """Calcium channel blocker inhibition and transport constants."""

    p1: float = 0.8
    p3: float = 0.8
    c_ccb50: float = 0.5       # normalized concentration
    diffusion: float = 6e-5    # mm^2/s
    reaction_rate: float = 0.0  # 1/s

    def validate(self):
        if not (0 <= self.p1 <= 1 and 0 <= self.p3 <= 1):
            raise MaterialError("inhibition fractions p1, p3 must lie in [0, 1]")
        if self.c_ccb50 <= 0:
            raise MaterialError("c_ccb50 must be positive")
        if self.diffusion < 0 or self.reaction_rate < 0:
            raise MaterialError("transport constants must be nonnegative")


#: Parameter values that substitute for numbers absent from the published
#: tables.  Echoed into every output provenance header.
SUBSTITUTED_DEFAULTS = {
    "beta2": ActiveParams.beta2,
    "tau_c": KineticParams.tau_c,
    "tau_p": KineticParams.tau_p,
    "tau_k": KineticParams.tau_k,
    "k25_min": KineticParams.k25_min,
    "p1": DrugParams.p1,
    "p3": DrugParams.p3,
    "c_ccb50": DrugParams.c_ccb50,
}

STATE_FIELDS = ("n_a", "n_b", "n_c", "n_d", "lam_c", "k25", "lam_p", "lam_a")


@dataclass
class GaussPointState:
    """Internal variables at quadrature points, one entry per fiber family.

    All arrays share one shape (..., nfib).  The cross-bridge fractions
    n_a..n_d sum to one; lam_a is the active part of the fiber stretch.
    """

    n_a: np.ndarray
    n_b: np.ndarray
    n_c: np.ndarray
    n_d: np.ndarray
    lam_c: np.ndarray
    k25: np.ndarray
    lam_p: np.ndarray
    lam_a: np.ndarray

    @classmethod
    def initial(cls, shape, kin: KineticParams) -> "GaussPointState":
        """Relaxed state: all cross-bridges free and dephosphorylated."""
        full = lambda v: np.full(shape, v, dtype=float)
        return cls(
            n_a=full(1.0), n_b=full(0.0), n_c=full(0.0), n_d=full(0.0),
            lam_c=full(kin.lam_c_start), k25=full(kin.k25_start),
            lam_p=full(kin.lam_p_start), lam_a=full(kin.lam_a_start),
        )

    @property
    def shape(self):
        return self.n_a.shape

    def copy(self) -> "GaussPointState":
        return GaussPointState(**{f.name: getattr(self, f.name).copy()
                                  for f in fields(self)})

    def stack(self) -> np.ndarray:
        """State vector layout (..., nfib, 8) used by the local solver."""
        return np.stack([getattr(self, n) for n in STATE_FIELDS], axis=-1)

    @classmethod
    def from_stack(cls, s: np.ndarray) -> "GaussPointState":
        return cls(**{n: np.ascontiguousarray(s[..., i])
                      for i, n in enumerate(STATE_FIELDS)})

    def validate(self, tol=1e-12):
        total = self.n_a + self.n_b + self.n_c + self.n_d
        if np.any(np.abs(total - 1.0) > tol):
            raise MaterialError("cross-bridge fractions do not sum to one")
        for name in ("n_a", "n_b", "n_c", "n_d"):
            if np.any(getattr(self, name) < -1e-9):
                raise MaterialError(f"negative cross-bridge fraction {name}")
        if np.any(self.lam_a <= 0):
            raise MaterialError("active stretch must stay positive")


def _hill2(x, x50):
    """Quadratic Hill factor x^2 / (x^2 + x50^2)."""
    x = np.asarray(x, dtype=float)
    return x * x / (x * x + x50 * x50)


def _logistic(x):
    """1 / (1 + exp(x)), overflow safe."""
    return 0.5 * (1.0 - np.tanh(0.5 * np.asarray(x, dtype=float)))


def drug_scaled_gammas(c_ccb, kin: KineticParams, drug: DrugParams):
    """Calcium gain gamma1 and target gain gamma3 reduced by the blocker."""
    inhib = _hill2(c_ccb, drug.c_ccb50)
    gamma1 = kin.gamma1_max * (1.0 - drug.p1 * inhib)
    gamma3 = kin.gamma3_max * (1.0 - drug.p3 * inhib)
    return gamma1, gamma3


def chemical_rates(lam, lam_c, c_ccb, kin: KineticParams, drug: DrugParams):
    """Pointwise chemical driving quantities.

    Returns (ca_i, ca_tar, k16, k25_tar, gamma1, gamma3) for stretch lam,
    calcium threshold stretch lam_c and blocker concentration c_ccb.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise MaterialError("stretch must be positive")
    if np.any(np.asarray(c_ccb) < 0):
        raise MaterialError("drug concentration must be nonnegative")
    gamma1, gamma3 = drug_scaled_gammas(c_ccb, kin, drug)
    ca_i = gamma1 * np.maximum(lam - lam_c, 0.0) ** 2
    ca_tar = gamma3 * _hill2(lam, kin.lam50_c)
    k16 = kin.eta * _hill2(ca_i, kin.ca50)
    k25_tar = kin.gamma6 * (1.0 - lam / (lam + kin.lam50_p))
    return ca_i, ca_tar, k16, k25_tar, gamma1, gamma3


# ---------------------------------------------------------------------------
# Invariants and passive response
# ---------------------------------------------------------------------------

def compute_invariants(C, a):
    """Principal and mixed invariants of the right Cauchy-Green tensor.

    C has shape (..., 3, 3) and must be symmetric positive definite, a is a
    unit fiber direction (..., 3).  Returns (I1, I2, I3, I4, I5, K3) with
    K3 = I1 I4 - I5.
    """
    C = np.asarray(C, dtype=float)
    a = np.asarray(a, dtype=float)
    i1 = np.trace(C, axis1=-2, axis2=-1)
    c2 = C @ C
    i2 = 0.5 * (i1 * i1 - np.trace(c2, axis1=-2, axis2=-1))
    i3 = np.linalg.det(C)
    if np.any(i3 <= 0):
        raise MaterialError("C is not positive definite (det <= 0)")
    i4 = np.einsum("...i,...ij,...j->...", a, C, a)
    i5 = np.einsum("...i,...ij,...j->...", a, c2, a)
    return i1, i2, i3, i4, i5, i1 * i4 - i5


def _sym_inv_outer(ic):
    """d(C^-1)/dC, the negative symmetrized Kronecker square of C^-1."""
    t1 = np.einsum("...ik,...jl->...ijkl", ic, ic)
    t2 = np.einsum("...il,...jk->...ijkl", ic, ic)
    return -0.5 * (t1 + t2)


def passive_energy_stress(C, fibers, params: PassiveParams, tangent="analytic"):
    """Passive energy, second Piola-Kirchhoff stress and material tangent.

    fibers has shape (..., nfib, 3).  The tangent dS/dC is returned with
    shape (..., 3, 3, 3, 3); pass tangent=None to skip it, tangent="fd"
    for a one-sided finite-difference fallback.
    """
    C = np.asarray(C, dtype=float)
    fibers = np.asarray(fibers, dtype=float)
    i1 = np.trace(C, axis1=-2, axis2=-1)
    i3 = np.linalg.det(C)
    if np.any(i3 <= 0):
        raise MaterialError("C is not positive definite (det <= 0)")
    ic = np.linalg.inv(C)
    eye = np.broadcast_to(np.eye(3), C.shape)

    p = i3 ** (-1.0 / 3.0)
    b = i3 ** params.alpha3
    bm = i3 ** (-params.alpha3)

    psi = params.alpha1 * (i1 * p - 3.0) + params.alpha2 * (b + bm - 2.0)
    S = (2.0 * params.alpha1 * p)[..., None, None] * eye \
        - (2.0 * params.alpha1 / 3.0 * i1 * p
           - 2.0 * params.alpha2 * params.alpha3 * (b - bm))[..., None, None] * ic

    if tangent == "analytic":
        c1 = -(2.0 * params.alpha1 / 3.0) * p
        c3 = (2.0 * params.alpha1 / 9.0) * i1 * p \
            + 2.0 * params.alpha2 * params.alpha3 ** 2 * (b + bm)
        s_ic = -(2.0 * params.alpha1 / 3.0) * i1 * p \
            + 2.0 * params.alpha2 * params.alpha3 * (b - bm)
        D = c1[..., None, None, None, None] * (
            np.einsum("...ij,...kl->...ijkl", eye, ic)
            + np.einsum("...ij,...kl->...ijkl", ic, eye))
        D += c3[..., None, None, None, None] * np.einsum(
            "...ij,...kl->...ijkl", ic, ic)
        D += s_ic[..., None, None, None, None] * _sym_inv_outer(ic)
    else:
        D = None

    nfib = fibers.shape[-2]
    for f in range(nfib):
        a = fibers[..., f, :]
        M = np.einsum("...i,...j->...ij", a, a)
        i4 = np.einsum("...ij,...ij->...", C, M)
        CM = C @ M
        i5 = np.trace(CM @ C, axis1=-2, axis2=-1)
        k3 = i1 * i4 - i5
        bracket = np.maximum(k3 - 2.0, 0.0)
        psi = psi + params.alpha4 * bracket ** params.alpha5
        g = 2.0 * params.alpha4 * params.alpha5 * bracket ** (params.alpha5 - 1.0)
        Z = i4[..., None, None] * eye + i1[..., None, None] * M - CM - np.swapaxes(CM, -1, -2)
        S = S + g[..., None, None] * Z
        if tangent == "analytic":
            gp = 2.0 * params.alpha4 * params.alpha5 * (params.alpha5 - 1.0) \
                * bracket ** (params.alpha5 - 2.0)
            D += gp[..., None, None, None, None] * np.einsum(
                "...ij,...kl->...ijkl", Z, Z)
            demi = np.einsum("...ij,...kl->...ijkl", eye, M) \
                + np.einsum("...ij,...kl->...ijkl", M, eye)
            W = 0.5 * (np.einsum("...ik,...jl->...ijkl", eye, M)
                       + np.einsum("...il,...jk->...ijkl", eye, M)
                       + np.einsum("...ik,...jl->...ijkl", M, eye)
                       + np.einsum("...il,...jk->...ijkl", M, eye))
            D += g[..., None, None, None, None] * (demi - W)

    if tangent == "fd":
        D = _passive_tangent_fd(C, fibers, params)
    return psi, S, D


def _passive_tangent_fd(C, fibers, params, step=1e-7):
    """One-sided FD of the stress wrt the symmetric tensor C."""
    base = passive_energy_stress(C, fibers, params, tangent=None)[1]
    D = np.zeros(C.shape + (3, 3))
    for k in range(3):
        for l in range(k, 3):
            Cp = np.array(C, dtype=float)
            Cp[..., k, l] += step
            if l != k:
                Cp[..., l, k] += step
            Sp = passive_energy_stress(Cp, fibers, params, tangent=None)[1]
            dS = (Sp - base) / step
            # symmetric perturbation carries a factor 2 off the diagonal
            if l != k:
                dS = 0.5 * dS
            D[..., k, l] = dS
            D[..., l, k] = dS
    return np.einsum("...klij->...ijkl", D)


# ---------------------------------------------------------------------------
# Internal variable evolution (backward Euler at frozen stretch and drug)
# ---------------------------------------------------------------------------

def _rate_matrix(k16, k25, kin: KineticParams):
    """Hai-Murphy rate matrix, shape (..., 4, 4); column sums vanish."""
    sh = np.broadcast(k16, k25).shape
    R = np.zeros(sh + (4, 4))
    k16 = np.broadcast_to(k16, sh)
    k25 = np.broadcast_to(k25, sh)
    R[..., 0, 0] = -k16
    R[..., 0, 1] = k25
    R[..., 0, 3] = kin.k7
    R[..., 1, 0] = k16
    R[..., 1, 1] = -(k25 + kin.k3)
    R[..., 1, 2] = kin.k4
    R[..., 2, 1] = kin.k3
    R[..., 2, 2] = -(kin.k4 + k25)
    R[..., 2, 3] = k16
    R[..., 3, 2] = k25
    R[..., 3, 3] = -(k16 + kin.k7)
    return R


def _guard_den(x):
    """Regularized denominator of the active stretch rate."""
    s = np.where(x >= 0, 1.0, -1.0)
    return s * np.maximum(np.abs(x), ACTIVE_RATE_DENOMINATOR_EPS)


def _active_stretch_rate(n_c, n_d, lam_a, lam, act: ActiveParams):
    lam_e = lam / lam_a
    p_a = act.mu_a * (n_c + n_d) * (lam_e - 1.0)
    p_c = act.kappa * n_c
    return act.beta1 * (p_a - p_c) / _guard_den(p_a - act.beta2), p_a, p_c


def _scalar_newton(g, dg, x0, lo, hi, tol=LOCAL_NEWTON_TOL,
                   maxit=LOCAL_NEWTON_MAXIT):
    """Vectorized bracketed Newton with guaranteed bisection progress.

    Follows the classic safeguarded scheme: the bisection step is taken
    whenever Newton would leave the bracket or fails to shrink the enclosing
    interval fast enough (this defeats slow creep down exponential barrier
    terms).  Requires g(lo) and g(hi) of opposite sign.  Returns
    (x, converged mask).
    """
    lo = np.array(np.broadcast_to(lo, x0.shape), dtype=float)
    hi = np.array(np.broadcast_to(hi, x0.shape), dtype=float)
    gl = g(lo)
    # orient the bracket so g(xl) <= 0 <= g(xh)
    flip = gl > 0
    xl = np.where(flip, hi, lo)
    xh = np.where(flip, lo, hi)
    x = np.clip(np.array(x0, dtype=float), np.minimum(lo, hi),
                np.maximum(lo, hi))
    dxold = np.abs(hi - lo)
    for _ in range(maxit):
        gx = g(x)
        done = np.abs(gx) <= tol
        if done.all():
            return x, done
        xl = np.where(~done & (gx < 0), x, xl)
        xh = np.where(~done & (gx >= 0), x, xh)
        d = dg(x)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            step = gx / d
            xn = x - step
            outside = ((x - xh) * d - gx) * ((x - xl) * d - gx) > 0
            slow = np.abs(2.0 * gx) > np.abs(dxold * d)
        bad = outside | slow | ~np.isfinite(xn)
        dxold = np.where(bad, 0.5 * np.abs(xh - xl), np.abs(step))
        xn = np.where(bad, 0.5 * (xl + xh), xn)
        x = np.where(done, x, xn)
    gx = g(x)
    return x, np.abs(gx) <= tol


def update_internal_state(state: GaussPointState, lam, c_ccb, dt,
                          kin: KineticParams, act: ActiveParams,
                          drug: DrugParams, return_sensitivities=False):
    """One backward-Euler step of the coupled internal-variable system.

    lam carries the per-fiber stretch with the same shape as the state
    arrays; c_ccb broadcasts against it.  The implicit system is solved
    exactly via its triangular structure: the calcium threshold stretch
    decouples, then the phosphatase pair (k25, lam_p), then the linear
    cross-bridge fractions, finally the active stretch.

    With return_sensitivities=True additionally returns (ds_dlam, ds_dc),
    each of shape state.shape + (8,), the exact derivatives of the updated
    state with respect to the frozen stretch and drug concentration.
    """
    if dt <= 0:
        raise MaterialError("dt must be positive")
    lam = np.broadcast_to(np.asarray(lam, dtype=float), state.shape)
    c = np.broadcast_to(np.asarray(c_ccb, dtype=float), state.shape)
    c = np.maximum(c, 0.0)
    gamma1, gamma3 = drug_scaled_gammas(c, kin, drug)

    # --- calcium threshold stretch: scalar implicit equation -------------
    lmin, lmax = kin.lam_c_rate_min, kin.lam_c_rate_max
    dl = lmax - lmin
    ca_tar = gamma3 * _hill2(lam, kin.lam50_c)

    def f_lam_c(x):
        ca = gamma1 * np.maximum(lam - x, 0.0) ** 2
        return lmin + dl * _logistic(kin.gamma2 * (ca_tar - ca - kin.tau_c))

    def g_lam_c(x):
        return x - state.lam_c - dt * f_lam_c(x)

    def dg_lam_c(x):
        ca = gamma1 * np.maximum(lam - x, 0.0) ** 2
        L = _logistic(kin.gamma2 * (ca_tar - ca - kin.tau_c))
        dca = -2.0 * gamma1 * np.maximum(lam - x, 0.0)
        return 1.0 - dt * dl * kin.gamma2 * L * (1.0 - L) * dca

    pad = 10 * LOCAL_NEWTON_TOL
    lam_c, ok = _scalar_newton(g_lam_c, dg_lam_c, state.lam_c,
                               state.lam_c + dt * lmin - pad,
                               state.lam_c + dt * lmax + pad)
    _require(ok, "lam_c")

    # --- phosphatase activity pair (k25, lam_p): damped 2x2 Newton -------
    k25, lam_p = _solve_k25_lam_p(state, lam, dt, kin)

    # --- cross-bridge fractions: linear implicit step ---------------------
    ca_i = gamma1 * np.maximum(lam - lam_c, 0.0) ** 2
    k16 = kin.eta * _hill2(ca_i, kin.ca50)
    R = _rate_matrix(k16, k25, kin)
    A = np.broadcast_to(np.eye(4), R.shape) - dt * R
    n_old = np.stack([state.n_a, state.n_b, state.n_c, state.n_d], axis=-1)
    n_new = np.linalg.solve(A, n_old[..., None])[..., 0]
    if np.any(n_new < -1e-9):
        raise MaterialError("cross-bridge fraction drifted below -1e-9")
    drift = np.abs(n_new.sum(axis=-1) - 1.0)
    if np.any(drift > 1e-12):
        raise MaterialError("cross-bridge conservation drift exceeds 1e-12")

    # --- active stretch: stiff scalar implicit equation -------------------
    n_cd = n_new[..., 2] + n_new[..., 3]
    p_c = act.kappa * n_new[..., 2]

    def g_lam_a(y):
        rate, _, _ = _active_stretch_rate(n_new[..., 2], n_new[..., 3], y, lam, act)
        return y - state.lam_a - dt * rate

    def dg_lam_a(y):
        lam_e = lam / y
        p_a = act.mu_a * n_cd * (lam_e - 1.0)
        den = _guard_den(p_a - act.beta2)
        gd = (np.abs(p_a - act.beta2) > ACTIVE_RATE_DENOMINATOR_EPS).astype(float)
        dpa = -act.mu_a * n_cd * lam / (y * y)
        dfd = act.beta1 * (den - (p_a - p_c) * gd) / (den * den) * dpa
        return 1.0 - dt * dfd

    # the rate is bounded but can be large inside the guard zone; expand a
    # bracket around the previous value until the residual changes sign
    lo = 0.5 * state.lam_a
    for _ in range(60):
        bad = (g_lam_a(lo) > 0) & (lo > 1e-9)
        if not bad.any():
            break
        lo = np.where(bad, np.maximum(0.25 * lo, 1e-9), lo)
    hi = 1.5 * state.lam_a + 0.1
    for _ in range(60):
        bad = g_lam_a(hi) < 0
        if not bad.any():
            break
        hi = np.where(bad, 2.0 * hi + 0.1, hi)
    lam_a, ok = _scalar_newton(g_lam_a, dg_lam_a, state.lam_a, lo, hi)
    _require(ok, "lam_a")
    if np.any(lam_a <= 0):
        raise MaterialError("active stretch left the positive range")

    new = GaussPointState(
        n_a=n_new[..., 0], n_b=n_new[..., 1], n_c=n_new[..., 2],
        n_d=n_new[..., 3], lam_c=lam_c, k25=k25, lam_p=lam_p, lam_a=lam_a)
    if not return_sensitivities:
        return new
    sens = _state_sensitivities(new, lam, c, dt, kin, act, gamma1, gamma3, drug)
    return new, sens


def _require(ok, label):
    if not ok.all():
        idx = int(np.argmin(ok.ravel()))
        raise LocalSolveError(idx, f"local backward-Euler solve for {label} "
                                    f"did not reach {LOCAL_NEWTON_TOL:g}")


def _solve_k25_lam_p(state, lam, dt, kin: KineticParams):
    """Implicit phosphatase pair via nested bracketed scalar solves.

    The relaxation-stretch equation is strictly monotone in lam_p for any
    frozen k25 (the penalty exponential enters with a positive slope), so
    the inner solve is bracketed provably; the outer k25 equation uses the
    bounded-rate bracket [k25 + dt*min_rate, k25 + dt*(max-min)].
    """
    kmin_d, kmax_d = kin.k25_rate_min, kin.k25_rate_max
    lpmin, lpmax = kin.lam_p_rate_min, kin.lam_p_rate_max
    dk = kmax_d - kmin_d
    dp = lpmax - lpmin
    k25_tar = kin.gamma6 * (1.0 - lam / (lam + kin.lam50_p))
    pad = 10 * LOCAL_NEWTON_TOL

    def barrier(y):
        return np.exp(-kin.zeta2 * (lam - y - kin.dlam_p_min))

    def solve_lam_p(k25):
        lvl = lpmin + dp * _logistic(kin.gamma5 * (k25_tar - k25 - kin.tau_k))

        def g(y):
            return y - state.lam_p - dt * (lvl - lpmax * barrier(y))

        def dg(y):
            return 1.0 + dt * lpmax * kin.zeta2 * barrier(y)

        lo = np.minimum(state.lam_p + dt * (lpmin - lpmax),
                        lam - kin.dlam_p_min) - pad
        hi = np.maximum(state.lam_p + dt * lpmax, lam - kin.dlam_p_min) + pad
        for _ in range(80):                 # expand above the barrier
            bad = g(hi) <= 0
            if not bad.any():
                break
            hi = np.where(bad, hi + np.maximum(hi - lo, 0.05), hi)
        y, ok = _scalar_newton(g, dg, np.clip(state.lam_p, lo, hi), lo, hi)
        _require(ok, "lam_p")
        return y

    def f_k(x, y):
        return kmin_d * (1.0 - np.exp(-kin.zeta1 * (x - kin.k25_min))) \
            + dk * _logistic(kin.gamma4 * (lam - y - kin.tau_p))

    def g_k(x):
        return x - state.k25 - dt * f_k(x, solve_lam_p(x))

    def dg_k(x):
        # frozen-lam_p slope; the safeguarded bracket covers the rest
        return 1.0 - dt * kmin_d * kin.zeta1 * np.exp(
            -kin.zeta1 * (x - kin.k25_min))

    lo = state.k25 + dt * kmin_d - pad
    hi = np.maximum(state.k25, kin.k25_min) + dt * dk + pad
    k25, ok = _scalar_newton(g_k, dg_k, state.k25, lo, hi)
    _require(ok, "k25")
    return k25, solve_lam_p(k25)


def _state_sensitivities(new: GaussPointState, lam, c, dt,
                         kin: KineticParams, act: ActiveParams,
                         gamma1, gamma3, drug: DrugParams):
    """Implicit differentiation of the converged backward-Euler system.

    Solves (I - dt df/ds) ds/dtheta = dt df/dtheta for theta in
    {stretch, drug concentration} at the updated state.
    """
    sh = new.shape
    n = np.stack([new.n_a, new.n_b, new.n_c, new.n_d], axis=-1)
    lam_c, k25, lam_p, lam_a = new.lam_c, new.k25, new.lam_p, new.lam_a

    rel = np.maximum(lam - lam_c, 0.0)
    ca = gamma1 * rel ** 2
    ca_tar = gamma3 * _hill2(lam, kin.lam50_c)
    k16 = kin.eta * _hill2(ca, kin.ca50)
    dk16_dca = kin.eta * 2.0 * ca * kin.ca50 ** 2 / (ca * ca + kin.ca50 ** 2) ** 2
    dca_dlamc = -2.0 * gamma1 * rel
    dca_dlam = 2.0 * gamma1 * rel
    hill_c = _hill2(c, drug.c_ccb50)
    dhill_c = 2.0 * c * drug.c_ccb50 ** 2 / (c * c + drug.c_ccb50 ** 2) ** 2
    dg1_dc = -kin.gamma1_max * drug.p1 * dhill_c
    dg3_dc = -kin.gamma3_max * drug.p3 * dhill_c
    dca_dc = rel ** 2 * dg1_dc
    dcatar_dc = _hill2(lam, kin.lam50_c) * dg3_dc
    dcatar_dlam = gamma3 * 2.0 * lam * kin.lam50_c ** 2 / (lam * lam + kin.lam50_c ** 2) ** 2
    k25tar = kin.gamma6 * (1.0 - lam / (lam + kin.lam50_p))
    dk25tar_dlam = -kin.gamma6 * kin.lam50_p / (lam + kin.lam50_p) ** 2

    J = np.zeros(sh + (8, 8))
    dfl = np.zeros(sh + (8,))
    dfc = np.zeros(sh + (8,))

    # cross-bridge block
    J[..., :4, :4] = _rate_matrix(k16, k25, kin)
    sgn = np.stack([-n[..., 0], n[..., 0], n[..., 3], -n[..., 3]], axis=-1)
    J[..., :4, 4] = sgn * (dk16_dca * dca_dlamc)[..., None]
    J[..., :4, 5] = np.stack([n[..., 1], -n[..., 1], -n[..., 2], n[..., 2]], axis=-1)
    dfl[..., :4] = sgn * (dk16_dca * dca_dlam)[..., None]
    dfc[..., :4] = sgn * (dk16_dca * dca_dc)[..., None]

    # calcium threshold stretch
    dl = kin.lam_c_rate_max - kin.lam_c_rate_min
    Lc = _logistic(kin.gamma2 * (ca_tar - ca - kin.tau_c))
    dfdca = dl * kin.gamma2 * Lc * (1.0 - Lc)       # wrt ca_i
    J[..., 4, 4] = dfdca * dca_dlamc
    dfl[..., 4] = dfdca * dca_dlam - dfdca * dcatar_dlam
    dfc[..., 4] = dfdca * dca_dc - dfdca * dcatar_dc

    # phosphatase pair
    dk = kin.k25_rate_max - kin.k25_rate_min
    dp = kin.lam_p_rate_max - kin.lam_p_rate_min
    Lk = _logistic(kin.gamma4 * (lam - lam_p - kin.tau_p))
    Lp = _logistic(kin.gamma5 * (k25tar - k25 - kin.tau_k))
    E = np.exp(-kin.zeta2 * (lam - lam_p - kin.dlam_p_min))
    J[..., 5, 5] = kin.k25_rate_min * kin.zeta1 * np.exp(-kin.zeta1 * (k25 - kin.k25_min))
    J[..., 5, 6] = dk * kin.gamma4 * Lk * (1.0 - Lk)
    dfl[..., 5] = -dk * kin.gamma4 * Lk * (1.0 - Lk)
    J[..., 6, 5] = dp * kin.gamma5 * Lp * (1.0 - Lp)
    J[..., 6, 6] = -kin.lam_p_rate_max * kin.zeta2 * E
    dfl[..., 6] = -dp * Lp * (1.0 - Lp) * kin.gamma5 * dk25tar_dlam \
        + kin.lam_p_rate_max * kin.zeta2 * E

    # active stretch
    lam_e = lam / lam_a
    n_cd = n[..., 2] + n[..., 3]
    p_a = act.mu_a * n_cd * (lam_e - 1.0)
    p_c = act.kappa * n[..., 2]
    den = _guard_den(p_a - act.beta2)
    gd = (np.abs(p_a - act.beta2) > ACTIVE_RATE_DENOMINATOR_EPS).astype(float)
    df_dpa = act.beta1 * (den - (p_a - p_c) * gd) / (den * den)
    df_dpc = -act.beta1 / den
    pa_n = act.mu_a * (lam_e - 1.0)
    J[..., 7, 2] = df_dpa * pa_n + df_dpc * act.kappa
    J[..., 7, 3] = df_dpa * pa_n
    J[..., 7, 7] = df_dpa * (-act.mu_a * n_cd * lam / lam_a ** 2)
    dfl[..., 7] = df_dpa * (act.mu_a * n_cd / lam_a)

    A = np.broadcast_to(np.eye(8), sh + (8, 8)) - dt * J
    rhs = dt * np.stack([dfl, dfc], axis=-1)
    sens = np.linalg.solve(A, rhs)
    return sens[..., 0], sens[..., 1]


# ---------------------------------------------------------------------------
# Active response
# ---------------------------------------------------------------------------

def active_energy_stress(state: GaussPointState, lam, fibers,
                         act: ActiveParams):
    """Active energy, stress and fiber stress measures at frozen internals.

    lam holds the per-fiber stretches (..., nfib), fibers the directions
    (..., nfib, 3).  Returns (psi_a, S_a, P_a, P_c) where S_a sums over the
    fiber families and P_a, P_c keep the fiber axis.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(state.lam_a <= 0):
        raise MaterialError("active stretch must be positive")
    lam_e = lam / state.lam_a
    n_cd = state.n_c + state.n_d
    p_a = act.mu_a * n_cd * (lam_e - 1.0)
    p_c = act.kappa * state.n_c
    psi = 0.5 * act.mu_a * n_cd * (lam_e - 1.0) ** 2
    # S = 2 dPsi/dC per fiber = (P_a / (lam_a lam)) a x a
    coef = p_a / (state.lam_a * lam)
    M = np.einsum("...fi,...fj->...fij", fibers, fibers)
    S_a = np.einsum("...f,...fij->...ij", coef, M)
    return psi.sum(axis=-1), S_a, p_a, p_c


def active_stress_scalars(state: GaussPointState, lam, act: ActiveParams):
    """Fiber stress coefficient h with S_a = sum_f h_f a_f x a_f.

    Returns (h, dh_dlam, dh_dstate) where dh_dlam freezes the internals and
    dh_dstate has shape state.shape + (8,) for the sensitivity chain.
    """
    lam = np.asarray(lam, dtype=float)
    la = state.lam_a
    n_cd = state.n_c + state.n_d
    h = act.mu_a * n_cd * (1.0 / la ** 2 - 1.0 / (la * lam))
    dh_dlam = act.mu_a * n_cd / (la * lam * lam)
    dh_ds = np.zeros(state.shape + (8,))
    per_n = act.mu_a * (1.0 / la ** 2 - 1.0 / (la * lam))
    dh_ds[..., 2] = per_n
    dh_ds[..., 3] = per_n
    dh_ds[..., 7] = act.mu_a * n_cd * (-2.0 / la ** 3 + 1.0 / (la * la * lam))
    return h, dh_dlam, dh_ds
