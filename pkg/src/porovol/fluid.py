"""Constitutive laws and the global-pressure machinery.

Saturation arguments are always the *wetting* saturation unless a function
says otherwise; phase mobilities take their own phase saturation.  The
capillary pressure is a decreasing function of the wetting saturation with
``p_n = p_w + p_c(s_w)`` and ``p_c(1) = 0`` for the built-in linear law.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import PchipInterpolator

N_TABLE = 4097


def _logmean_factor(u):
    """u / log1p(u), with its series near zero."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < 1e-3
    us = np.where(small, u, 0.0)
    series = 1 + us / 2 - us**2 / 12 + us**3 / 24 - 19 * us**4 / 720
    ub = np.where(small, 1.0, u)
    exact = ub / np.log1p(ub)
    return np.where(small, series, exact)


def _logmean_factor_deriv(u):
    """d/du of u / log1p(u)."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < 1e-3
    us = np.where(small, u, 0.0)
    series = 0.5 - us / 6 + us**2 / 8 - 19 * us**3 / 180 + 3 * us**4 / 32
    ub = np.where(small, 1.0, u)
    lg = np.log1p(ub)
    exact = 1 / lg - ub / ((1 + ub) * lg**2)
    return np.where(small, series, exact)


@dataclass(frozen=True)
class PhaseParams:
    """Viscosity, relative permeability and compressible density of one phase.

    Relative permeability is ``s**kr_exponent`` unless ``kr_table`` holds
    ``(s, kr)`` knots (monotone cubic interpolation).  Density follows
    ``rho_ref * (1 + c_ref * (p - p_ref))`` clamped to ``[rho_min, rho_max]``.
    """

    viscosity: float
    rho_ref: float = 1.0
    c_ref: float = 0.0
    p_ref: float = 0.0
    kr_exponent: float = 2.0
    kr_table: tuple | None = None
    rho_min: float | None = None
    rho_max: float | None = None

    def __post_init__(self):
        if not self.viscosity > 0:
            raise ValueError("viscosity must be positive")
        if not self.rho_ref > 0:
            raise ValueError("rho_ref must be positive")
        if self.c_ref < 0:
            raise ValueError("c_ref must be nonnegative")
        if self.rho_min is None:
            object.__setattr__(self, "rho_min", 0.1 * self.rho_ref)
        if self.rho_max is None:
            object.__setattr__(self, "rho_max", 10.0 * self.rho_ref)
        if not 0 < self.rho_min <= self.rho_ref <= self.rho_max:
            raise ValueError("need 0 < rho_min <= rho_ref <= rho_max")
        if self.kr_table is not None:
            s, kr = (np.asarray(a, float) for a in self.kr_table)
            if s[0] != 0.0 or s[-1] != 1.0 or np.any(np.diff(s) <= 0):
                raise ValueError("kr table saturations must increase strictly from 0 to 1")
            if kr[0] != 0.0 or np.any(np.diff(kr) < 0):
                raise ValueError("kr table must start at 0 and be nondecreasing")

    @cached_property
    def _kr_interp(self):
        s, kr = (np.asarray(a, float) for a in self.kr_table)
        return PchipInterpolator(s, kr, extrapolate=False)

    # -- mobility -----------------------------------------------------------
    def kr(self, s):
        s = np.clip(np.asarray(s, float), 0.0, 1.0)
        if self.kr_table is None:
            return s**self.kr_exponent
        return self._kr_interp(s)

    def mobility(self, s):
        return self.kr(s) / self.viscosity

    def dmobility(self, s):
        s = np.asarray(s, float)
        inside = (s > 0.0) & (s < 1.0)
        sc = np.clip(s, 0.0, 1.0)
        if self.kr_table is None:
            n = self.kr_exponent
            d = n * np.where(sc > 0, sc, 0.0) ** (n - 1) if n != 1 else np.ones_like(sc)
        else:
            d = self._kr_interp.derivative()(sc)
        return np.where(inside, d, 0.0) / self.viscosity

    # -- density ------------------------------------------------------------
    @property
    def _p_lo(self) -> float:
        return self.p_ref + (self.rho_min / self.rho_ref - 1) / self.c_ref if self.c_ref > 0 else -np.inf

    @property
    def _p_hi(self) -> float:
        return self.p_ref + (self.rho_max / self.rho_ref - 1) / self.c_ref if self.c_ref > 0 else np.inf

    def density(self, p):
        p = np.asarray(p, float)
        rho = self.rho_ref * (1.0 + self.c_ref * (p - self.p_ref))
        return np.clip(rho, self.rho_min, self.rho_max)

    def ddensity(self, p):
        p = np.asarray(p, float)
        inside = (p > self._p_lo) & (p < self._p_hi)
        return np.where(inside, self.rho_ref * self.c_ref, 0.0)

    def _antiderivative(self, p):
        """A primitive of 1/rho, continuous across the clamp breakpoints."""
        p = np.asarray(p, float)
        if self.c_ref == 0:
            return p / self.rho_ref
        lo, hi = self._p_lo, self._p_hi
        a = self.rho_ref * self.c_ref

        def lin(q):
            return np.log1p(self.c_ref * (q - self.p_ref)) / a

        pin = np.clip(p, lo, hi)
        out = lin(pin)
        out = out + np.where(p < lo, (p - lo) / self.rho_min, 0.0)
        out = out + np.where(p > hi, (p - hi) / self.rho_max, 0.0)
        return out

    def kirchhoff(self, p):
        """g(p) = integral from 0 to p of 1/rho."""
        return self._antiderivative(p) - self._antiderivative(0.0)

    def kirchhoff_jump(self, pk, pl):
        """g(pk) - g(pl) without cancellation when pk and pl are close."""
        pk, pl = np.broadcast_arrays(np.asarray(pk, float), np.asarray(pl, float))
        if self.c_ref == 0:
            return (pk - pl) / self.rho_ref
        c = self.c_ref
        lo, hi = self._p_lo, self._p_hi
        both = (pk > lo) & (pk < hi) & (pl > lo) & (pl < hi)
        xl = np.where(both, 1 + c * (pl - self.p_ref), 1.0)
        near = np.log1p(np.where(both, c * (pk - pl) / xl, 0.0)) / (self.rho_ref * c)
        return np.where(both, near, self._antiderivative(pk) - self._antiderivative(pl))

    def interface_density(self, pk, pl):
        """Inverse of the mean of 1/rho over [pk, pl] (rho(pk) when equal)."""
        return self.interface_density_with_derivs(pk, pl)[0]

    def interface_density_with_derivs(self, pk, pl):
        pk, pl = np.broadcast_arrays(np.asarray(pk, float), np.asarray(pl, float))
        if self.c_ref == 0:
            r = np.full(pk.shape, self.rho_ref)
            z = np.zeros(pk.shape)
            return r, z, z
        lo, hi = self._p_lo, self._p_hi
        lin_k = (pk > lo) & (pk < hi)
        lin_l = (pl > lo) & (pl < hi)
        both = lin_k & lin_l
        c, rref, pr = self.c_ref, self.rho_ref, self.p_ref
        # logarithmic mean of the two linear-law densities
        xk = np.where(both, 1 + c * (pk - pr), 1.0)
        xl = np.where(both, 1 + c * (pl - pr), 1.0)
        u = xl / xk - 1
        rho_lin = rref * xk * _logmean_factor(u)
        d_k = rref * c * _logmean_factor_deriv(xk / xl - 1)
        d_l = rref * c * _logmean_factor_deriv(u)
        if both.all():
            return rho_lin, d_k, d_l

        # generic piecewise branch (clamp engaged on at least one side)
        dp = pl - pk
        same = dp == 0
        dps = np.where(same, 1.0, dp)
        dg = self._antiderivative(pl) - self._antiderivative(pk)
        dgs = np.where(same, 1.0, dg)
        rk, rl = self.density(pk), self.density(pl)
        rho_gen = np.where(same, rk, dps / dgs)
        gk = np.where(same, 0.5 * self.ddensity(pk), rho_gen / dps * (rho_gen / rk - 1))
        gl = np.where(same, 0.5 * self.ddensity(pl), rho_gen / dps * (1 - rho_gen / rl))
        return (
            np.where(both, rho_lin, rho_gen),
            np.where(both, d_k, gk),
            np.where(both, d_l, gl),
        )


@dataclass(frozen=True)
class CapillaryModel:
    """Capillary pressure p_c(s_w): ``linear`` P_max (1 - s), ``table`` or ``none``."""

    kind: str = "linear"
    p_max: float = 0.0
    table: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "table", "none"):
            raise ValueError(f"unknown capillary kind {self.kind!r}")
        if self.kind == "linear" and self.p_max < 0:
            raise ValueError("p_max must be nonnegative")
        if self.kind == "table":
            if self.table is None:
                raise ValueError("table capillary model needs (s, pc) data")
            s, pc = (np.asarray(a, float) for a in self.table)
            if s[0] != 0.0 or s[-1] != 1.0 or np.any(np.diff(s) <= 0):
                raise ValueError("capillary table saturations must increase strictly from 0 to 1")
            if np.any(np.diff(pc) >= 0):
                raise ValueError("capillary table must be strictly decreasing")

    @cached_property
    def _interp(self):
        s, pc = (np.asarray(a, float) for a in self.table)
        return PchipInterpolator(s, pc, extrapolate=False)

    @cached_property
    def _dinterp(self):
        return self._interp.derivative()

    def pc(self, s):
        s = np.asarray(s, float)
        if self.kind == "none":
            return np.zeros_like(s)
        if self.kind == "linear":
            return self.p_max * (1.0 - s)
        sc = np.clip(s, 0.0, 1.0)
        # linear extension with the end slopes outside [0, 1]
        return self._interp(sc) + (s - sc) * self._dinterp(sc)

    def dpc(self, s):
        s = np.asarray(s, float)
        if self.kind == "none":
            return np.zeros_like(s)
        if self.kind == "linear":
            return np.full_like(s, -self.p_max)
        return self._dinterp(np.clip(s, 0.0, 1.0))

    @property
    def degenerate(self) -> bool:
        return self.kind == "none" or (self.kind == "linear" and self.p_max == 0)


@dataclass(frozen=True)
class AssumptionReport:
    m0: float
    m0_saturation: float
    rho_range: dict
    min_abs_dpc: float
    b_monotone: bool
    gamma_endpoints: tuple[float, float]
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def summary(self) -> str:
        lines = [f"m0 = {self.m0:.6g} (at s_w = {self.m0_saturation:.6g})",
                 f"min |dpc/ds| = {self.min_abs_dpc:.6g}"]
        for ph, (lo, hi) in self.rho_range.items():
            lines.append(f"rho_{ph} in [{lo:.6g}, {hi:.6g}]")
        lines += [f"{k}: {'ok' if v else 'FAILED'}" for k, v in self.checks.items()]
        return "\n".join(lines)


class FluidModel:
    """Two-phase fluid with tabulated capillary transforms.

    Tables of the artificial pressures ``p_tilde``, ``p_bar`` and of the
    capillary transform ``B`` are built on ``n_table`` uniform knots with
    5-point Gauss quadrature per interval and read back by linear
    interpolation, which keeps them monotone.
    """

    def __init__(self, wetting: PhaseParams, nonwetting: PhaseParams, capillary: CapillaryModel,
                 n_table: int = N_TABLE, pressure_range=(0.0, 1.0e6)):
        self.wetting = wetting
        self.nonwetting = nonwetting
        self.capillary = capillary
        self.n_table = int(n_table)
        self.pressure_range = tuple(float(x) for x in pressure_range)
        self._build_tables()

    def phase(self, name: str) -> PhaseParams:
        if name in ("w", "wetting"):
            return self.wetting
        if name in ("n", "nonwetting"):
            return self.nonwetting
        raise KeyError(name)

    # -- phase helpers keyed by wetting saturation --------------------------
    def mobility(self, phase: str, s):
        """Mobility of ``phase`` at its own saturation ``s``."""
        return self.phase(phase).mobility(s)

    def density(self, phase: str, p):
        return self.phase(phase).density(p)

    def interface_density(self, phase: str, pk, pl):
        return self.phase(phase).interface_density(pk, pl)

    def g_alpha(self, phase: str, p):
        return self.phase(phase).kirchhoff(p)

    def total_mobility(self, sw):
        sw = np.asarray(sw, float)
        return self.wetting.mobility(sw) + self.nonwetting.mobility(1.0 - sw)

    def pc(self, sw):
        return self.capillary.pc(sw)

    def dpc(self, sw):
        return self.capillary.dpc(sw)

    def gamma(self, sw):
        sw = np.asarray(sw, float)
        mw, mn = self.wetting.mobility(sw), self.nonwetting.mobility(1.0 - sw)
        return -(mw * mn / (mw + mn)) * self.dpc(sw)

    # -- tables -------------------------------------------------------------
    def _integrands(self, z):
        mw, mn = self.wetting.mobility(z), self.nonwetting.mobility(1.0 - z)
        m = mw + mn
        dpc = self.dpc(z)
        return -(mw / m) * dpc, (mn / m) * dpc, -(mw * mn / m) * dpc

    def _build_tables(self):
        n = self.n_table
        knots = np.linspace(0.0, 1.0, n)
        xg, wg = np.polynomial.legendre.leggauss(5)
        a, b = knots[:-1], knots[1:]
        half = 0.5 * (b - a)
        z = (0.5 * (a + b))[:, None] + half[:, None] * xg[None, :]
        pt, pb, gm = self._integrands(z)
        inc = [half * (f @ wg) for f in (pt, pb, gm)]
        self.s_knots = knots
        self.p_tilde_table, self.p_bar_table, self.B_table = (
            np.concatenate([[0.0], np.cumsum(x)]) for x in inc
        )

    def p_tilde(self, sw):
        return np.interp(np.clip(sw, 0.0, 1.0), self.s_knots, self.p_tilde_table)

    def p_bar(self, sw):
        return np.interp(np.clip(sw, 0.0, 1.0), self.s_knots, self.p_bar_table)

    def B(self, sw):
        return np.interp(np.clip(sw, 0.0, 1.0), self.s_knots, self.B_table)

    @property
    def B1(self) -> float:
        return float(self.B_table[-1])

    def capillary_transforms(self, sw):
        """(p_tilde, p_bar, gamma, B) at wetting saturation ``sw`` in [0, 1]."""
        sw = np.asarray(sw, float)
        if np.any((sw < 0) | (sw > 1)):
            raise ValueError("saturation outside [0, 1]")
        return self.p_tilde(sw), self.p_bar(sw), self.gamma(sw), self.B(sw)

    def B_inverse(self, b):
        """Saturation with B(s) = b, inverting the monotone table by bisection."""
        b = np.asarray(b, float)
        B1 = self.B1
        if B1 <= 0:
            raise ValueError("capillary transform is identically zero; B has no inverse")
        if np.any((b < 0) | (b > B1)):
            raise ValueError(f"value outside [0, B(1)] = [0, {B1}]")
        tab = self.B_table
        i = np.clip(np.searchsorted(tab, b, side="right") - 1, 0, len(tab) - 2)
        # flat table segments can only occur where gamma underflows; step past them
        b0, b1 = tab[i], tab[i + 1]
        span = np.where(b1 > b0, b1 - b0, 1.0)
        frac = np.where(b1 > b0, (b - b0) / span, 0.0)
        return self.s_knots[i] + frac * (self.s_knots[i + 1] - self.s_knots[i])

    def global_pressure(self, pw, sw):
        return np.asarray(pw, float) + self.p_bar(sw)


def validate_assumptions(model: FluidModel, n_samples: int = 100_001, require_capillary: bool = True) -> AssumptionReport:
    """Sample the structural hypotheses on mobilities, densities and p_c.

    ``require_capillary=False`` accepts the degenerate zero-capillarity mode,
    where the lower bound on |p_c'| cannot hold by construction.
    """
    from scipy.optimize import minimize_scalar

    s = np.linspace(0.0, 1.0, n_samples)
    mt = model.total_mobility(s)
    i = int(np.argmin(mt))
    lo, hi = s[max(i - 1, 0)], s[min(i + 1, n_samples - 1)]
    m0, s0 = float(mt[i]), float(s[i])
    if hi > lo:
        res = minimize_scalar(lambda x: float(model.total_mobility(x)), bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-14})
        if res.fun < m0:
            m0, s0 = float(res.fun), float(res.x)

    checks = {}
    mw, mn = model.wetting.mobility(s), model.nonwetting.mobility(s)
    checks["H2 mobilities nonnegative and vanishing at zero saturation"] = bool(
        np.all(mw >= 0) and np.all(mn >= 0) and mw[0] == 0 and mn[0] == 0
    )
    checks["H2 nondecreasing mobilities"] = bool(np.all(np.diff(mw) >= 0) and np.all(np.diff(mn) >= 0))
    checks["H2 total mobility bounded below (m0 > 0)"] = m0 > 0

    p = np.linspace(*model.pressure_range, 2001)
    rho_range = {}
    ok4 = True
    for name, ph in (("w", model.wetting), ("n", model.nonwetting)):
        r = ph.density(p)
        rho_range[name] = (float(r.min()), float(r.max()))
        ok4 &= bool(np.all(r >= ph.rho_min) and np.all(r <= ph.rho_max) and ph.rho_min > 0)
        ok4 &= bool(np.all(np.diff(r) >= 0))
    checks["H4 density bounded and monotone"] = ok4

    dpc = model.dpc(s)
    min_abs = float(np.min(np.abs(dpc)))
    if require_capillary:
        checks["H5 p_c decreasing with |p_c'| bounded away from zero"] = bool(np.all(dpc < 0) and min_abs > 0)
    gam = model.gamma(s)
    b_mono = bool(np.all(np.diff(model.B_table) >= 0))
    if require_capillary:
        checks["H6 gamma > 0 inside, zero at ends; B monotone"] = bool(
            b_mono and np.all(gam[1:-1] > 0) and abs(gam[0]) == 0 and abs(gam[-1]) == 0
        )
    return AssumptionReport(m0, s0, rho_range, min_abs, b_mono, (float(gam[0]), float(gam[-1])), checks)
