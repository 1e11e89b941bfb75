"""Deterministic rate equation of a multiplicatively interacting network.

With pure Poisson inputs ``P`` separated from the remaining units ``R`` the
expected rates ``y`` over ``R`` follow

    dy_r/dt = y_r * (sum_s L_R[r, s] y_s + b_r),    b = L_P @ i,

where ``i`` are the (constant) input rates.  This module integrates that
system, enumerates and classifies its critical points, and provides the
closed forms available for the stochastic perfect integrator (SPI) and for
two recurrent units with ``l_33 = l_44 = -1``.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ExplosionError, MippError
from .point_process import (
    PURE_POISSON_INPUT,
    RECURRENT,
    TRANSIENT_INPUT,
    population_tags,
)

STABILITY_TOL = 1e-9
MAX_ENUMERATION = 20
DIVERGENCE_LIMIT = 1e12

ATTRACTIVE = "attractive"
UNSTABLE = "unstable"
NON_HYPERBOLIC = "non_hyperbolic"


class NumericalError(MippError):
    """Eigenvalue computation failed or did not meet the residual bound."""


@dataclass(frozen=True)
class PopulationReport:
    tags: tuple
    has_transient_input: bool
    non_inhibited_units: tuple  # non-input units with l_aa >= 0

    @property
    def ok(self):
        return not self.has_transient_input and not self.non_inhibited_units


def classify_populations(network_or_weights):
    """Population tags plus the two standing assumptions, reported as flags.

    Flags are raised for transient inputs and for non-input units without
    self-inhibition (``l_aa >= 0``); nothing is enforced.
    """
    L = getattr(network_or_weights, "log_weights", network_or_weights)
    L = np.asarray(L, dtype=float)
    tags = population_tags(L)
    bad = tuple(
        a for a, t in enumerate(tags) if t != PURE_POISSON_INPUT and L[a, a] >= 0
    )
    return PopulationReport(tags, TRANSIENT_INPUT in tags, bad)


@dataclass(frozen=True)
class RateSystem:
    """Canonical form of the rate equation over the non-input units.

    ``recurrent`` and ``inputs`` are unit indices of the original network;
    vectors over ``R`` are ordered like ``recurrent``.
    """

    L_R: np.ndarray
    L_P: np.ndarray
    input_rates: np.ndarray
    recurrent: tuple = ()
    inputs: tuple = ()
    b: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        L_R = np.array(self.L_R, dtype=float)
        if L_R.ndim != 2 or L_R.shape[0] != L_R.shape[1]:
            raise ValueError("L_R must be square")
        m = L_R.shape[0]
        i = np.array(self.input_rates, dtype=float).reshape(-1)
        L_P = np.array(self.L_P, dtype=float).reshape(m, i.size)
        if np.any(i < 0):
            raise ValueError("input rates must be nonnegative")
        for name, val in (("L_R", L_R), ("L_P", L_P), ("input_rates", i)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        if not self.recurrent:
            object.__setattr__(self, "recurrent", tuple(range(m)))
        if not self.inputs:
            object.__setattr__(self, "inputs", tuple(range(m, m + i.size)))
        b = L_P @ i
        b.setflags(write=False)
        object.__setattr__(self, "b", b)

    @property
    def size(self):
        return self.L_R.shape[0]

    @classmethod
    def from_network(cls, network, input_rates=None):
        tags = network.population_tag
        P = tuple(a for a, t in enumerate(tags) if t == PURE_POISSON_INPUT)
        R = tuple(a for a, t in enumerate(tags) if t != PURE_POISSON_INPUT)
        L = network.log_weights
        i = network.base_rates[list(P)] if input_rates is None else input_rates
        return cls(L[np.ix_(R, R)], L[np.ix_(R, P)], i, R, P)

    @classmethod
    def from_drive(cls, L_R, b):
        """System whose equivalent input ``b`` is given directly (unit input rates)."""
        b = np.asarray(b, dtype=float)
        return cls(L_R, np.diag(b), np.ones(b.size))

    def initial_state(self, network):
        return network.base_rates[list(self.recurrent)].copy()


def rhs(system, y):
    """Right-hand side ``y * (L_R y + b)``."""
    y = np.asarray(y, dtype=float)
    if y.shape != (system.size,):
        raise ValueError(f"state has shape {y.shape}, expected ({system.size},)")
    return y * (system.L_R @ y + system.b)


def jacobian(system, y):
    """``J[r, r'] = delta_rr' (b_r + sum_s L_R[r, s] y_s) + y_r L_R[r, r']``."""
    y = np.asarray(y, dtype=float)
    if y.shape != (system.size,):
        raise ValueError(f"state has shape {y.shape}, expected ({system.size},)")
    return np.diag(system.b + system.L_R @ y) + y[:, None] * system.L_R


def energy(y):
    """Total rate ``sum_a y_a``."""
    return float(np.sum(y))


def divergence_decomposition(system, y):
    """Split ``div F(y)`` into input, dissipation and inhibition.

    ``input = sum_r b_r``, ``dissipation = sum_{r,s} L_R[r, s] y_s`` and
    ``inhibition = sum_r L_R[r, r] y_r``.  The three terms add up to the trace
    of the Jacobian.
    """
    y = np.asarray(y, dtype=float)
    return (
        float(np.sum(system.b)),
        float(np.sum(system.L_R @ y)),
        float(np.diag(system.L_R) @ y),
    )


def is_negative_definite(matrix, semi=False):
    """Definiteness of the symmetric part of ``matrix``."""
    A = np.asarray(matrix, dtype=float)
    ev = np.linalg.eigvalsh(0.5 * (A + A.T))
    return bool(np.all(ev <= 0) if semi else np.all(ev < 0))


# ---------------------------------------------------------------------------
# integration


@dataclass
class RateTrajectory:
    times: np.ndarray
    values: np.ndarray  # (len(times), |R|)
    step_size: float
    method: str = "rk4-log-stepdoubling"
    n_steps: int = 0
    units: tuple = ()

    def to_csv(self, path):
        """Write ``time,unit,rate`` rows."""
        units = self.units or tuple(range(self.values.shape[1]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "unit", "rate"])
            for t, row in zip(self.times, self.values):
                for u, v in zip(units, row):
                    w.writerow([repr(float(t)), u, repr(float(v))])


def _log_rhs(system, u, alive):
    y = np.where(alive, np.exp(u), 0.0)
    return system.L_R @ y + system.b


def _rk4(system, u, alive, h):
    k1 = _log_rhs(system, u, alive)
    k2 = _log_rhs(system, u + 0.5 * h * k1, alive)
    k3 = _log_rhs(system, u + 0.5 * h * k2, alive)
    k4 = _log_rhs(system, u + h * k3, alive)
    return u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate(system, y0, t_end, rtol=1e-8, t_eval=None, h0=None, max_steps=10_000_000):
    """Integrate the rate equation from ``y0`` up to ``t_end``.

    Positive components are advanced in log coordinates with classic RK4;
    components starting at exactly zero stay zero.  The local error of each
    step is estimated by step doubling and held below ``rtol`` (relative in
    ``y``, i.e. absolute in ``log y``).

    Raises
    ------
    ExplosionError
        If any component exceeds ``1e12``.
    """
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (system.size,):
        raise ValueError(f"y0 has shape {y0.shape}, expected ({system.size},)")
    if np.any(y0 < 0):
        raise ValueError("y0 must be nonnegative")
    if t_eval is None:
        t_eval = np.linspace(0.0, t_end, 101)
    t_eval = np.asarray(t_eval, dtype=float)
    if np.any(np.diff(t_eval) < 0) or t_eval[0] < 0 or t_eval[-1] > t_end:
        raise ValueError("t_eval must be increasing inside [0, t_end]")

    alive = y0 > 0
    u = np.where(alive, np.log(np.where(alive, y0, 1.0)), -np.inf)
    out = np.zeros((t_eval.size, system.size))
    if not alive.any():
        return RateTrajectory(t_eval, out, 0.0, n_steps=0, units=system.recurrent)

    ua = u[alive]
    sub = RateSystem.from_drive(system.L_R[np.ix_(alive, alive)], system.b[alive])
    fake_alive = np.ones(ua.size, dtype=bool)
    scale = np.abs(_log_rhs(sub, ua, fake_alive)).max() + 1.0
    h = h0 if h0 is not None else min(1e-2, 0.1 / scale)
    log_limit = math.log(DIVERGENCE_LIMIT)
    t = 0.0
    steps = 0
    h_used = h
    j = 0
    while j < t_eval.size and t_eval[j] <= t:
        out[j, alive] = np.exp(ua)
        j += 1
    while j < t_eval.size:
        target = t_eval[j]
        clipped = h >= target - t
        hh = target - t if clipped else h
        full = _rk4(sub, ua, fake_alive, hh)
        half = _rk4(sub, _rk4(sub, ua, fake_alive, 0.5 * hh), fake_alive, 0.5 * hh)
        err = float(np.max(np.abs(half - full))) / 15.0
        steps += 1
        if steps > max_steps:
            raise MippError("rate-equation integration exceeded the step cap")
        fac = 0.9 * (rtol / err) ** 0.2 if err > 0 else 4.0
        fac = min(4.0, max(0.1, fac))
        if err <= rtol or hh < 1e-14:
            t = target if clipped else t + hh
            ua = half + (half - full) / 15.0
            h_used = hh
            if np.any(ua > log_limit):
                raise ExplosionError(
                    f"rate-equation solution exceeded {DIVERGENCE_LIMIT:g} at t={t:.6g}",
                    time=t,
                )
            while j < t_eval.size and t_eval[j] <= t:
                out[j, alive] = np.exp(ua)
                j += 1
            # a step shortened to hit an output time says little about h
            h = max(h, hh * fac) if clipped else hh * fac
        else:
            h = hh * fac
    return RateTrajectory(t_eval, out, h_used, n_steps=steps, units=system.recurrent)


# ---------------------------------------------------------------------------
# SPI closed forms


def spi_closed_form(lam, l21, l22, r0, t):
    """Solution of ``dr/dt = r (lam*l21 + l22 r)`` with ``r(0) = r0``.

    With ``a = lam*l21`` the solution is
    ``a r0 e^{at} / (a + l22 r0 (1 - e^{at}))``.
    """
    if not (lam > 0 and l21 > 0 and l22 < 0 and r0 > 0):
        raise ValueError("need lam > 0, l21 > 0, l22 < 0, r0 > 0")
    a = lam * l21
    t = np.asarray(t, dtype=float)
    # divide through by e^{at} to stay finite for large t
    em = np.exp(-a * t)
    den = a * em + l22 * r0 * (em - 1.0)
    if np.any(den == 0):
        raise ValueError("vanishing denominator")
    out = a * r0 / den
    return float(out) if out.ndim == 0 else out


def spi_equilibrium(lam, l21, l22):
    """Stationary SPI rate ``-lam * l21 / l22``."""
    return -lam * l21 / l22


def warm_up_rate(l21, l22):
    """Input rate that puts the SPI equilibrium output rate at 1."""
    if not (l21 > 0 and l22 < 0):
        raise ValueError("need l21 > 0 and l22 < 0")
    return -l22 / l21


def spi_system(lam, l21, l22):
    return RateSystem([[l22]], [[l21]], [lam], (1,), (0,))


# ---------------------------------------------------------------------------
# critical points


def eigenvalues(matrix, return_vectors=False):
    """Eigenvalues sorted by descending real part, ties by descending imaginary part.

    Each pair is checked for ``|Av - lambda v| <= 1e-8 |A|``.
    """
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    if A.shape[0] > 32:
        raise ValueError("matrix larger than 32x32")
    if A.size == 0:
        return (np.empty(0, complex), np.empty((0, 0), complex)) if return_vectors \
            else np.empty(0, complex)
    norm = np.linalg.norm(A, 2)
    w, V = _checked_eig(A, A, norm)
    if w is None:
        # LAPACK balancing can break down on entries far below |A|; dropping
        # them is a backward-stable perturbation, the residual is still
        # checked against the original matrix
        w, V = _checked_eig(np.where(np.abs(A) < 1e-14 * norm, 0.0, A), A, norm)
    if w is None:
        raise NumericalError("eigenpair residual above 1e-8 |A|")
    scale = max(norm, 1.0)
    re = np.round(w.real / scale, 12)
    order = np.lexsort((-w.imag, -re))
    if return_vectors:
        return w[order], V[:, order]
    return w[order]


def _checked_eig(M, A, norm):
    try:
        w, V = np.linalg.eig(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigenvalue iteration failed: {exc}") from exc
    w = w.astype(complex)
    V = V.astype(complex)
    res = np.linalg.norm(A @ V - V * w, axis=0)
    if np.all(res <= 1e-8 * max(norm, 1e-300)):
        return w, V
    return None, None


def classify(eigs, tol=STABILITY_TOL):
    re = np.real(eigs)
    if np.any(np.abs(re) <= tol):
        return NON_HYPERBOLIC
    if np.all(re < -tol):
        return ATTRACTIVE
    return UNSTABLE


@dataclass
class FixedPointReport:
    active_set: tuple
    y_star: np.ndarray
    eigenvalues: np.ndarray
    stability: str
    admissible: bool

    def to_dict(self):
        return {
            "active_set": [int(a) for a in self.active_set],
            "y": [float(v) for v in self.y_star],
            "eigenvalues": [{"re": float(e.real), "im": float(e.imag)} for e in self.eigenvalues],
            "stability": self.stability,
            "admissible": bool(self.admissible),
        }


def _subset_solution(system, S):
    y = np.zeros(system.size)
    if S:
        idx = list(S)
        M = system.L_R[np.ix_(idx, idx)]
        if np.linalg.cond(M) > 1e12:
            return None
        y[idx] = np.linalg.solve(M, -system.b[idx])
        if not np.all(np.abs(y) <= DIVERGENCE_LIMIT):
            return None  # beyond the divergence guard; treated like a singular set
    return y


def subsets(m):
    """All subsets of ``range(m)`` ordered by bitmask."""
    for mask in range(1 << m):
        yield tuple(r for r in range(m) if mask >> r & 1)


def fixed_points(system, tol=STABILITY_TOL):
    """Enumerate the critical points, one candidate per active set.

    For each active set ``S`` the linear system ``L_S y_S = -b_S`` is solved;
    components outside ``S`` are zero.  Candidates are ordered by subset
    bitmask.  Active sets with a singular principal submatrix, or whose
    solution exceeds the divergence guard, produce no candidate; see
    :func:`singular_active_sets`.  ``active_set`` holds
    positions in ``system.recurrent``.
    """
    m = system.size
    if m > MAX_ENUMERATION:
        raise ValueError(f"|R| = {m} exceeds the enumeration cap {MAX_ENUMERATION}")
    out = []
    for S in subsets(m):
        y = _subset_solution(system, S)
        if y is None:
            continue
        ev = eigenvalues(jacobian(system, y))
        admissible = bool(np.all(y[list(S)] > 0)) if S else True
        out.append(FixedPointReport(S, y, ev, classify(ev, tol), admissible))
    return out


def singular_active_sets(system):
    return [S for S in subsets(system.size) if S and _subset_solution(system, S) is None]


def fixed_points_json(reports, **extra):
    doc = {"schema_version": 1, **extra, "fixed_points": [r.to_dict() for r in reports]}
    return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# two recurrent units with l_33 = l_44 = -1 and unit input rates


@dataclass(frozen=True)
class TwoUnitReport:
    """Closed-form critical points and spectra of the normalised two-unit system.

    Unit "3" is driven by ``l31`` and unit "4" by ``l42``; ``l34`` is the
    coupling from 4 to 3 and ``l43`` from 3 to 4.
    """

    l31: float
    l42: float
    l34: float
    l43: float
    y0: np.ndarray
    y3: np.ndarray
    y4: np.ndarray
    yc: np.ndarray | None
    spectrum_0: tuple
    spectrum_3: tuple
    spectrum_4: tuple
    spectrum_c: tuple | None
    regime: str
    coupling_stable: bool
    attractive: dict

    def system(self):
        return two_unit_system(self.l31, self.l42, self.l34, self.l43)


def two_unit_system(l31, l42, l34, l43, self_inhibition=-1.0):
    L_R = np.array([[self_inhibition, l34], [l43, self_inhibition]])
    return RateSystem.from_drive(L_R, [l31, l42])


def _symmetric_critical_spectrum(l_input, kappa):
    # kappa is the signed common cross coupling l34 = l43
    return (-l_input, (1.0 + kappa) * l_input / (kappa - 1.0))


def two_unit_analysis(l31, l42, l34, l43):
    """Closed-form analysis of two mutually coupled units ``3`` and ``4``."""
    vals = (l31, l42, l34, l43)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("inputs must be finite")
    y0 = np.zeros(2)
    y3 = np.array([l31, 0.0])
    y4 = np.array([0.0, l42])
    det = 1.0 - l34 * l43
    yc = None
    if det != 0:
        yc = np.array([(l31 + l34 * l42) / det, (l42 + l43 * l31) / det])
    s0 = (l31, l42)
    s3 = (-l31, l43 * l31 + l42)
    s4 = (-l42, l34 * l42 + l31)
    sc = None
    if yc is not None:
        if l34 == l43 and l31 == l42:
            sc = _symmetric_critical_spectrum(l31, l34)
        else:
            # remaining eigenvalues follow from J(yc) = diag(yc) L_R
            J = np.array([[-yc[0], l34 * yc[0]], [l43 * yc[1], -yc[1]]])
            tr, dt_ = np.trace(J), np.linalg.det(J)
            disc = complex(tr * tr - 4 * dt_) ** 0.5
            sc = ((tr + disc) / 2, (tr - disc) / 2)
    if l34 > 0 and l43 > 0:
        regime = "positive_feedback"
    elif l34 < 0 and l43 < 0:
        regime = "negative_feedback"
    elif l34 * l43 < 0:
        regime = "oscillator"
    else:
        regime = "decoupled_or_one_way"

    def attr(spectrum, point):
        if point is None or spectrum is None or np.any(point < 0):
            return False
        return all(np.real(e) < -STABILITY_TOL for e in spectrum)

    attractive = {
        "y0": attr(s0, y0),
        "y3": attr(s3, y3),
        "y4": attr(s4, y4),
        "yc": attr(sc, yc),
    }
    return TwoUnitReport(
        l31, l42, l34, l43, y0, y3, y4, yc, s0, s3, s4, sc, regime,
        coupling_stable=1.0 > l34 * l43, attractive=attractive,
    )
