"""Rate distribution of the stochastic perfect integrator.

The density ``f(r, t)`` of the output rate evolves by

    df/dt = (lam / w21) f(r / w21) + (r / w22**2) f(r / w22) - (lam + r) f(r),

the first term carrying mass up by one input event, the second carrying it
down by one output event.  Densities live on a log-uniform grid
``r_k = r_min * exp(k h)``.  The moments ``mu_n = int r**n f dr`` obey an
open hierarchy in which ``d mu_n / dt`` depends on ``mu_{n+1}``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp

from .errors import InstabilityError, ResolutionError

__all__ = [
    "RateDensity",
    "MomentVector",
    "log_grid",
    "lognormal_density",
    "default_grid",
    "master_rhs",
    "master_operator",
    "evolve_master",
    "moments_of",
    "moment_ode",
    "integrate_moments",
    "equilibrium_ratio",
    "equilibrium_recursion",
    "lognormal_tail_compare",
    "write_density_csv",
    "write_moments_csv",
]

SCHEMES = ("conservative", "loglog")
CLOSURES = ("equilibrium", "lognormal")


@dataclass
class RateDensity:
    """Density values ``f(r_k, t)`` on a log-uniform grid."""

    r: np.ndarray
    f: np.ndarray
    t: float = 0.0

    @property
    def h(self):
        return float(math.log(self.r[1] / self.r[0]))

    @property
    def weights(self):
        """Trapezoid weights for ``int . dr`` in log coordinates (``dr = r h``)."""
        w = self.r * self.h
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def mass(self):
        return float(self.weights @ self.f)

    def mean(self):
        return float(self.weights @ (self.r * self.f))

    def normalized(self):
        return RateDensity(self.r, self.f / self.mass(), self.t)

    def log_moments(self):
        """Mean and variance of ``log r`` under the density."""
        m = self.mass()
        u = np.log(self.r)
        mu = float(self.weights @ (u * self.f)) / m
        var = float(self.weights @ ((u - mu) ** 2 * self.f)) / m
        return mu, var


@dataclass
class MomentVector:
    mu: np.ndarray  # mu[0..n_max]
    t: float = 0.0

    @property
    def n_max(self):
        return self.mu.size - 1


def log_grid(r_min, r_max, K):
    if not (0 < r_min < r_max) or K < 2:
        raise ValueError("need 0 < r_min < r_max and K >= 2")
    return r_min * np.exp(np.arange(K) * (math.log(r_max / r_min) / (K - 1)))


def default_grid(lam, w21, w22, K=4096):
    """Grid spanning ``[1e-6, 1e3]`` times the equilibrium mean rate."""
    m = -lam * math.log(w21) / math.log(w22)
    return log_grid(1e-6 * m, 1e3 * m, K)


def lognormal_density(r, mu, sigma):
    """Lognormal density with parameters of ``log r``, normalised on the grid."""
    r = np.asarray(r, dtype=float)
    f = np.exp(-((np.log(r) - mu) ** 2) / (2 * sigma**2)) / (r * sigma * math.sqrt(2 * math.pi))
    return RateDensity(r, f).normalized()


def _check_params(lam, w21, w22):
    if not (w21 > 1 and 0 < w22 < 1 and lam > 0):
        raise ValueError("need w21 > 1, 0 < w22 < 1 and lam > 0")


def _check_resolution(h, w21, w22):
    if h > min(math.log(w21), -math.log(w22)):
        raise ResolutionError(
            f"grid step h={h:.4g} is coarser than the weight shifts "
            f"({math.log(w21):.4g}, {-math.log(w22):.4g})"
        )


def _shift_matrix(K, s, h, boundary):
    """Sparse operator evaluating ``q(u - s)`` by linear interpolation in ``u``.

    With ``boundary="lump"`` mass that would leave the grid is kept in the
    edge cell, so column sums are exactly one.
    """
    x = s / h
    m = math.floor(x)
    th = x - m
    rows, cols, vals = [], [], []
    src = np.arange(K)
    for off, wgt in ((m, 1.0 - th), (m + 1, th)):
        if wgt == 0.0:
            continue
        dest = src + off  # source j contributes to row j + off
        if boundary == "lump":
            dest = np.clip(dest, 0, K - 1)
            keep = np.ones(K, dtype=bool)
        else:
            keep = (dest >= 0) & (dest < K)
        rows.append(dest[keep])
        cols.append(src[keep])
        vals.append(np.full(int(keep.sum()), wgt))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(K, K)
    )


def master_operator(r, lam, w21, w22, boundary="lump"):
    """Sparse generator acting on ``g = r f`` (density per unit ``log r``).

    In ``u = log r`` both event types are rigid shifts, so linear interpolation
    in ``u`` conserves mass to rounding error.
    """
    _check_params(lam, w21, w22)
    r = np.asarray(r, dtype=float)
    K = r.size
    h = float(math.log(r[1] / r[0]))
    _check_resolution(h, w21, w22)
    up = _shift_matrix(K, math.log(w21), h, boundary)
    down = _shift_matrix(K, math.log(w22), h, boundary)
    A = lam * up + down @ sparse.diags(r) - sparse.diags(lam + r)
    return A.tocsr()


def _loglog_at(r, f, w):
    """``f(r / w)`` by linear interpolation of ``log f`` in ``log r``; 0 off-grid."""
    u = np.log(r)
    x = u - math.log(w)
    with np.errstate(divide="ignore"):
        lf = np.log(f)
    inside = (x >= u[0]) & (x <= u[-1])
    out = np.zeros_like(f)
    out[inside] = np.exp(np.interp(x[inside], u, lf))
    return out


def master_rhs(density, lam, w21, w22, scheme="conservative"):
    """Time derivative of the density values.

    ``scheme="conservative"`` interpolates the density per unit ``log r``
    linearly (mass-conserving).  ``scheme="loglog"`` evaluates ``f(r / w)`` by
    log-log interpolation with zero outside the grid.
    """
    _check_params(lam, w21, w22)
    r, f = density.r, density.f
    _check_resolution(density.h, w21, w22)
    if scheme == "conservative":
        A = master_operator(r, lam, w21, w22)
        return (A @ (r * f)) / r
    if scheme == "loglog":
        return (lam / w21) * _loglog_at(r, f, w21) + (r / w22**2) * _loglog_at(r, f, w22) \
            - (lam + r) * f
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


@dataclass
class MasterRun:
    density: RateDensity
    times: np.ndarray
    moments: np.ndarray  # (len(times), n_max + 1)
    mass_drift_rate: float  # max |d mass / dt| seen over the run
    dt: float
    n_steps: int


def evolve_master(density0, lam, w21, w22, t_end, dt=None, n_max=3, record_every=None,
                  max_step_drift=1e-9):
    """Evolve ``density0`` to ``t_end`` with explicit RK4.

    ``dt`` must satisfy ``dt <= 0.5 / (lam + r_max)``; it defaults to that
    bound.  Moments up to ``n_max`` are recorded every ``record_every`` model
    seconds.

    Raises
    ------
    InstabilityError
        If a density value drops below ``-1e-10 * max f`` or the mass changes
        by more than ``max_step_drift`` in one step.
    """
    _check_params(lam, w21, w22)
    r = density0.r
    bound = 0.5 / (lam + r[-1])
    if dt is None:
        dt = bound
    if dt > bound * (1 + 1e-12):
        raise ValueError(f"dt={dt:.3g} violates the stability guard dt <= {bound:.3g}")
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    A = master_operator(r, lam, w21, w22)
    w = RateDensity(r, np.ones_like(r)).weights
    # density per unit log r; the trapezoid mass is sum(wg * g)
    wg = w / r
    g = r * density0.f
    n_steps = int(math.ceil(t_end / dt - 1e-9)) if t_end > 0 else 0
    h = t_end / n_steps if n_steps else 0.0
    rec = n_steps
    if record_every is not None and n_steps:
        blocks = t_end / record_every
        if abs(blocks - round(blocks)) < 1e-9 and round(blocks) >= 1:
            # whole number of records: steps per record fixed, records land exactly
            per = int(math.ceil(record_every / dt - 1e-9))
            n_steps = per * int(round(blocks))
            h = t_end / n_steps
            rec = per
        else:
            rec = max(1, int(round(record_every / h)))
    powers = np.vstack([r**n for n in range(n_max + 1)])

    times = [density0.t]
    moms = [powers @ (wg * g)]
    mass = float(wg @ g)
    worst = 0.0
    for k in range(1, n_steps + 1):
        k1 = A @ g
        k2 = A @ (g + 0.5 * h * k1)
        k3 = A @ (g + 0.5 * h * k2)
        k4 = A @ (g + h * k3)
        g = g + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        new_mass = float(wg @ g)
        drift = abs(new_mass - mass)
        worst = max(worst, drift / h)
        if drift > max_step_drift:
            raise InstabilityError(
                f"mass changed by {drift:.3g} in one step at t={density0.t + k * h:.4g}"
            )
        mass = new_mass
        if g.min() < -1e-10 * g.max():
            raise InstabilityError(
                f"negative density at t={density0.t + k * h:.4g}; reduce dt or refine the grid"
            )
        if k % rec == 0 or k == n_steps:
            times.append(density0.t + k * h)
            moms.append(powers @ (wg * g))
    f = np.clip(g, 0.0, None) / r
    out = RateDensity(r, f, density0.t + t_end)
    return MasterRun(out, np.array(times), np.array(moms), worst, h, n_steps)


def moments_of(density, n_max):
    """Trapezoidal moments ``mu_0..mu_n_max`` of ``density``."""
    w = density.weights * density.f
    mu = np.array([w @ density.r**n for n in range(n_max + 1)])
    return MomentVector(mu, density.t)


def equilibrium_ratio(lam, w21, w22, n):
    """``mu_{n+1} / mu_n`` at equilibrium: ``lam (1 - w21**n) / (w22**n - 1)``."""
    n = np.asarray(n)
    if np.any(n < 1):
        raise ValueError("the recursion is defined for n >= 1")
    return lam * (1.0 - w21**n) / (w22**n - 1.0)


def _closure(mu, lam, w21, w22, closure):
    N = mu.size - 1
    if closure == "equilibrium":
        return float(equilibrium_ratio(lam, w21, w22, N)) * mu[N]
    if closure == "lognormal":
        # lognormal through mu_0 = 1, mu_{N-1}, mu_N
        a, b = math.log(mu[N - 1]), math.log(mu[N])
        s = 2.0 * (b / N - a / (N - 1)) if N > 1 else 0.0
        m = b / N - N * s / 2.0
        if N == 1:
            m, s = 0.0, 2.0 * b  # single moment: zero-mean log with mu_1 fixing sigma
        return math.exp((N + 1) * m + (N + 1) ** 2 * s / 2.0)
    raise ValueError(f"unknown closure {closure!r}; expected one of {CLOSURES}")


def moment_ode(mu, lam, w21, w22, closure="equilibrium"):
    """``d mu_n / dt = (w22**n - 1) mu_{n+1} - lam (1 - w21**n) mu_n``.

    ``mu`` is a :class:`MomentVector` or an array ``mu_0..mu_N``; the missing
    ``mu_{N+1}`` comes from ``closure``.
    """
    mu = np.asarray(getattr(mu, "mu", mu), dtype=float)
    if mu.size < 2:
        raise ValueError("need at least mu_0 and mu_1")
    nxt = np.append(mu[1:], _closure(mu, lam, w21, w22, closure))
    n = np.arange(mu.size)
    return (w22**n - 1.0) * nxt - lam * (1.0 - w21**n) * mu


def integrate_moments(mu0, lam, w21, w22, t_eval, closure="equilibrium"):
    """Integrate the closed hierarchy; returns ``mu`` at ``t_eval``, shape (T, N+1).

    The stiff system is solved for ``log mu_n`` with an implicit method.
    """
    mu0 = np.asarray(getattr(mu0, "mu", mu0), dtype=float)
    N = mu0.size - 1
    n = np.arange(1, N + 1)
    d21 = lam * (w21**n - 1.0)
    d22 = w22**n - 1.0

    def f(_, v):
        # a diverging truncation overflows here; reported below via sol.success
        with np.errstate(over="ignore", invalid="ignore"):
            mu = np.exp(np.concatenate(([0.0], v)))
            nxt = np.append(mu[2:], _closure(mu, lam, w21, w22, closure))
            return d22 * nxt / mu[1:] + d21

    t_eval = np.asarray(t_eval, dtype=float)
    sol = solve_ivp(f, (0.0, float(t_eval[-1])), np.log(mu0[1:]), method="Radau",
                    t_eval=t_eval, rtol=1e-10, atol=1e-12)
    if not sol.success:
        # every truncation of the hierarchy has unstable modes; report, don't mask
        raise InstabilityError(f"moment hierarchy (n_max={N}, {closure} closure) diverged "
                               f"before t={t_eval[-1]:g}: {sol.message}")
    return np.exp(np.vstack([np.zeros(t_eval.size), sol.y]).T)


def equilibrium_recursion(lam, w21, w22, mu1, n_max):
    """Equilibrium moments ``mu_0 = 1, mu_1, ..., mu_n_max`` from the recursion."""
    _check_params(lam, w21, w22)
    mu = np.empty(n_max + 1)
    mu[0] = 1.0
    mu[1] = mu1
    for n in range(1, n_max):
        mu[n + 1] = equilibrium_ratio(lam, w21, w22, n) * mu[n]
    return MomentVector(mu)


@dataclass
class TailComparison:
    k1: float
    k2: float
    log_w21: float
    lognormal_sigma2: float
    residual: float
    n_range: tuple


def lognormal_tail_compare(moments, lam, w21, n_lo=1, n_hi=None):
    """Fit ``mu_{n+1} / mu_n = k1 exp(n k2)`` on ``n in [n_lo, n_hi]``.

    ``k2`` is to be compared with ``log w21`` (the asymptotic slope of the
    equilibrium recursion) and with ``sigma**2`` of the lognormal that matches
    ``mu_1`` and ``mu_2``.
    """
    mu = np.asarray(getattr(moments, "mu", moments), dtype=float)
    if n_hi is None:
        n_hi = mu.size - 2
    n = np.arange(n_lo, n_hi + 1)
    y = np.log(mu[n + 1] / mu[n])
    X = np.vstack([np.ones_like(n, dtype=float), n]).T
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.sqrt(np.mean((X @ coef - y) ** 2)))
    sigma2 = math.log(mu[2] / mu[1] ** 2 * mu[0])
    return TailComparison(math.exp(coef[0]), float(coef[1]), math.log(w21), sigma2, resid,
                          (n_lo, n_hi))


def write_density_csv(density, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "f"])
        for r, f in zip(density.r, density.f):
            w.writerow([repr(float(r)), repr(float(f))])


def write_moments_csv(times, moments, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "n", "mu"])
        for t, row in zip(times, moments):
            for n, m in enumerate(row):
                w.writerow([repr(float(t)), n, repr(float(m))])
