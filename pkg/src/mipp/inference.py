"""Maximum-likelihood estimation of log-weights and initial rates.

The log rate of unit ``a`` is linear in the parameters,

    log r_a(t) = log r_a(0) + sum_a' l[a, a'] N_a'(t-),

so the point-process log-likelihood

    sum_a [ sum_j log r_a(t_j) - int_0^T r_a(s) ds ]

is concave in ``(log r(0), l)``.  Between events the rate is constant, which
makes the integral an exact finite sum over segments.

Records with a grid step ``dt`` are treated like the simulator does: an event
in the step starting at ``t`` changes the rates from ``t + dt`` on, and events
in the same step do not see each other.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = ["FitProblem", "FitResult", "log_likelihood", "gradient", "hessian", "fit"]


@dataclass
class _Segments:
    # rate is constant on segment s with counts N[s] and length length[s]
    N: np.ndarray  # (S, n)
    length: np.ndarray  # (S,)
    event_counts: list  # per unit: (count_a, n) counts seen at each event of a
    n_events: np.ndarray  # (n,)


def _segments(events, t_end, dt):
    n = len(events)
    for a, ev in enumerate(events):
        ev = np.asarray(ev, dtype=float)
        tol = 0.5 * dt if dt else 0.0
        if ev.size and (ev.min() < -tol or ev.max() > t_end + tol):
            raise DataError(f"unit {a} has events outside [0, {t_end}]")
    if dt:
        K = int(round(t_end / dt))
        steps = [np.rint(np.asarray(ev) / dt).astype(np.int64) for ev in events]
        changes = [s + 1 for s in steps]
        end = K
    else:
        steps = [np.asarray(ev, dtype=float) for ev in events]
        changes = steps
        end = float(t_end)
    allc = np.concatenate(changes) if changes else np.empty(0)
    units = np.concatenate([np.full(len(c), a) for a, c in enumerate(changes)]) \
        if changes else np.empty(0, dtype=int)
    order = np.argsort(allc, kind="stable")
    allc, units = allc[order], units[order]
    inside = allc < end
    allc, units = allc[inside], units[inside]
    # segment boundaries at each distinct change point
    bps, first = np.unique(allc, return_index=True)
    starts = np.concatenate(([0], bps))
    ends = np.concatenate((bps, [end]))
    S = starts.size
    inc = np.zeros((S, n))
    seg_of_change = np.searchsorted(bps, allc) + 1
    np.add.at(inc, (seg_of_change, units), 1.0)
    N = np.cumsum(inc, axis=0)
    length = (ends - starts).astype(float) * (dt if dt else 1.0)
    ev_counts = []
    for a in range(n):
        # grid: event in step k sees changes at steps <= k; continuous: < t
        side = "right" if dt else "left"
        idx = np.maximum(np.searchsorted(starts, steps[a], side=side) - 1, 0)
        ev_counts.append(N[idx])
    return _Segments(N, length, ev_counts, np.array([len(e) for e in events], dtype=float))


@dataclass
class FitProblem:
    """Data, free parameters and optimiser settings for a likelihood fit.

    Parameters
    ----------
    records : list
        :class:`~mipp.point_process.SpikeRecord` objects, or ``(events, t_end)`` /
        ``(events, t_end, dt)`` tuples.  ``dt=None`` selects the continuous-time
        convention.
    mask : array_like of bool, shape (n, n)
        Free entries of the log-weight matrix.
    rate_mask : array_like of bool, shape (n,)
        Free initial log-rates; all free by default.
    initial_log_weights, initial_log_rates :
        Starting point; entries outside the masks stay fixed at these values.
    penalty : float
        Optional quadratic penalty ``penalty * sum(l_free**2)``.
    """

    records: list
    mask: np.ndarray
    rate_mask: np.ndarray | None = None
    initial_log_weights: np.ndarray | None = None
    initial_log_rates: np.ndarray | None = None
    penalty: float = 0.0
    tol: float = 1e-8
    max_iter: int = 200
    _segs: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        n = self.mask.shape[0]
        if self.mask.shape != (n, n):
            raise ValueError("mask must be square")
        self.rate_mask = np.ones(n, bool) if self.rate_mask is None \
            else np.asarray(self.rate_mask, dtype=bool)
        if self.initial_log_weights is None:
            self.initial_log_weights = np.zeros((n, n))
        self.initial_log_weights = np.array(self.initial_log_weights, dtype=float)
        data = [self._unpack(r) for r in self.records]
        if self.initial_log_rates is None:
            T = sum(d[1] for d in data)
            counts = sum(np.array([len(e) for e in d[0]], float) for d in data)
            self.initial_log_rates = np.log(np.maximum(counts, 0.5) / T)
        self.initial_log_rates = np.array(self.initial_log_rates, dtype=float)
        if self.mask.sum() + self.rate_mask.sum() == 0:
            raise ValueError("no free parameters")
        for events, _, _ in data:
            if len(events) != n:
                raise ValueError(f"record has {len(events)} units, mask has {n}")
        self._segs = [_segments(*d) for d in data]

    @staticmethod
    def _unpack(rec):
        if hasattr(rec, "events"):
            return rec.events, rec.t_end, rec.dt
        if len(rec) == 2:
            return rec[0], rec[1], None
        return rec[0], rec[1], rec[2]

    @property
    def n_units(self):
        return self.mask.shape[0]

    @property
    def n_free(self):
        return int(self.mask.sum() + self.rate_mask.sum())

    def pack(self, log_weights, log_rates):
        return np.concatenate([np.asarray(log_weights)[self.mask], np.asarray(log_rates)[self.rate_mask]])

    def unpack(self, theta):
        L = self.initial_log_weights.copy()
        k = int(self.mask.sum())
        L[self.mask] = theta[:k]
        lr = self.initial_log_rates.copy()
        lr[self.rate_mask] = theta[k:]
        return L, lr

    def initial(self):
        return self.pack(self.initial_log_weights, self.initial_log_rates)


def _per_unit(problem, theta, order):
    """Value, gradient blocks and Hessian blocks for each receiving unit."""
    L, lr = problem.unpack(theta)
    n = problem.n_units
    val = 0.0
    gL = np.zeros((n, n))
    gr = np.zeros(n)
    H = np.zeros((n, n + 1, n + 1)) if order > 1 else None
    for seg in problem._segs:
        logr = lr[None, :] + seg.N @ L.T  # (S, n)
        with np.errstate(over="ignore"):
            rate = np.exp(logr)
        integ = rate * seg.length[:, None]  # (S, n)
        for a in range(n):
            ec = seg.event_counts[a]
            ev_log = lr[a] * seg.n_events[a] + float(ec.sum(axis=0) @ L[a])
            val += ev_log - float(integ[:, a].sum())
            if order > 0:
                gL[a] += ec.sum(axis=0) - integ[:, a] @ seg.N
                gr[a] += seg.n_events[a] - integ[:, a].sum()
            if order > 1:
                X = np.hstack([seg.N, np.ones((seg.N.shape[0], 1))])
                H[a] -= (X * integ[:, a:a + 1]).T @ X
    if problem.penalty:
        free = L[problem.mask]
        val -= problem.penalty * float(free @ free)
        gL -= 2 * problem.penalty * np.where(problem.mask, L, 0.0)
    return val, gL, gr, H


def log_likelihood(problem, theta):
    """Log-likelihood (minus the optional penalty) at free parameters ``theta``."""
    val = _per_unit(problem, np.asarray(theta, dtype=float), 0)[0]
    return val if np.isfinite(val) else -np.inf


def gradient(problem, theta):
    """Exact gradient with respect to the free parameters."""
    _, gL, gr, _ = _per_unit(problem, np.asarray(theta, dtype=float), 1)
    return problem.pack(gL, gr)


def hessian(problem, theta):
    """Exact Hessian with respect to the free parameters (negative semidefinite)."""
    n = problem.n_units
    _, _, _, H = _per_unit(problem, np.asarray(theta, dtype=float), 2)
    # free parameter -> (receiving unit, position in that unit's block)
    pos = [(a, b) for a in range(n) for b in range(n) if problem.mask[a, b]]
    pos += [(a, n) for a in range(n) if problem.rate_mask[a]]
    m = len(pos)
    out = np.zeros((m, m))
    for i, (a, p) in enumerate(pos):
        for j, (c, q) in enumerate(pos):
            if a == c:
                out[i, j] = H[a, p, q]
    if problem.penalty:
        k = int(problem.mask.sum())
        out[np.arange(k), np.arange(k)] -= 2 * problem.penalty
    return out


def _gradient_scale(problem):
    # magnitude of the event term of each gradient entry; makes the
    # convergence test insensitive to the size of the counts
    n = problem.n_units
    sL = np.ones((n, n))
    sr = np.ones(n)
    for seg in problem._segs:
        for a in range(n):
            sL[a] += seg.event_counts[a].sum(axis=0)
            sr[a] += seg.n_events[a]
    return problem.pack(sL, sr)


@dataclass
class FitResult:
    log_weights: np.ndarray
    log_rates: np.ndarray
    log_likelihood: float
    gradient_norm: float
    converged: bool
    n_iter: int
    mask: np.ndarray
    rate_mask: np.ndarray

    def to_json(self, **extra):
        doc = {
            "schema_version": 1,
            "log_weights": self.log_weights.tolist(),
            "log_rates": self.log_rates.tolist(),
            "mask": self.mask.astype(bool).tolist(),
            "rate_mask": self.rate_mask.astype(bool).tolist(),
            "log_likelihood": self.log_likelihood,
            "gradient_norm": self.gradient_norm,
            "converged": self.converged,
            "n_iter": self.n_iter,
            **extra,
        }
        return json.dumps(doc, indent=2)


def fit(problem):
    """Maximise the log-likelihood by damped Newton ascent with backtracking.

    Falls back to a gradient step when the Newton direction is not an ascent
    direction.  ``gradient_norm`` is the largest gradient entry scaled by the
    size of its event term; convergence means it dropped below
    ``problem.tol``.  Hitting ``max_iter`` returns ``converged=False``.
    """
    theta = problem.initial()
    scale = _gradient_scale(problem)
    f = log_likelihood(problem, theta)
    if not np.isfinite(f):
        raise DataError("log-likelihood is not finite at the initial guess")
    g = gradient(problem, theta)
    gnorm = float(np.max(np.abs(g) / scale))
    it = 0
    while gnorm > problem.tol and it < problem.max_iter:
        it += 1
        H = hessian(problem, theta)
        try:
            d = np.linalg.solve(H - 1e-12 * np.abs(np.diag(H)).max() * np.eye(H.shape[0]), -g)
        except np.linalg.LinAlgError:
            d = g / scale**2
        slope = float(g @ d)
        if not np.isfinite(slope) or slope <= 0:
            d = g / scale**2
            slope = float(g @ d)
        t = 1.0
        while True:
            cand = theta + t * d
            fc = log_likelihood(problem, cand)
            if fc >= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-20:
                break
        if t < 1e-20:
            break
        theta, f = cand, fc
        g = gradient(problem, theta)
        gnorm = float(np.max(np.abs(g) / scale))
    L, lr = problem.unpack(theta)
    return FitResult(L, lr, float(f), gnorm, bool(gnorm <= problem.tol), it,
                     problem.mask.copy(), problem.rate_mask.copy())
