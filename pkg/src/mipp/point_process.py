"""Grid Monte Carlo engine for multiplicatively interacting point processes.

Each unit ``a`` fires in a grid step of length ``dt`` with probability
``1 - exp(-rate_a * dt)``.  Every event of unit ``a'`` multiplies the rate of
unit ``a`` by ``w[a, a'] = exp(log_weights[a, a'])`` from the next step on.

Trials are simulated in batches by a compiled kernel.  Each trial draws its
uniforms from its own generator, seeded from ``(seed, trial_index)``, so a
trial's outcome does not depend on batching, worker count or execution order.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ExplosionError

__all__ = [
    "PURE_POISSON_INPUT",
    "TRANSIENT_INPUT",
    "RECURRENT",
    "EXPLOSION_LIMIT",
    "Network",
    "WarmUp",
    "SimConfig",
    "SpikeRecord",
    "population_tags",
    "event_probability",
    "step",
    "trial_rng",
    "simulate_trial",
    "simulate_ensemble",
    "count_process",
    "write_events_csv",
    "write_rates_csv",
    "read_events_csv",
    "read_rates_csv",
]

PURE_POISSON_INPUT = "pure_poisson_input"
TRANSIENT_INPUT = "transient_input"
RECURRENT = "recurrent"

EXPLOSION_LIMIT = 1e12

# uniforms per chunk handed to the kernel (bounds memory per batch)
_CHUNK_ELEMENTS = 1 << 21
_BATCH_SIZE = 256


def population_tags(log_weights):
    """Tag every unit as pure Poisson input, transient input or recurrent.

    A unit belongs to the input population when its row of off-diagonal
    log-weights is zero.  Inside it, units with a zero self term are pure
    Poisson inputs; the others are transient inputs.
    """
    L = np.asarray(log_weights, dtype=float)
    tags = []
    for a in range(L.shape[0]):
        off = np.delete(L[a], a)
        if np.any(off != 0.0):
            tags.append(RECURRENT)
        elif L[a, a] == 0.0:
            tags.append(PURE_POISSON_INPUT)
        else:
            tags.append(TRANSIENT_INPUT)
    return tuple(tags)


@dataclass(frozen=True)
class Network:
    """Coupled system definition.

    Parameters
    ----------
    log_weights : array_like, shape (n, n)
        ``log_weights[a, a']`` is the log of the factor applied to the rate of
        unit ``a`` (row, receiver) by an event of unit ``a'`` (column, sender).
    base_rates : array_like, shape (n,)
        Initial rates of all units; the constant rate for pure Poisson inputs.
    """

    log_weights: np.ndarray
    base_rates: np.ndarray
    population_tag: tuple = field(init=False)

    def __post_init__(self):
        L = np.array(self.log_weights, dtype=float)
        r = np.array(self.base_rates, dtype=float).reshape(-1)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValueError(f"log_weights must be square, got shape {L.shape}")
        if L.shape[0] == 0:
            raise ValueError("network needs at least one unit")
        if r.shape != (L.shape[0],):
            raise ValueError(
                f"base_rates has length {r.size}, expected {L.shape[0]}"
            )
        if not np.all(np.isfinite(L)):
            raise ValueError("log_weights must be finite")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise ValueError("base_rates must be finite and nonnegative")
        L.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "log_weights", L)
        object.__setattr__(self, "base_rates", r)
        object.__setattr__(self, "population_tag", population_tags(L))

    @classmethod
    def from_weights(cls, weights, base_rates):
        """Build a network from positive multiplicative weights."""
        w = np.asarray(weights, dtype=float)
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")
        return cls(np.log(w), base_rates)

    @classmethod
    def spi(cls, lam=50.0, w21=1.2, w22=0.01, r0=1.0):
        """Stochastic perfect integrator: Poisson unit 0 drives unit 1."""
        L = np.zeros((2, 2))
        L[1, 0] = math.log(w21)
        L[1, 1] = math.log(w22)
        return cls(L, [lam, r0])

    @property
    def n_units(self):
        return self.log_weights.shape[0]

    @property
    def input_units(self):
        """Indices of the pure Poisson input units."""
        return [a for a, t in enumerate(self.population_tag) if t == PURE_POISSON_INPUT]

    def with_base_rates(self, base_rates):
        return Network(self.log_weights, base_rates)


@dataclass(frozen=True)
class WarmUp:
    """Warm-up phase run before ``t = 0``.

    ``input_rates`` holds one rate per pure Poisson input unit, in unit order.
    Warm-up events are discarded; the rates reached become the ``t = 0`` rates.
    """

    duration: float
    input_rates: tuple

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("warm-up duration must be positive")
        rates = tuple(float(x) for x in np.atleast_1d(self.input_rates))
        if any(x < 0 for x in rates):
            raise ValueError("warm-up input rates must be nonnegative")
        object.__setattr__(self, "input_rates", rates)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-4
    t_end: float = 1.0
    seed: int = 0
    n_trials: int = 1
    rate_sample_stride: int = 100
    warm_up: WarmUp | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end >= self.dt:
            raise ValueError("t_end must be at least dt")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        if int(self.n_trials) < 1:
            raise ValueError("n_trials must be >= 1")
        if int(self.rate_sample_stride) < 1:
            raise ValueError("rate_sample_stride must be >= 1")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))

    def validate_for(self, network):
        """Check the config against a network; warns when ``dt`` is coarse."""
        top = float(network.base_rates.max())
        if self.warm_up is not None:
            inputs = network.input_units
            if len(self.warm_up.input_rates) != len(inputs):
                raise ValueError(
                    f"warm-up gives {len(self.warm_up.input_rates)} input rates, "
                    f"network has {len(inputs)} pure Poisson inputs"
                )
            top = max(top, max(self.warm_up.input_rates, default=0.0))
        if self.dt * top > 0.01:
            warnings.warn(
                f"dt * max rate = {self.dt * top:.3g} > 0.01; the grid Bernoulli "
                "approximation is coarse",
                RuntimeWarning,
                stacklevel=3,
            )


@dataclass
class SpikeRecord:
    """Events and sampled rates of one trial.

    ``events[a]`` holds the sorted event times of unit ``a`` (grid times
    ``k * dt``).  ``rates[i]`` is the rate vector in force during the grid step
    starting at ``rate_times[i]``.
    """

    events: list
    rate_times: np.ndarray
    rates: np.ndarray
    final_rates: np.ndarray
    trial_index: int
    seed_used: int
    dt: float
    t_end: float

    @property
    def n_units(self):
        return len(self.events)

    def counts(self):
        return np.array([len(e) for e in self.events])


def event_probability(rate, dt):
    """Probability that a grid step of length ``dt`` contains an event.

    >>> round(event_probability(50.0, 1e-4), 10)
    0.0049875208
    """
    r = np.asarray(rate, dtype=float)
    if not dt > 0:
        raise ValueError("dt must be positive")
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise ValueError("rate must be nonnegative")
    p = -np.expm1(-r * dt)
    return float(p) if p.ndim == 0 else p


def step(network, state, rng, dt=1e-4):
    """Advance rates by one grid step.

    ``state`` may carry leading batch dimensions; the last axis indexes units.
    Events are drawn from the pre-step rates, then all events of the step
    act on the rates together.

    Returns
    -------
    events : ndarray of bool
    next_state : ndarray
    """
    state = np.asarray(state, dtype=float)
    if np.any(state < 0):
        raise ValueError("rates must be nonnegative")
    p = -np.expm1(-state * dt)
    events = rng.random(state.shape) < p
    increment = events.astype(float) @ network.log_weights.T
    return events, state * np.exp(increment)


def trial_rng(seed, trial_index):
    """Independent generator for one trial, derived from ``(seed, trial_index)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(trial_index),))
    return np.random.Generator(np.random.PCG64(ss))


@njit(cache=True, nogil=True)
def _advance(rates, log_w, dt, uniforms, events, samples, step0, stride, limit, status):
    # rates (B, n) updated in place; uniforms/events (B, C, n);
    # samples (B, S, n) written at global steps divisible by stride (stride > 0)
    B, C, n = uniforms.shape
    fired = np.empty(n, dtype=np.int64)
    for b in range(B):
        if status[b] >= 0:
            continue
        for c in range(C):
            k = step0 + c
            if stride > 0 and k % stride == 0:
                for a in range(n):
                    samples[b, k // stride, a] = rates[b, a]
            m = 0
            for a in range(n):
                p = -math.expm1(-rates[b, a] * dt)
                if uniforms[b, c, a] < p:
                    events[b, c, a] = True
                    fired[m] = a
                    m += 1
                else:
                    events[b, c, a] = False
            if m == 0:
                continue
            for a in range(n):
                s = 0.0
                for j in range(m):
                    s += log_w[a, fired[j]]
                if s != 0.0:
                    rates[b, a] *= math.exp(s)
                    if rates[b, a] > limit:
                        status[b] = k
            if status[b] >= 0:
                break


def _resolve_workers(workers):
    if workers is None:
        env = os.environ.get("MIPP_THREADS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


def _run_phase(rates, L, dt, n_steps, rngs, status, collect, samples, stride):
    """Run ``n_steps`` grid steps for a batch; returns event triples if ``collect``."""
    B, n = rates.shape
    chunk = max(1, min(n_steps, _CHUNK_ELEMENTS // (B * n)))
    steps_l, trial_l, unit_l = [], [], []
    events = np.empty((B, chunk, n), dtype=np.bool_)
    dummy = np.empty((B, 0, n))
    done = 0
    while done < n_steps:
        c = min(chunk, n_steps - done)
        u = np.stack([g.random((c, n)) for g in rngs])
        ev = events[:, :c]
        _advance(rates, L, dt, u, ev, samples if samples is not None else dummy,
                 done, stride if samples is not None else 0, EXPLOSION_LIMIT, status)
        if collect:
            b_idx, c_idx, a_idx = np.nonzero(ev)
            steps_l.append(c_idx.astype(np.int64) + done)
            trial_l.append(b_idx)
            unit_l.append(a_idx)
        if np.any(status >= 0):
            break
        done += c
    if not collect:
        return None
    if not steps_l:
        z = np.empty(0, dtype=np.int64)
        return z, z, z
    return np.concatenate(steps_l), np.concatenate(trial_l), np.concatenate(unit_l)


def _simulate_batch(network, config, trial_indices):
    n = network.n_units
    B = len(trial_indices)
    L = np.ascontiguousarray(network.log_weights)
    rngs = [trial_rng(config.seed, t) for t in trial_indices]
    rates = np.tile(network.base_rates, (B, 1))
    status = np.full(B, -1, dtype=np.int64)

    if config.warm_up is not None:
        inputs = network.input_units
        rates[:, inputs] = config.warm_up.input_rates
        n_wu = int(round(config.warm_up.duration / config.dt))
        _run_phase(rates, L, config.dt, n_wu, rngs, status, False, None, 0)
        _check_status(status, trial_indices, config.dt, -config.warm_up.duration)
        rates[:, inputs] = network.base_rates[inputs]

    K = config.n_steps
    stride = int(config.rate_sample_stride)
    n_samples = K // stride + 1
    samples = np.zeros((B, n_samples, n))
    steps, trials, units = _run_phase(rates, L, config.dt, K, rngs, status, True,
                                      samples, stride)
    _check_status(status, trial_indices, config.dt, 0.0)
    if K % stride == 0:
        samples[:, -1] = rates

    order = np.lexsort((steps, units, trials))
    steps, trials, units = steps[order], trials[order], units[order]
    key = trials * n + units
    bounds = np.searchsorted(key, np.arange(B * n + 1))
    sample_times = np.arange(n_samples) * stride * config.dt
    records = []
    for b, t_idx in enumerate(trial_indices):
        ev = [steps[bounds[b * n + a]:bounds[b * n + a + 1]] * config.dt for a in range(n)]
        records.append(SpikeRecord(
            events=ev,
            rate_times=sample_times.copy(),
            rates=samples[b].copy(),
            final_rates=rates[b].copy(),
            trial_index=int(t_idx),
            seed_used=int(config.seed),
            dt=float(config.dt),
            t_end=K * config.dt,
        ))
    return records


def _check_status(status, trial_indices, dt, t0):
    bad = np.flatnonzero(status >= 0)
    if bad.size:
        b = int(bad[0])
        t = t0 + status[b] * dt
        raise ExplosionError(
            f"rate exceeded {EXPLOSION_LIMIT:g} in trial {trial_indices[b]} at t={t:.6g}",
            trial_index=int(trial_indices[b]),
            time=float(t),
        )


def simulate_trial(network, config, trial_index=0):
    """Simulate a single trial; deterministic in ``(config.seed, trial_index)``."""
    config.validate_for(network)
    return _simulate_batch(network, config, [int(trial_index)])[0]


def simulate_ensemble(network, config, workers=None, batch_size=_BATCH_SIZE):
    """Simulate ``config.n_trials`` independent trials.

    Batches run on a thread pool (``workers`` defaults to ``$MIPP_THREADS`` or
    the CPU count).  The returned list is ordered by trial index.

    Raises
    ------
    ExplosionError
        If any trial diverges; ``trial_index`` names the first such trial.
    """
    config.validate_for(network)
    idx = list(range(int(config.n_trials)))
    batches = [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
    workers = _resolve_workers(workers)
    if workers == 1 or len(batches) == 1:
        parts = [_simulate_batch(network, config, b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _simulate_batch(network, config, b), batches))
    return [rec for part in parts for rec in part]


def count_process(record, unit, t):
    """Number of events of ``unit`` at grid times in ``[0, t]``."""
    if not 0 <= unit < record.n_units:
        raise IndexError(f"unknown unit {unit}")
    if t < 0 or t > record.t_end + 0.5 * record.dt:
        raise ValueError(f"t={t} outside [0, {record.t_end}]")
    # tolerance absorbs rounding of k*dt
    return int(np.searchsorted(record.events[unit], t + 1e-9 * record.dt, side="right"))


def write_events_csv(records, path):
    """Write events as ``trial,unit,time`` rows (time with 9 decimals)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "unit", "time"])
        for rec in records:
            for a, times in enumerate(rec.events):
                for t in times:
                    w.writerow([rec.trial_index, a, f"{t:.9f}"])


def write_rates_csv(records, path):
    """Write sampled rates as ``trial,time,unit,rate`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "time", "unit", "rate"])
        for rec in records:
            for t, row in zip(rec.rate_times, rec.rates):
                for a, r in enumerate(row):
                    w.writerow([rec.trial_index, f"{t:.9f}", a, repr(float(r))])


def read_events_csv(path, n_units=None):
    """Read an events CSV into ``{trial: [times of unit 0, times of unit 1, ...]}``."""
    raw = {}
    top = -1
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["trial", "unit", "time"]:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        for row in reader:
            tr, a = int(row["trial"]), int(row["unit"])
            raw.setdefault(tr, {}).setdefault(a, []).append(float(row["time"]))
            top = max(top, a)
    n = top + 1 if n_units is None else n_units
    return {
        tr: [np.sort(np.array(units.get(a, []), dtype=float)) for a in range(n)]
        for tr, units in sorted(raw.items())
    }


def read_rates_csv(path):
    """Read a rates CSV into ``{trial: (times, rates[n_samples, n_units])}``."""
    raw = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            tr = int(row["trial"])
            raw.setdefault(tr, []).append(
                (float(row["time"]), int(row["unit"]), float(row["rate"]))
            )
    out = {}
    for tr, rows in sorted(raw.items()):
        times = np.unique([r[0] for r in rows])
        n = max(r[1] for r in rows) + 1
        vals = np.zeros((times.size, n))
        pos = {t: i for i, t in enumerate(times)}
        for t, a, v in rows:
            vals[pos[t], a] = v
        out[tr] = (times, vals)
    return out
