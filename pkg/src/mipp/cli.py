"""Command-line entry point and strict config parsing.

A run is described by an INI-style file::

    [run]
    subcommand = simulate
    seed = 7

    [spi]
    lam = 50
    w21 = 1.2
    w22 = 0.01

    [sim]
    dt = 1e-4
    t_end = 4

Matrices are bracketed rows, e.g. ``weights = [[1, 1], [1.2, 0.01]]``.
Unknown sections or keys, duplicates and malformed values are errors that
name the line and the key.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import inspect
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import experiments as ex
from . import inference as inf
from . import point_process as pp
from . import rate_dynamics as rd
from . import spi_distribution as sd
from .errors import ConfigError, MippError

__all__ = ["RunConfig", "parse_config", "format_config", "load_network", "run", "main",
           "SUBCOMMANDS", "SCHEMA"]

SUBCOMMANDS = ("simulate", "ode", "fixed-points", "master", "moments", "fit", "experiment")
FORMATS = ("csv", "json", "both")


# value kinds ---------------------------------------------------------------

def _literal(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise ValueError(f"cannot parse {text!r}") from None


def _number(x):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ValueError(f"expected a number, got {x!r}")
    return float(x)


def _float(text):
    v = _number(_literal(text))
    if not math.isfinite(v):
        raise ValueError("value must be finite")
    return v


def _int(text):
    v = _literal(text)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {text!r}")
    return v


def _vector(text):
    v = _literal(text)
    if not isinstance(v, (list, tuple)):
        raise ValueError("expected a bracketed list of numbers")
    return tuple(_number(x) for x in v)


def _matrix(text):
    v = _literal(text)
    if not isinstance(v, (list, tuple)) or not v or not all(isinstance(r, (list, tuple)) for r in v):
        raise ValueError("expected bracketed rows of numbers")
    rows = tuple(tuple(_number(x) for x in r) for r in v)
    if any(len(r) != len(rows) for r in rows):
        raise ValueError(f"matrix must be square, got {len(rows)} rows of lengths "
                         f"{sorted({len(r) for r in rows})}")
    return rows


def _choice(*opts):
    def parse(text):
        if text not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}")
        return text
    return parse


def _text(text):
    if not text:
        raise ValueError("empty value")
    return text


def _path(text):
    if not os.path.exists(text):
        raise ValueError(f"file {text!r} does not exist")
    return text


def _opt_float(text):
    return None if text == "none" else _float(text)


def _render(v):
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return "[" + ", ".join(_render(x) for x in v) + "]"
    return str(v)


SCHEMA = {
    "run": {"subcommand": _choice(*SUBCOMMANDS), "scenario": _choice(*ex.SCENARIOS),
            "out": _text, "format": _choice(*FORMATS), "seed": _int},
    "network": {"weights": _matrix, "log_weights": _matrix, "weights_file": _path,
                "base_rates": _vector},
    "spi": {"lam": _float, "w21": _float, "w22": _float, "r0": _float},
    "sim": {"dt": _float, "t_end": _float, "n_trials": _int, "rate_sample_stride": _int,
            "warm_up_duration": _float, "warm_up_rates": _vector},
    "ode": {"t_end": _float, "rtol": _float, "y0": _vector, "n_samples": _int},
    "master": {"grid_size": _int, "t_end": _float, "mu": _float, "sigma": _float,
               "dt": _float, "record_every": _float, "n_max": _int},
    "moments": {"n_max": _int, "closure": _choice(*sd.CLOSURES), "t_end": _float,
                "n_samples": _int, "mu0": _vector},
    "fit": {"events": _path, "t_end": _float, "dt": _opt_float, "mask": _matrix,
            "penalty": _float, "tol": _float, "max_iter": _int},
    "experiment": None,  # keys checked against the scenario signature
}


@dataclass
class RunConfig:
    """Validated run description; ``sections`` holds the typed values."""

    subcommand: str
    sections: dict = field(default_factory=dict)

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    @property
    def seed(self):
        return self.get("run", "seed", 0)

    @property
    def out(self):
        return self.get("run", "out", ".")

    @property
    def format(self):
        return self.get("run", "format", "both")

    @property
    def scenario(self):
        return self.get("run", "scenario")

    def set(self, section, key, value):
        self.sections.setdefault(section, {})[key] = value


def _key_lines(text):
    # (section, key) -> line number, for semantic errors
    lines, sec = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            sec = s[1:-1].strip()
            lines.setdefault((sec, None), no)
        elif "=" in s and not raw[:1].isspace():
            lines.setdefault((sec, s.split("=", 1)[0].strip().lower()), no)
    return lines


def _experiment_keys(scenario):
    fn = ex.SCENARIOS[scenario]
    skip = {"seed", "n_trials", "workers"}
    return [p for p in inspect.signature(fn).parameters if p not in skip]


def parse_config(text):
    """Parse and validate config text into a :class:`RunConfig`.

    Raises
    ------
    ConfigError
        With ``line`` and ``key`` set when they are known.
    """
    cp = configparser.ConfigParser(strict=True, interpolation=None, default_section="\0")
    try:
        cp.read_string(text)
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key {e.section}.{e.option}", e.lineno,
                          f"{e.section}.{e.option}") from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", e.lineno, e.section) from None
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("syntax error: key outside of a [section]", e.lineno) from None
    except configparser.ParsingError as e:
        no, line = e.errors[0]
        raise ConfigError(f"syntax error: {line.strip()!r}", no) from None
    lines = _key_lines(text)
    if not cp.has_option("run", "subcommand"):
        raise ConfigError("missing subcommand", lines.get(("run", None)), "run.subcommand")
    sub = cp.get("run", "subcommand")
    cfg = RunConfig(sub if sub in SUBCOMMANDS else "")
    scenario = cp.get("run", "scenario", fallback=None)
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]", lines.get((sec, None)), sec)
        schema = SCHEMA[sec]
        if schema is None:
            if scenario not in ex.SCENARIOS:
                raise ConfigError("[experiment] needs run.scenario",
                                  lines.get((sec, None)), "run.scenario")
            schema = {k: _literal for k in _experiment_keys(scenario)}
        vals = {}
        for key, raw in cp.items(sec):
            where = f"{sec}.{key}"
            if key not in schema:
                raise ConfigError(f"unknown key {where}", lines.get((sec, key)), where)
            try:
                vals[key] = schema[key](raw.strip())
            except ValueError as e:
                raise ConfigError(f"{where}: {e}", lines.get((sec, key)), where) from None
        cfg.sections[sec] = vals
    _validate(cfg, lines)
    return cfg


def _validate(cfg, lines):
    def fail(msg, sec, key=None):
        raise ConfigError(msg, lines.get((sec, key)), f"{sec}.{key}" if key else sec)

    net = cfg.sections.get("network", {})
    given = [k for k in ("weights", "log_weights", "weights_file") if k in net]
    if len(given) > 1:
        fail(f"give only one of {', '.join(given)}", "network", given[1])
    if net and not given:
        fail("network needs weights, log_weights or weights_file", "network")
    if given and "spi" in cfg.sections:
        fail("[network] and [spi] are mutually exclusive", "spi")
    mat = net.get("weights") or net.get("log_weights")
    if mat is not None and "base_rates" in net and len(net["base_rates"]) != len(mat):
        fail(f"base_rates has {len(net['base_rates'])} entries, matrix has {len(mat)} rows",
             "network", "base_rates")
    if cfg.subcommand == "experiment" and not cfg.scenario:
        fail("experiment needs run.scenario", "run", "subcommand")
    need_net = cfg.subcommand in ("simulate", "ode", "fixed-points")
    if need_net and not given and "spi" not in cfg.sections:
        fail(f"{cfg.subcommand} needs a [network] or [spi] section", "run", "subcommand")
    if cfg.subcommand == "fit":
        for k in ("events", "t_end", "mask"):
            if k not in cfg.sections.get("fit", {}):
                fail(f"fit needs fit.{k}", "fit", k)
    for sec, key in (("sim", "dt"), ("sim", "t_end"), ("ode", "t_end"), ("master", "t_end"),
                     ("moments", "t_end"), ("fit", "t_end")):
        v = cfg.get(sec, key)
        if v is not None and not v > 0:
            fail(f"{sec}.{key} must be positive", sec, key)
    if cfg.seed is not None and cfg.seed < 0:
        fail("run.seed must be a nonnegative integer", "run", "seed")


def format_config(cfg):
    """Canonical text for ``cfg``; parsing it yields an equal config."""
    out = []
    order = ["run"] + [s for s in SCHEMA if s != "run" and s in cfg.sections]
    for sec in order:
        vals = dict(cfg.sections.get(sec, {}))
        if sec == "run":
            vals["subcommand"] = cfg.subcommand
        if not vals:
            continue
        out.append(f"[{sec}]")
        keys = list(SCHEMA[sec]) if SCHEMA[sec] else sorted(vals)
        for k in keys:
            if k in vals:
                v = vals[k]
                out.append(f"{k} = {repr(v) if SCHEMA[sec] is None else _render(v)}")
        out.append("")
    return "\n".join(out)


# network construction ------------------------------------------------------

def _read_matrix_file(path):
    with open(path) as fh:
        text = fh.read().strip()
    if text.startswith("["):
        return np.array(_matrix(text))
    rows = [[float(x) for x in line.replace(",", " ").split()]
            for line in text.splitlines() if line.strip()]
    m = np.array(rows)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError(f"{path}: matrix must be square", key="network.weights_file")
    return m


def load_network(cfg):
    """Network from ``[network]`` (multiplicative or log weights) or ``[spi]``."""
    if "spi" in cfg.sections:
        s = cfg.sections["spi"]
        return pp.Network.spi(s.get("lam", 50.0), s.get("w21", 1.2), s.get("w22", 0.01),
                              s.get("r0", 1.0))
    net = cfg.sections.get("network")
    if not net:
        raise ConfigError("no network given", key="network")
    if "log_weights" in net:
        L = np.array(net["log_weights"])
    else:
        W = np.array(net["weights"]) if "weights" in net else _read_matrix_file(net["weights_file"])
        if np.any(W <= 0):
            raise ConfigError("multiplicative weights must be positive", key="network.weights")
        L = np.log(W)
    rates = net.get("base_rates", (1.0,) * L.shape[0])
    if len(rates) != L.shape[0]:
        raise ConfigError("base_rates length does not match the matrix", key="network.base_rates")
    return pp.Network(L, rates)


def _spi_params(cfg):
    s = cfg.sections.get("spi", {})
    return s.get("lam", 50.0), s.get("w21", 1.2), s.get("w22", 0.01), s.get("r0", 1.0)


def _sim_config(cfg, network):
    s = cfg.sections.get("sim", {})
    warm = None
    if "warm_up_duration" in s:
        warm = pp.WarmUp(s["warm_up_duration"], s.get("warm_up_rates", ()))
    return pp.SimConfig(dt=s.get("dt", 1e-4), t_end=s.get("t_end", 1.0), seed=cfg.seed,
                        n_trials=s.get("n_trials", 1),
                        rate_sample_stride=s.get("rate_sample_stride", 100), warm_up=warm)


# subcommands ---------------------------------------------------------------

def _path_for(cfg, name):
    return os.path.join(cfg.out, name)


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return path


def _want(cfg, kind):
    return cfg.format in (kind, "both")


def _cmd_simulate(cfg):
    net = load_network(cfg)
    sc = _sim_config(cfg, net)
    sc.validate_for(net)
    recs = pp.simulate_ensemble(net, sc)
    out = []
    if _want(cfg, "csv"):
        pp.write_events_csv(recs, _path_for(cfg, f"events_{cfg.seed}.csv"))
        pp.write_rates_csv(recs, _path_for(cfg, f"rates_{cfg.seed}.csv"))
        out += [_path_for(cfg, f"events_{cfg.seed}.csv"), _path_for(cfg, f"rates_{cfg.seed}.csv")]
    if _want(cfg, "json"):
        counts = np.array([r.counts() for r in recs])
        out.append(_write_json(_path_for(cfg, f"simulate_{cfg.seed}.json"), {
            "schema_version": 1, "seed": cfg.seed, "n_trials": sc.n_trials, "dt": sc.dt,
            "t_end": sc.t_end, "mean_counts": counts.mean(axis=0).tolist(),
            "mean_final_rates": np.mean([r.final_rates for r in recs], axis=0).tolist()}))
    return out


def _cmd_ode(cfg):
    net = load_network(cfg)
    sys_ = rd.RateSystem.from_network(net)
    o = cfg.sections.get("ode", {})
    y0 = np.array(o["y0"]) if "y0" in o else sys_.initial_state(net)
    t_end = o.get("t_end", 5.0)
    t_eval = np.linspace(0.0, t_end, o.get("n_samples", 501))
    traj = rd.integrate(sys_, y0, t_end, rtol=o.get("rtol", 1e-8), t_eval=t_eval)
    traj.units = sys_.recurrent
    out = []
    if _want(cfg, "csv"):
        traj.to_csv(_path_for(cfg, "ode.csv"))
        out.append(_path_for(cfg, "ode.csv"))
    if _want(cfg, "json"):
        out.append(_write_json(_path_for(cfg, "ode.json"), {
            "schema_version": 1, "units": list(sys_.recurrent), "t_end": t_end,
            "final": traj.values[-1].tolist(), "n_steps": traj.n_steps,
            "method": traj.method}))
    return out


def _cmd_fixed_points(cfg):
    net = load_network(cfg)
    sys_ = rd.RateSystem.from_network(net)
    reps = rd.fixed_points(sys_)
    path = _path_for(cfg, "fixed_points.json")
    with open(path, "w") as fh:
        fh.write(rd.fixed_points_json(
            reps, units=list(sys_.recurrent),
            singular_active_sets=[list(s) for s in rd.singular_active_sets(sys_)]))
        fh.write("\n")
    return [path]


def _cmd_master(cfg):
    lam, w21, w22, r0 = _spi_params(cfg)
    m = cfg.sections.get("master", {})
    r = sd.default_grid(lam, w21, w22, m.get("grid_size", 4096))
    dens = sd.lognormal_density(r, m.get("mu", math.log(r0)), m.get("sigma", 0.05))
    run_ = sd.evolve_master(dens, lam, w21, w22, m.get("t_end", 10.0),
                            dt=m.get("dt"), n_max=m.get("n_max", 3),
                            record_every=m.get("record_every", 1.0))
    out = []
    if _want(cfg, "csv"):
        sd.write_density_csv(run_.density, _path_for(cfg, "density.csv"))
        sd.write_moments_csv(run_.times, run_.moments, _path_for(cfg, "master_moments.csv"))
        out += [_path_for(cfg, "density.csv"), _path_for(cfg, "master_moments.csv")]
    if _want(cfg, "json"):
        out.append(_write_json(_path_for(cfg, "master.json"), {
            "schema_version": 1, "t": run_.density.t, "mass": run_.density.mass(),
            "mean": run_.density.mean(), "mass_drift_rate": run_.mass_drift_rate,
            "dt": run_.dt, "n_steps": run_.n_steps,
            "equilibrium_mean": rd.spi_equilibrium(lam, math.log(w21), math.log(w22))}))
    return out


def _cmd_moments(cfg):
    lam, w21, w22, r0 = _spi_params(cfg)
    m = cfg.sections.get("moments", {})
    n_max = m.get("n_max", 2)
    mu0 = np.array(m["mu0"]) if "mu0" in m else r0 ** np.arange(n_max + 1)
    if mu0.size != n_max + 1:
        raise ConfigError(f"moments.mu0 needs {n_max + 1} entries", key="moments.mu0")
    t = np.linspace(0.0, m.get("t_end", 1.0), m.get("n_samples", 11))
    closure = m.get("closure", "lognormal")
    mu = sd.integrate_moments(mu0, lam, w21, w22, t, closure)
    out = []
    if _want(cfg, "csv"):
        sd.write_moments_csv(t, mu, _path_for(cfg, "moments.csv"))
        out.append(_path_for(cfg, "moments.csv"))
    if _want(cfg, "json"):
        rec = sd.equilibrium_recursion(lam, w21, w22,
                                       rd.spi_equilibrium(lam, math.log(w21), math.log(w22)),
                                       n_max)
        out.append(_write_json(_path_for(cfg, "moments.json"), {
            "schema_version": 1, "closure": closure,
            "t": t.tolist(), "mu": mu.tolist(), "equilibrium_recursion": rec.mu.tolist()}))
    return out


def _cmd_fit(cfg):
    f = cfg.sections["fit"]
    data = pp.read_events_csv(f["events"], n_units=len(f["mask"]))
    dt = f.get("dt", None)
    recs = [(data[k], f["t_end"], dt) for k in sorted(data)]
    prob = inf.FitProblem(recs, np.array(f["mask"]) != 0, penalty=f.get("penalty", 0.0),
                          tol=f.get("tol", 1e-8), max_iter=f.get("max_iter", 200))
    res = inf.fit(prob)
    path = _path_for(cfg, "fit.json")
    with open(path, "w") as fh:
        fh.write(res.to_json(n_records=len(recs)))
        fh.write("\n")
    return [path]


def _cmd_experiment(cfg):
    kw = dict(cfg.sections.get("experiment", {}))
    fn = ex.SCENARIOS[cfg.scenario]
    params = inspect.signature(fn).parameters
    kw["seed"] = cfg.seed
    n = cfg.get("sim", "n_trials")
    if n is not None and "n_trials" in params:
        kw["n_trials"] = n
    for k in ("dt", "t_end"):
        v = cfg.get("sim", k)
        if v is not None and k in params:
            kw[k] = v
    rep = fn(**kw)
    return rep.write(cfg.out, cfg.seed, cfg.format)


_COMMANDS = {"simulate": _cmd_simulate, "ode": _cmd_ode, "fixed-points": _cmd_fixed_points,
             "master": _cmd_master, "moments": _cmd_moments, "fit": _cmd_fit,
             "experiment": _cmd_experiment}


def run(cfg, stdout=None):
    """Execute ``cfg``; returns the list of written artifact paths."""
    stdout = sys.stdout if stdout is None else stdout
    os.makedirs(cfg.out, exist_ok=True)
    paths = _COMMANDS[cfg.subcommand](cfg)
    for p in paths:
        print(f"{cfg.subcommand}: wrote {p}", file=stdout)
    return paths


def _error_json(exc):
    doc = {"error": type(exc).__name__, "message": str(exc)}
    for k in ("line", "key", "trial_index", "time"):
        v = getattr(exc, k, None)
        if v is not None:
            doc[k] = v
    return json.dumps(doc)


def _parser():
    p = argparse.ArgumentParser(prog="mipp", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", nargs="?", choices=SUBCOMMANDS,
                   help="overrides run.subcommand")
    p.add_argument("scenario", nargs="?", help="scenario id for 'experiment'")
    p.add_argument("--config", help="config file")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    p.add_argument("--trials", type=int, help="overrides sim.n_trials")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=FORMATS)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        text = ""
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        if args.subcommand:
            # command-line subcommand wins; splice it into [run]
            extra = f"[run]\nsubcommand = {args.subcommand}\n"
            if args.scenario:
                extra += f"scenario = {args.scenario}\n"
            text = _merge_run(text, extra)
        cfg = parse_config(text)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer", key="run.seed")
            cfg.set("run", "seed", args.seed)
        if args.trials is not None:
            if args.trials < 1:
                raise ConfigError("--trials must be positive", key="sim.n_trials")
            cfg.set("sim", "n_trials", args.trials)
        if args.out:
            cfg.set("run", "out", args.out)
        if args.format:
            cfg.set("run", "format", args.format)
        run(cfg)
    except (MippError, OSError, ValueError) as e:
        print(_error_json(e), file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1
    return 0


def _merge_run(text, extra):
    cp = configparser.ConfigParser(strict=False, interpolation=None, default_section="\0")
    try:
        cp.read_string(text)
    except configparser.Error:
        return text  # let parse_config report the syntax error
    if not cp.has_section("run"):
        return extra + "\n" + text
    body = [ln for ln in text.splitlines()]
    out, in_run = [], False
    keys = {ln.split("=", 1)[0].strip() for ln in extra.splitlines()[1:] if "=" in ln}
    for ln in body:
        s = ln.strip()
        if s.startswith("[") and s.endswith("]"):
            in_run = s[1:-1].strip() == "run"
            out.append(ln)
            if in_run:
                out.extend(extra.splitlines()[1:])
            continue
        if in_run and "=" in s and s.split("=", 1)[0].strip().lower() in keys:
            continue
        out.append(ln)
    return "\n".join(out) + "\n"
