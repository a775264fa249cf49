"""Command line runner binding the modules together.

Subcommands: kernel | mittag | gronwall | moments | simulate | psi | density |
smallball | t0 | holder.  Each takes ``--config FILE`` (JSON), ``--seed``,
``--threads`` and ``--out``.  Outputs are CSV (or a columnar binary for
``simulate --format binary``) and embed the tool version and the digest of the
validated config; identical digest and seed reproduce identical bytes.

Exit codes: 0 ok, 1 compute error, 2 config error.
"""

import argparse
import json
import os
import struct
import sys

import numpy as np

from . import __version__
from ._backend import BACKEND
from .config import (
    build_grid,
    build_measure,
    build_params,
    build_rho,
    config_digest,
    validate_config,
)
from .density_stats import (
    DetSigma,
    FieldStats,
    Infimum,
    IncrementNorms,
    PointValues,
    SimulationRun,
    holder_exponent,
    kde,
    run_ensemble,
    small_ball,
    estimate_t0,
)
from .errors import ConfigError, FracheatError
from .localization import PsiSpec, c_norm, psi
from .moment_kernel import (
    moment_kernel_heat_closed,
    moment_kernel_series,
)
from .noise_initial import drift_field
from .special_fn import (
    MittagParams,
    ResolventSpec,
    contraction_solve,
    gronwall_solve,
    mittag_leffler,
)
from .spde_solver import SchemeOptions
from .stable_kernel import (
    build_kernel_table,
    default_kernel_table,
    default_table_geometry,
    kernel_value,
    save_table,
    tail_envelope,
)

_BIN_MAGIC = b"FHCB"
_BIN_VERSION = 1


def _write_csv(path, header_lines, columns, rows):
    lines = []
    for h in header_lines:
        lines.append(f"# {h}")
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _write_binary(path, digest, columns, arrays):
    """Columnar binary: magic, version, digest, column directory, f8 payloads."""
    n_rows = len(arrays[0]) if arrays else 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", _BIN_MAGIC, _BIN_VERSION))
        dig = digest.encode()
        fh.write(struct.pack("<I", len(dig)))
        fh.write(dig)
        fh.write(struct.pack("<IQ", len(columns), n_rows))
        for name in columns:
            enc = name.encode()
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_binary(path):
    """Reader for the columnar binary format (returns digest, dict of columns)."""
    with open(path, "rb") as fh:
        magic, version = struct.unpack("<4sI", fh.read(8))
        if magic != _BIN_MAGIC or version != _BIN_VERSION:
            raise FracheatError("not a fracheat columnar file")
        (dlen,) = struct.unpack("<I", fh.read(4))
        digest = fh.read(dlen).decode()
        n_cols, n_rows = struct.unpack("<IQ", fh.read(12))
        names = []
        for _ in range(n_cols):
            (ln,) = struct.unpack("<I", fh.read(4))
            names.append(fh.read(ln).decode())
        cols = {}
        for name in names:
            cols[name] = np.frombuffer(fh.read(8 * n_rows), dtype="<f8").copy()
    return digest, cols


def _header(cfg_digest, seed=None):
    out = [f"fracheat_version={__version__}", f"config_digest={cfg_digest}",
           f"backend={BACKEND}"]
    if seed is not None:
        out.append(f"seed={seed}")
    return out


def _linspace(rng):
    return np.linspace(rng["min"], rng["max"], int(rng["count"]))


def _table_for(cfg):
    params = build_params(cfg)
    if cfg.get("x_half_width") or cfg.get("n_points") or cfg.get("fft_size"):
        x_hw, n_points, fft_size = default_table_geometry(params)
        x_hw = cfg.get("x_half_width") or x_hw
        n_points = cfg.get("n_points") or n_points
        fft_size = cfg.get("fft_size") or fft_size
        return build_kernel_table(params, x_hw, n_points, fft_size)
    return default_kernel_table(params)


def _cmd_kernel(cfg, args):
    table = _table_for(cfg)
    if cfg.get("cache"):
        save_table(table, cfg["cache"])
    xs = _linspace(cfg["x"])
    rows = []
    for t in cfg["t_list"]:
        g = kernel_value(table, t, xs)
        env = tail_envelope(table, t, xs)
        rows.extend((t, x, gi, ei) for x, gi, ei in zip(xs, g, env))
    _write_csv(args.out, _header(args.digest), ["t", "x", "G", "envelope"], rows)
    return 0


def _cmd_mittag(cfg, args):
    value = mittag_leffler(MittagParams(cfg["a"], cfg["b"]), cfg["z"])
    _write_csv(args.out, _header(args.digest), ["a", "b", "z", "value"],
               [(cfg["a"], cfg["b"], cfg["z"], value)])
    return 0


def _cmd_gronwall(cfg, args):
    spec = ResolventSpec(cfg["alpha"], cfg["lambda"])
    t = np.linspace(0.0, cfg["T"], cfg["n_steps"] + 1)
    beta_cfg = cfg["beta"]
    if beta_cfg["kind"] == "const":
        beta = np.full_like(t, beta_cfg["value"])
    else:
        beta = np.asarray(beta_cfg["values"], dtype=float)
        if beta.shape != t.shape:
            raise ConfigError(["beta.values: length must equal n_steps + 1"])
    if cfg["mode"] == "standard":
        f = gronwall_solve(spec, t, beta)
    else:
        if cfg.get("epsilon") is None:
            raise ConfigError(["epsilon: required for window mode"])
        f = contraction_solve(spec, cfg["T"], cfg["epsilon"], t, beta)
    _write_csv(args.out, _header(args.digest), ["t", "f"], list(zip(t, f)))
    return 0


def _cmd_moments(cfg, args):
    params = build_params(cfg)
    from .moment_kernel import SpaceTimeGrid

    grid = SpaceTimeGrid.from_extents(T=cfg["T"], L=cfg["L"], dt=cfg["dt"], dx=cfg["dx"])
    table = None if params.alpha == 2.0 else default_kernel_table(params)
    series, trunc = moment_kernel_series(params, cfg["lambda"], grid, cfg["n_terms"], table)
    rows = []
    for t, x in cfg["probes"]:
        s = series.at(t, x)
        if params.alpha == 2.0:
            c = moment_kernel_heat_closed(cfg["lambda"], t, x)
            rows.append((t, x, s, c, s / c if c else np.nan))
        else:
            rows.append((t, x, s, np.nan, np.nan))
    _write_csv(args.out, _header(args.digest) + [f"truncation_ratio={trunc:.3e}"],
               ["t", "x", "K_series", "K_closed", "ratio"], rows)
    return 0


def _build_run(cfg, table=None):
    params = build_params(cfg)
    grid = build_grid(cfg)
    if table is None:
        table = default_kernel_table(params)
    mu = build_measure(cfg["mu"])
    rho = build_rho(cfg["rho"])
    drift = None
    if cfg.get("drift"):
        dcfg = cfg["drift"]
        n = int(dcfg["n"])
        cn = c_norm(table, n)
        drift = drift_field(n, dcfg["points"], dcfg["z"], grid.T, grid, cn)
    opts = SchemeOptions(positivity_clip=cfg.get("positivity_clip", False),
                         keep_trajectory=False)
    return SimulationRun(params=params, rho=rho, mu=mu, table=table, grid=grid,
                         drift=drift, opts=opts)


def _observable_from(cfg):
    kind = cfg["kind"]
    if kind == "point_values":
        return PointValues(t=cfg["t"], xs=tuple(cfg["xs"]))
    if kind == "infimum":
        return Infimum(t=cfg["t"], window=tuple(cfg["window"]))
    return FieldStats()


def _cmd_simulate(cfg, args):
    run = _build_run(cfg)
    seed = args.seed if args.seed is not None else cfg["seed"]
    if cfg.get("malliavin"):
        m = cfg["malliavin"]
        obs = DetSigma(points=tuple(m["points"]), t=m["t"],
                       window_t=tuple(m["window_t"]), window_x=tuple(m["window_x"]),
                       stride=tuple(int(s) for s in m["stride"]))
        ens = run_ensemble(run, obs, cfg["paths"], seed, n_threads=args.threads,
                           config_digest=args.digest)
        cols = ["path", "det_sigma"]
        d = len(obs.points)
        cols += [f"sigma_{i}{j}" for i in range(d) for j in range(d)]
        rows = [
            [int(p), ens.samples[i]] + list(ens.extra["sigma"][i].ravel())
            for i, p in enumerate(ens.path_indices)
        ]
        _write_csv(args.out, _header(args.digest, seed), cols, rows)
        return 0
    obs = _observable_from(cfg["observable"])
    ens = run_ensemble(run, obs, cfg["paths"], seed, n_threads=args.threads,
                       config_digest=args.digest)
    if isinstance(obs, PointValues):
        cols = ["path"] + [f"u_t{obs.t}_x{x}" for x in obs.xs]
        data = ens.samples
    elif isinstance(obs, Infimum):
        cols = ["path", f"inf_u_t{obs.t}"]
        data = ens.samples[:, None]
    else:
        cols = ["path", "negative_fraction", "clipped_fraction"]
        data = ens.samples
    if cfg["format"] == "binary":
        if not args.out:
            raise ConfigError(["--out is required for binary output"])
        arrays = [ens.path_indices.astype(float)] + [data[:, j] for j in range(data.shape[1])]
        _write_binary(args.out, args.digest, cols, arrays)
        return 0
    rows = [[int(p)] + list(data[i]) for i, p in enumerate(ens.path_indices)]
    _write_csv(args.out, _header(args.digest, seed), cols, rows)
    return 0


def _cmd_psi(cfg, args):
    params = build_params(cfg)
    table = default_kernel_table(params)
    ts = _linspace(cfg["t"])
    xs = _linspace(cfg["x"])
    rows = []
    for n in cfg["n_list"]:
        spec = PsiSpec(n=int(n), table=table, T=cfg["T"], points=tuple(cfg["points"]))
        for t in ts:
            for x in xs:
                val = sum(psi(spec, i, t, x) for i in range(len(spec.points)))
                rows.append((int(n), t, x, val))
    _write_csv(args.out, _header(args.digest), ["n", "t", "x", "Psi"], rows)
    return 0


def _cmd_density(cfg, args):
    run = _build_run(cfg)
    seed = args.seed if args.seed is not None else cfg["seed"]
    obs = _observable_from(cfg["observable"])
    ens = run_ensemble(run, obs, cfg["paths"], seed, n_threads=args.threads,
                       config_digest=args.digest)
    samples = ens.samples if ens.samples.ndim == 1 else ens.samples[:, cfg["component"]]
    est = kde(samples, bandwidth=cfg["bandwidth"])
    rows = [(y, v, args.digest) for y, v in zip(est.grid, est.values)]
    _write_csv(args.out, _header(args.digest, seed) + [f"bandwidth={est.bandwidth:.8g}"],
               ["y", "density", "config_digest"], rows)
    return 0


def _cmd_smallball(cfg, args):
    run = _build_run(cfg)
    seed = args.seed if args.seed is not None else cfg["seed"]
    obs = Infimum(t=cfg["t"], window=tuple(cfg["window"]))
    ens = run_ensemble(run, obs, cfg["paths"], seed, n_threads=args.threads,
                       config_digest=args.digest)
    rows = [
        (eps, p, lo, hi, args.digest)
        for eps, p, lo, hi in small_ball(ens.samples, cfg["eps_list"])
    ]
    _write_csv(args.out, _header(args.digest, seed),
               ["eps", "p", "wilson_lo", "wilson_hi", "config_digest"], rows)
    return 0


def _cmd_t0(cfg, args):
    params = build_params(cfg)
    table = default_kernel_table(params)
    rho = build_rho(cfg["rho"])
    mu = build_measure(cfg["mu"])
    t0 = estimate_t0(rho, mu, table, _linspace(cfg["s_grid"]), _linspace(cfg["y_grid"]),
                     zero_tol=cfg["zero_tol"])
    _write_csv(args.out, _header(args.digest),
               ["t0", "zero_tol", "config_digest"],
               [("inf" if np.isinf(t0) else t0, cfg["zero_tol"], args.digest)])
    return 0


def _cmd_holder(cfg, args):
    run = _build_run(cfg)
    seed = args.seed if args.seed is not None else cfg["seed"]
    obs = IncrementNorms(x=cfg["x"], t_base=cfg["t_base"], lags=tuple(cfg["lags"]))
    ens = run_ensemble(run, obs, cfg["paths"], seed, n_threads=args.threads,
                       config_digest=args.digest)
    fit = holder_exponent(ens.samples, obs.lags)
    rows = [(h, n, args.digest) for h, n in zip(obs.lags, fit["norms"])]
    hdr = _header(args.digest, seed) + [
        f"slope={fit['slope']:.6f}",
        f"slope_ci95=({fit['ci95'][0]:.6f},{fit['ci95'][1]:.6f})",
    ]
    _write_csv(args.out, hdr, ["lag", "increment_l2", "config_digest"], rows)
    return 0


_HANDLERS = {
    "kernel": _cmd_kernel,
    "mittag": _cmd_mittag,
    "gronwall": _cmd_gronwall,
    "moments": _cmd_moments,
    "simulate": _cmd_simulate,
    "psi": _cmd_psi,
    "density": _cmd_density,
    "smallball": _cmd_smallball,
    "t0": _cmd_t0,
    "holder": _cmd_holder,
}


def _parser():
    p = argparse.ArgumentParser(prog="fracheat",
                                description="stochastic fractional heat equation lab")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in _HANDLERS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        sp.add_argument("--threads", type=int, default=None, help="thread budget (overrides env)")
        sp.add_argument("--out", default=None, help="output path (stdout when omitted)")
        if name == "mittag":
            sp.add_argument("--a", type=float)
            sp.add_argument("--b", type=float)
            sp.add_argument("--z", type=float)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
    if args.subcommand == "mittag":
        for key in ("a", "b", "z"):
            val = getattr(args, key)
            if val is not None:
                raw[key] = val
    try:
        cfg = validate_config(args.subcommand, raw)
    except ConfigError as exc:
        for prob in exc.problems:
            print(f"config error: {prob}", file=sys.stderr)
        return 2
    if args.threads is None:
        args.threads = int(os.environ.get("FRACHEAT_THREADS", "1"))
    args.digest = config_digest(cfg)
    try:
        rc = _HANDLERS[args.subcommand](cfg, args)
    except ConfigError as exc:
        for prob in exc.problems:
            print(f"config error: {prob}", file=sys.stderr)
        return 2
    except FracheatError as exc:
        print(f"compute error: {exc}", file=sys.stderr)
        return 1
    print(f"config_digest={args.digest}", file=sys.stderr)
    return rc


if __name__ == "__main__":
    sys.exit(main())
