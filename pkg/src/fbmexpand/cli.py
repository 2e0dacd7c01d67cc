"""Command-line front end.

Settings are merged as: built-in defaults < per-command defaults < ``--config``
JSON file < explicit flags. The merged config is validated before any
computation, and every CSV begins with ``#`` lines echoing it.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .expansion import PAIRINGS, HurstOutOfRange, estimate_cdf
from .fbm import (EmbeddingFailure, FactorizationError, sample_endpoints, sample_paths_cholesky,
                  sample_paths_davies_harte, uniform_grid)
from .model import MODEL_REGISTRY, EllipticityViolation, build_model
from .oracles import GEOMETRIC_MODELS, build_convergence_table, exact_geometric_cdf, geometric_params

EXIT_OK, EXIT_VALIDATION, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("reproduce-fig1", "cdf", "sample-fbm", "check-identities", "convergence")


class ConfigError(ValueError):
    def __init__(self, path: str, reason: str):
        self.path, self.reason = path, reason
        super().__init__(f"invalid config field '{path}': {reason}")


@dataclass
class ZGrid:
    min: float = 5.0
    max: float = 15.0
    count: int = 101
    values: list | None = None      # explicit queries override min/max/count


@dataclass
class RunConfig:
    model: str = "geometric-1d"
    params: dict = field(default_factory=dict)
    hurst: float = 0.4
    t: float = 0.25
    z_grid: ZGrid = field(default_factory=ZGrid)
    order: int = 2
    sampler: str = "sobol"
    n: int = 1 << 20
    replicates: int = 16
    seed: int = 0
    pairing: str = "proof"
    # fBm path commands
    paths: int = 20_000
    m: int = 4096
    method: str = "davies-harte"
    dim: int = 1
    # convergence
    ts: list = field(default_factory=lambda: [0.4, 0.2, 0.1, 0.05])
    z: float | list = 11.0
    # check-identities: whether a refused expansion check fails the run
    refusal: str = "pass"
    # not echoed: they do not change results
    out: str | None = None
    svg: str | None = None
    workers: int | None = None

    def echo(self) -> str:
        d = dataclasses.asdict(self)
        for k in _UNECHOED:
            d.pop(k)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


_UNECHOED = ("out", "svg", "workers")

COMMAND_DEFAULTS = {
    "reproduce-fig1": {"n": 10 ** 6},
    "cdf": {},
    "sample-fbm": {"paths": 1000, "m": 256},
    "check-identities": {},
    "convergence": {},
}


# ---------------------------------------------------------------------------
# config merging and validation

def _merge(cfg: RunConfig, updates: dict, prefix: str = "") -> None:
    names = {f.name for f in dataclasses.fields(cfg)}
    for key, value in updates.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(path, f"unknown field; expected one of {sorted(names)}")
        if key == "z_grid":
            if isinstance(value, list):
                value = {"values": value}
            if not isinstance(value, dict):
                raise ConfigError(path, "must be an object {min, max, count} or a list of queries")
            _merge(cfg.z_grid, value, f"{path}.")
        else:
            setattr(cfg, key, value)


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_real(v) -> bool:
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


def _require(cond: bool, path: str, reason: str) -> None:
    if not cond:
        raise ConfigError(path, reason)


def validate(cfg: RunConfig, command: str) -> None:
    """Raise :class:`ConfigError` naming the first bad field."""
    _require(cfg.model in MODEL_REGISTRY, "model", f"unknown model; choose from {sorted(MODEL_REGISTRY)}")
    _require(isinstance(cfg.params, dict), "params", "must be an object")
    try:
        model = build_model(cfg.model, **cfg.params)
    except (TypeError, ValueError) as exc:
        raise ConfigError("params", str(exc)) from None
    _require(_is_real(cfg.hurst) and 0 < cfg.hurst < 1, "hurst", "must be a real number in (0, 1)")
    _require(_is_real(cfg.t) and cfg.t > 0, "t", "must be a positive real number")
    _require(_is_int(cfg.order) and cfg.order in (0, 1, 2), "order", "must be 0, 1 or 2")
    _require(cfg.sampler in ("sobol", "mc"), "sampler", "must be 'sobol' or 'mc'")
    _require(_is_int(cfg.n) and cfg.n >= 1, "n", "must be a positive integer")
    _require(_is_int(cfg.replicates) and cfg.replicates >= 2, "replicates", "must be an integer >= 2")
    if cfg.sampler == "sobol":
        _require(cfg.n >= cfg.replicates, "n", f"must be at least replicates ({cfg.replicates})")
    _require(_is_int(cfg.seed) and cfg.seed >= 0, "seed", "must be a non-negative integer")
    _require(cfg.pairing in PAIRINGS, "pairing", f"must be one of {list(PAIRINGS)}")
    _require(_is_int(cfg.paths) and cfg.paths >= 2, "paths", "must be an integer >= 2")
    _require(_is_int(cfg.m) and cfg.m >= 1, "m", "must be a positive integer")
    _require(cfg.method in ("cholesky", "davies-harte"), "method", "must be 'cholesky' or 'davies-harte'")
    _require(_is_int(cfg.dim) and cfg.dim >= 1, "dim", "must be a positive integer")
    _require(cfg.refusal in ("pass", "fail"), "refusal", "must be 'pass' or 'fail'")
    _require(cfg.workers is None or (_is_int(cfg.workers) and cfg.workers >= 1),
             "workers", "must be a positive integer")
    zg = cfg.z_grid
    e = model.state_dim
    if zg.values is not None:
        _require(isinstance(zg.values, list) and len(zg.values) > 0, "z_grid.values",
                 "must be a non-empty list")
        for i, q in enumerate(zg.values):
            q_ok = _is_real(q) if e == 1 else (isinstance(q, list) and len(q) == e
                                                and all(_is_real(v) for v in q))
            _require(q_ok, f"z_grid.values[{i}]", f"must be {'a real number' if e == 1 else f'a list of {e} reals'}")
    else:
        _require(e == 1, "z_grid.values", f"model has state dimension {e}; give explicit queries")
        _require(_is_real(zg.min), "z_grid.min", "must be a real number")
        _require(_is_real(zg.max) and zg.max >= zg.min, "z_grid.max", "must be a real number >= min")
        _require(_is_int(zg.count) and zg.count >= 1, "z_grid.count", "must be a positive integer")
    if command == "reproduce-fig1":
        _require(cfg.model in GEOMETRIC_MODELS, "model",
                 f"the exact column needs a closed-form model: {list(GEOMETRIC_MODELS)}")
    if command == "convergence":
        _require(isinstance(cfg.ts, list) and all(_is_real(v) for v in cfg.ts), "ts", "must be a list of reals")
        _require(len(cfg.ts) >= 3, "ts", "at least three time points are needed to fit a slope")
        _require(all(0 < v <= 1 for v in cfg.ts), "ts", "times must lie in (0, 1]")
        _require(all(a > b for a, b in zip(cfg.ts, cfg.ts[1:])), "ts", "times must be strictly decreasing")
        if e == 1:
            _require(_is_real(cfg.z), "z", "must be a real number")
        else:
            _require(isinstance(cfg.z, list) and len(cfg.z) == e and all(_is_real(v) for v in cfg.z),
                     "z", f"must be a list of {e} reals")


def queries(cfg: RunConfig) -> np.ndarray:
    zg = cfg.z_grid
    if zg.values is not None:
        return np.asarray(zg.values, dtype=np.float64)
    return np.linspace(zg.min, zg.max, zg.count)


# ---------------------------------------------------------------------------
# output helpers

def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _header(command: str, cfg: RunConfig) -> list[str]:
    return [f"fbmexpand {__version__} {command}", f"config: {cfg.echo()}"]


def write_table(path, comments, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_table(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    cols = lines[0].strip().split(",")
    data = np.array([[float(v) for v in ln.strip().split(",")] for ln in lines[1:]])
    return cols, data


def write_fig1_svg(csv_path, svg_path) -> None:
    """Line chart of exact, order-0 and order-2 columns, drawn from the CSV only."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols, data = read_table(csv_path)
    col = {c: data[:, i] for i, c in enumerate(cols)}
    with matplotlib.rc_context({"svg.hashsalt": "fbmexpand", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        ax.plot(col["z"], col["exact"], "k-", lw=1.5, label="exact")
        ax.plot(col["z"], col["order0"], "b--", lw=1.2, label="normal approximation")
        ax.plot(col["z"], col["order2"], "r:", lw=1.5, label="expansion")
        ax.set_xlabel("z")
        ax.set_ylabel("P(X_t <= z)")
        ax.legend(loc="upper left")
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)


def _out(cfg: RunConfig, default: str) -> Path:
    return Path(cfg.out if cfg.out is not None else default)


# ---------------------------------------------------------------------------
# commands

def _batch(cfg: RunConfig, d: int):
    return sample_endpoints(d, cfg.n, cfg.sampler, cfg.seed, cfg.replicates)


def _cdf_rows(cfg: RunConfig, model, z: np.ndarray):
    est = estimate_cdf(model, cfg.t, cfg.hurst, z, cfg.order, _batch(cfg, model.noise_dim),
                       cfg.pairing, cfg.workers)
    return est


def cmd_reproduce_fig1(cfg: RunConfig) -> int:
    model = build_model(cfg.model, **cfg.params)
    z = queries(cfg)
    est = _cdf_rows(cfg, model, z)
    x, sigma, mu = geometric_params(model)
    exact = exact_geometric_cdf(x, sigma, cfg.hurst, cfg.t, z, mu)
    vals = np.full((z.size, 3), np.nan)
    ses = np.full((z.size, 3), np.nan)
    vals[:, :cfg.order + 1] = est.values
    ses[:, :cfg.order + 1] = est.std_errors
    rows = np.column_stack([z, exact, vals, ses])
    path = _out(cfg, "fig1.csv")
    svg = Path(cfg.svg) if cfg.svg is not None else path.with_suffix(".svg")
    write_table(path, _header("reproduce-fig1", cfg),
                ["z", "exact", "order0", "order1", "order2", "se0", "se1", "se2"], rows)
    write_fig1_svg(path, svg)
    err = np.abs(vals - exact[:, None]).max(axis=0)
    print(f"wrote {path} and {svg}")
    for k in range(cfg.order + 1):
        print(f"order {k}: max |estimate - exact| = {err[k]:.4e}")
    return EXIT_OK


def cmd_cdf(cfg: RunConfig) -> int:
    model = build_model(cfg.model, **cfg.params)
    z = queries(cfg)
    est = _cdf_rows(cfg, model, z)
    zcols = ["z"] if model.state_dim == 1 else [f"z{i + 1}" for i in range(model.state_dim)]
    zmat = z.reshape(len(z), -1)
    cols = zcols + [f"order{k}" for k in range(cfg.order + 1)] + [f"se{k}" for k in range(cfg.order + 1)]
    path = _out(cfg, "cdf.csv")
    write_table(path, _header("cdf", cfg), cols, np.column_stack([zmat, est.values, est.std_errors]))
    print(f"wrote {path} ({len(z)} queries, n = {est.n})")
    return EXIT_OK


def cmd_sample_fbm(cfg: RunConfig) -> int:
    grid = uniform_grid(cfg.m)
    sampler = sample_paths_cholesky if cfg.method == "cholesky" else sample_paths_davies_harte
    ens = sampler(grid, cfg.dim, cfg.hurst, cfg.paths, cfg.seed, workers=cfg.workers)
    path = _out(cfg, "fbm_paths.csv")
    ens.to_csv(path, _header("sample-fbm", cfg))
    print(f"wrote {path} ({cfg.paths} paths x {cfg.dim} components x {cfg.m} points)")
    return EXIT_OK


def cmd_check_identities(cfg: RunConfig) -> int:
    from .checks import run_all

    results = run_all(cfg.hurst, cfg.paths, cfg.m, cfg.seed)
    failed = []
    for r in results:
        print(r.line())
        if (r.refused and cfg.refusal == "fail") or not r.passed:
            failed.append(r.name)
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def slope_verdict(order: int, slope: float, h: float) -> tuple[bool, str]:
    """Bands: ``H +- 0.2`` (order 0), ``1 - H +- 0.2`` (order 1), ``>= 2H - 0.2`` (order 2)."""
    if not math.isfinite(slope):
        return False, "degenerate fit"
    if order == 0:
        return abs(slope - h) <= 0.2, f"target {h:.3g} +- 0.2"
    if order == 1:
        return abs(slope - (1 - h)) <= 0.2, f"target {1 - h:.3g} +- 0.2"
    return slope >= 2 * h - 0.2, f"target >= {2 * h - 0.2:.3g}"


def cmd_convergence(cfg: RunConfig) -> int:
    model = build_model(cfg.model, **cfg.params)
    table = build_convergence_table(model, cfg.hurst, cfg.ts, cfg.z, range(cfg.order + 1), cfg.n,
                                    cfg.sampler, cfg.seed, cfg.replicates, cfg.t, cfg.pairing,
                                    cfg.workers, cfg.paths, cfg.m)
    path = _out(cfg, "convergence.csv")
    with open(path, "w", newline="") as fh:
        for c in _header("convergence", cfg):
            fh.write(f"# {c}\n")
        fh.write(table.to_csv())
    ok = True
    for k, fit in table.fits.items():
        good, band = slope_verdict(k, fit.slope, cfg.hurst)
        ok &= good
        print(f"order {k}: slope = {fit.slope:.4f} ({band}) {'PASS' if good else 'FAIL'}")
    print(f"wrote {path}")
    return EXIT_OK if ok else EXIT_CHECK


HANDLERS = {
    "reproduce-fig1": cmd_reproduce_fig1,
    "cdf": cmd_cdf,
    "sample-fbm": cmd_sample_fbm,
    "check-identities": cmd_check_identities,
    "convergence": cmd_convergence,
}


# ---------------------------------------------------------------------------
# argument parsing

def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _param(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def build_parser() -> argparse.ArgumentParser:
    d = RunConfig()
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", metavar="PATH", help="JSON file with RunConfig fields")
    g.add_argument("--model", metavar="NAME", help=f"registry model {sorted(MODEL_REGISTRY)} (default {d.model})")
    g.add_argument("--param", metavar="KEY=VALUE", action="append", type=_param,
                   help="model parameter, repeatable; VALUE is parsed as JSON")
    g.add_argument("--hurst", type=float, metavar="F", help=f"Hurst index (default {d.hurst})")
    g.add_argument("--t", type=float, metavar="F", help=f"time horizon (default {d.t})")
    g.add_argument("--order", type=int, choices=(0, 1, 2), help=f"expansion order (default {d.order})")
    g.add_argument("--sampler", choices=("sobol", "mc"), help=f"endpoint sampler (default {d.sampler})")
    g.add_argument("--n", type=int, metavar="INT",
                   help=f"endpoint draws (default {d.n}; reproduce-fig1: 10^6)")
    g.add_argument("--replicates", type=int, metavar="INT",
                   help=f"randomized Sobol replicates (default {d.replicates})")
    g.add_argument("--seed", type=int, metavar="INT", help=f"master seed (default {d.seed})")
    g.add_argument("--pairing", choices=PAIRINGS, help=f"order-1 weight pairing (default {d.pairing})")
    g.add_argument("--z-min", type=float, dest="z_min", metavar="F", help=f"grid start (default {d.z_grid.min})")
    g.add_argument("--z-max", type=float, dest="z_max", metavar="F", help=f"grid end (default {d.z_grid.max})")
    g.add_argument("--z-count", type=int, dest="z_count", metavar="INT",
                   help=f"grid points (default {d.z_grid.count})")
    g.add_argument("--z-values", dest="z_values", metavar="JSON",
                   help="explicit queries as a JSON list, e.g. '[[1,2],[1.5,2]]'")
    g.add_argument("--paths", type=int, metavar="INT",
                   help=f"fBm paths (default {d.paths}; sample-fbm: 1000)")
    g.add_argument("--m", type=int, metavar="INT", help=f"fBm grid points (default {d.m}; sample-fbm: 256)")
    g.add_argument("--method", choices=("cholesky", "davies-harte"), help=f"fBm sampler (default {d.method})")
    g.add_argument("--dim", type=int, metavar="INT", help=f"fBm components (default {d.dim})")
    g.add_argument("--ts", type=_floats, metavar="F,F,...",
                   help="convergence times, strictly decreasing (default 0.4,0.2,0.1,0.05)")
    g.add_argument("--z", dest="z", metavar="JSON", help=f"convergence query (default {d.z})")
    g.add_argument("--refusal", choices=("pass", "fail"),
                   help="check-identities: whether a refused expansion check fails the run (default pass)")
    g.add_argument("--out", metavar="PATH", help="output CSV path")
    g.add_argument("--svg", metavar="PATH", help="reproduce-fig1 SVG path (default: CSV path with .svg)")
    g.add_argument("--workers", type=int, metavar="INT", help="worker threads (default: all cores)")

    parser = argparse.ArgumentParser(
        prog="fbmexpand",
        description="Small-time expansions of fBm-driven differential equations.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "reproduce-fig1": "CDF of the geometric model: exact, normal approximation and expansion (CSV + SVG)",
        "cdf": "expansion estimates of P(X_t <= z) on a query grid",
        "sample-fbm": "export fBm paths on a uniform grid of (0, 1]",
        "check-identities": "statistical identity checks with pass/fail verdicts",
        "convergence": "log-log error slopes over decreasing t",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name],
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    return parser


def _flag_updates(ns: argparse.Namespace) -> dict:
    upd = {}
    for key in ("model", "hurst", "t", "order", "sampler", "n", "replicates", "seed", "pairing",
                "paths", "m", "method", "dim", "ts", "refusal", "out", "svg", "workers"):
        v = getattr(ns, key)
        if v is not None:
            upd[key] = v
    if ns.param:
        upd["params"] = dict(ns.param)
    zg = {}
    for key in ("min", "max", "count"):
        v = getattr(ns, f"z_{key}")
        if v is not None:
            zg[key] = v
    if ns.z_values is not None:
        zg["values"] = json.loads(ns.z_values)
    if zg:
        upd["z_grid"] = zg
    if ns.z is not None:
        upd["z"] = json.loads(ns.z)
    return upd


def resolve_config(command: str, ns: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    _merge(cfg, COMMAND_DEFAULTS[command])
    if ns.config is not None:
        with open(ns.config) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config file must contain a JSON object")
        _merge(cfg, data)
    flags = _flag_updates(ns)
    if "params" in flags:
        cfg.params = {**cfg.params, **flags.pop("params")}
    _merge(cfg, flags)
    validate(cfg, command)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve_config(ns.command, ns)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except json.JSONDecodeError as exc:
        print(f"error: malformed JSON: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return HANDLERS[ns.command](cfg)
    except HurstOutOfRange as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EllipticityViolation, EmbeddingFailure, FactorizationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
