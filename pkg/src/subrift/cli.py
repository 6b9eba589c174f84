"""Command-line front end.

    subrift <command> [--config FILE] [--model NAME] [--x 0,0,0] [--y 1,0,0] ...

Settings come from an optional key=value file, then command-line flags (last
wins). Every command writes JSON (and CSV where it has tabular output) into
--out. Exit codes: 0 ok, 1 bad configuration, 2 no (regular) geodesic,
3 numerical failure, 4 inconclusive statistics.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import fluctuation as fl
from . import montecarlo as mc
from .errors import (
    ConfigError,
    InconclusiveError,
    NoConvergenceError,
    RankDeficiencyError,
    SubriftError,
)
from .models import get_model
from .rng import resolve_seed
from .secondvar import heat_constant, q_spectrum
from .shooting import ShootingOptions, classify, solution_from_covector, solve_geodesic

COMMANDS = ("geodesic", "conjugate", "qspec", "heat-const", "fluctuate", "verify-clt", "varadhan")

EXIT_OK, EXIT_CONFIG, EXIT_NOCONV, EXIT_NUMERIC, EXIT_INCONCLUSIVE = 0, 1, 2, 3, 4


# ------------------------------------------------------------ configuration


@dataclass
class RunConfig:
    model: str = "euclidean"
    x: tuple | None = None
    y: tuple | None = None
    p0: tuple | None = None
    eps: tuple | None = None
    n: int | None = None
    seed: int = 0
    rho: float = 0.5
    grid: int | None = None
    steps: int = 1000
    intervals: int = 32
    starts: int = 32
    pairs: tuple | None = None
    out: str = "out"
    threads: int = 1

    def canonical(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name}={_format_value(f.name, v)}")
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return repr(float(v))


def _format_value(key: str, v) -> str:
    if key in ("x", "y", "p0", "eps"):
        return ",".join(_fmt(a) for a in v)
    if key == "pairs":
        return ",".join(f"{_fmt(s)}:{_fmt(t)}" for s, t in v)
    if key == "rho":
        return _fmt(v)
    return str(v)


def _floats(text: str) -> tuple:
    try:
        vals = tuple(float(a) for a in text.split(",") if a.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"cannot parse number list {text!r}") from exc
    if not vals or not all(math.isfinite(v) for v in vals):
        raise ConfigError(f"bad number list {text!r}")
    return vals


def _pairs(text: str) -> tuple:
    out = []
    for item in text.split(","):
        try:
            s, t = item.split(":")
            out.append((float(s), float(t)))
        except ValueError as exc:
            raise ConfigError(f"cannot parse pair {item!r} (expected s:t)") from exc
    return tuple(out)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {text!r}") from exc
    if v <= 0:
        raise ConfigError(f"expected a positive integer, got {v}")
    return v


def _int(text: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {text!r}") from exc


def _float(text: str) -> float:
    try:
        v = float(text)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {text!r}") from exc
    if not math.isfinite(v):
        raise ConfigError(f"expected a finite number, got {text!r}")
    return v


PARSERS = {
    "model": str,
    "x": _floats,
    "y": _floats,
    "p0": _floats,
    "eps": _floats,
    "n": _positive_int,
    "seed": _int,
    "rho": _float,
    "grid": _positive_int,
    "steps": _positive_int,
    "intervals": _positive_int,
    "starts": _positive_int,
    "pairs": _pairs,
    "out": str,
    "threads": _positive_int,
}


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = PARSERS[key](val)
    return values


def build_config(file_values: dict, overrides: dict) -> RunConfig:
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    cfg = RunConfig(**merged)
    cfg.seed = resolve_seed(cfg.seed)
    if cfg.rho <= 0:
        raise ConfigError("rho must be positive")
    if cfg.eps is not None and any(e <= 0 for e in cfg.eps):
        raise ConfigError("eps values must be positive")
    if cfg.pairs is not None and any(not (0 <= s <= 1 and 0 <= t <= 1) for s, t in cfg.pairs):
        raise ConfigError("pair times must lie in [0, 1]")
    return cfg


def _model_and_points(cfg: RunConfig, need_y: bool = True):
    dim = len(cfg.x) if cfg.x is not None else None
    try:
        model = get_model(cfg.model, dim)
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    x = np.zeros(model.d) if cfg.x is None else np.array(cfg.x)
    if len(x) != model.d:
        raise ConfigError(f"x has dimension {len(x)}, model {model.name} needs {model.d}")
    y = None
    if cfg.p0 is not None:
        if len(cfg.p0) != model.d:
            raise ConfigError(f"p0 has dimension {len(cfg.p0)}, model needs {model.d}")
    elif need_y:
        if cfg.y is None:
            raise ConfigError("y (or p0) is required")
        y = np.array(cfg.y)
        if len(y) != model.d:
            raise ConfigError(f"y has dimension {len(y)}, model {model.name} needs {model.d}")
    return model, x, y


def _solution(cfg: RunConfig, model, x, y):
    if cfg.p0 is not None:
        return solution_from_covector(model, x, np.array(cfg.p0), cfg.steps)
    opts = ShootingOptions(starts=cfg.starts, N=cfg.steps, seed=cfg.seed)
    return solve_geodesic(model, x, y, opts)


# ------------------------------------------------------------ output


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_clean(data), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_csv(path: Path, header: list[str], rows) -> None:
    def cell(v):
        if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return format(float(v), ".17g")
        return str(v)

    lines = [",".join(header)]
    lines += [",".join(cell(v) for v in row) for row in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _base(cmd: str, cfg: RunConfig, model) -> dict:
    return {"command": cmd, "model": model.name, "config": cfg.canonical()}


# ------------------------------------------------------------ commands


def cmd_geodesic(cfg: RunConfig, out: Path) -> int:
    model, x, y = _model_and_points(cfg)
    try:
        sol = _solution(cfg, model, x, y)
    except NoConvergenceError as exc:
        out.mkdir(parents=True, exist_ok=True)
        cands = [
            {"p0": c.p0, "energy": c.energy, "residual": c.residual} for c in exc.candidates
        ]
        write_json(out / "geodesic_partial.json", {**_base("geodesic", cfg, model), "error": str(exc), "candidates": cands})
        raise
    out.mkdir(parents=True, exist_ok=True)
    lam = sol.lambda0
    write_json(
        out / "geodesic.json",
        {
            **_base("geodesic", cfg, model),
            "x": sol.x,
            "y": sol.path.x[-1] if cfg.p0 is not None else sol.y,
            "lambda0": {"x": lam.x, "p": lam.p},
            "distance": sol.distance,
            "energy": sol.energy,
            "residual": sol.residual,
            "multiplicity": sol.multiplicity,
            "n_minimal": sol.n_minimal,
        },
    )
    d = model.d
    header = ["t"] + [f"x_{i + 1}" for i in range(d)] + [f"p_{i + 1}" for i in range(d)]
    rows = (
        [t, *xs, *ps] for t, xs, ps in zip(sol.path.t, sol.path.x, sol.path.p)
    )
    write_csv(out / "geodesic.csv", header, rows)
    return EXIT_OK


def cmd_conjugate(cfg: RunConfig, out: Path) -> int:
    model, x, y = _model_and_points(cfg)
    sol = _solution(cfg, model, x, y)
    rep = classify(model, sol)
    mu_min = None
    if rep.regular:
        mu_min = q_spectrum(model, sol, cfg.intervals).mu_min
    else:
        raise RankDeficiencyError("geodesic is not regular (C1bar singular); q is not defined on a kernel of full corank")
    out.mkdir(parents=True, exist_ok=True)
    data = {**_base("conjugate", cfg, model), **rep.to_dict(), "distance": sol.distance, "mu_min": mu_min, "intervals": cfg.intervals}
    write_json(out / "conjugate.json", data)
    return EXIT_OK


def cmd_qspec(cfg: RunConfig, out: Path) -> int:
    model, x, y = _model_and_points(cfg)
    sol = _solution(cfg, model, x, y)
    qs = q_spectrum(model, sol, cfg.intervals)
    mu = qs.mu
    ntail = max(0, len(mu) - 4 * model.d)
    tail = np.sort(np.abs(mu - 1.0))[:ntail]
    out.mkdir(parents=True, exist_ok=True)
    write_json(
        out / "qspec.json",
        {
            **_base("qspec", cfg, model),
            "intervals": cfg.intervals,
            "dim": qs.dim,
            "rank": qs.rank,
            "mu": mu,
            "mu_min": qs.mu_min,
            "lambda1": qs.lambda1,
            "tail_max_dev": float(tail.max()) if tail.size else 0.0,
        },
    )
    return EXIT_OK


def cmd_heat_const(cfg: RunConfig, out: Path) -> int:
    model, x, y = _model_and_points(cfg)
    sol = _solution(cfg, model, x, y)
    even = cfg.intervals % 2 == 0 and cfg.intervals >= 4
    hc = heat_constant(model, sol, cfg.intervals, extrapolate=even)
    out.mkdir(parents=True, exist_ok=True)
    write_json(
        out / "heat_const.json",
        {**_base("heat-const", cfg, model), **hc.to_dict(), "intervals": cfg.intervals, "distance": sol.distance},
    )
    return EXIT_OK


DEFAULT_PAIRS = ((0.25, 0.75), (0.5, 0.5))


def cmd_fluctuate(cfg: RunConfig, out: Path) -> int:
    model, x, y = _model_and_points(cfg)
    sol = _solution(cfg, model, x, y)
    G = cfg.grid or 63
    n = cfg.n or 1000
    kern = fl.assemble_kernel(sol, G)
    samples = fl.sample_bridge_fluctuations(kern, n, cfg.seed, cfg.threads)
    pairs = cfg.pairs or DEFAULT_PAIRS
    blocks = [{"s": s, "t": t, "C": fl.covariance(sol, s, t)} for s, t in pairs]
    out.mkdir(parents=True, exist_ok=True)
    d = model.d
    times = kern.times
    rows = ([i, times[j], *samples[i, j]] for i in range(n) for j in range(G))
    write_csv(out / "fluctuate.csv", ["sample_id", "t"] + [f"v_{k + 1}" for k in range(d)], rows)
    write_json(
        out / "fluctuate.json",
        {
            **_base("fluctuate", cfg, model),
            "grid": G,
            "n": n,
            "seed": cfg.seed,
            "jitter": kern.jitter,
            "min_eig": kern.min_eig,
            "blocks": blocks,
            "samples_csv": "fluctuate.csv",
        },
    )
    return EXIT_OK


def cmd_verify_clt(cfg: RunConfig, out: Path) -> int:
    model, x, y = _model_and_points(cfg)
    sol = _solution(cfg, model, x, y)
    eps = cfg.eps[0] if cfg.eps else 0.05
    n = cfg.n or 20000
    pairs = cfg.pairs or DEFAULT_PAIRS
    grid = cfg.grid or 8
    steps = 200 if 200 % grid == 0 else grid * math.ceil(200 / grid)
    sde = mc.SdeConfig(eps, N=steps, n=n, seed=cfg.seed, rho=cfg.rho, grid=grid, threads=cfg.threads)
    ens = mc.bridge_ensemble(model, sol, sde)
    ests = mc.empirical_covariance(ens, pairs)
    report = []
    k = 3.0 if ens.exact else 5.0
    for est in ests:
        target = fl.covariance(sol, est.s, est.t)
        band = np.zeros_like(target) if ens.exact else mc.acceptance_band(sol, est.s, est.t, cfg.rho, seed=cfg.seed)
        excess = (np.abs(est.estimate - target) - band) / np.maximum(est.se, 1e-300)
        report.append(
            {
                "s": est.s,
                "t": est.t,
                "estimate": est.estimate,
                "se": est.se,
                "target": target,
                "band": band,
                "se_multiple": k,
                "max_excess": float(excess.max()),
                "pass": bool(excess.max() <= k),
            }
        )
    verdict = "pass" if all(r["pass"] for r in report) else "fail"
    out.mkdir(parents=True, exist_ok=True)
    write_json(
        out / "verify_clt.json",
        {
            **_base("verify-clt", cfg, model),
            "eps": eps,
            "rho": cfg.rho,
            "proposals": ens.proposals,
            "accepted": ens.n,
            "acceptance_rate": ens.acceptance_rate,
            "exact_bridge": ens.exact,
            "seed": cfg.seed,
            "pairs": report,
            "verdict": verdict,
        },
    )
    d = model.d
    rows = []
    for r in report:
        for i in range(d):
            for j in range(d):
                rows.append([r["s"], r["t"], i + 1, j + 1, r["estimate"][i, j], r["se"][i, j], r["target"][i, j], r["band"][i, j]])
    write_csv(out / "verify_clt.csv", ["s", "t", "i", "j", "estimate", "se", "target", "band"], rows)
    return EXIT_OK


def cmd_varadhan(cfg: RunConfig, out: Path) -> int:
    model, x, y = _model_and_points(cfg)
    sol = _solution(cfg, model, x, y)
    eps_list = cfg.eps or (0.2, 0.1, 0.05, 0.02)
    n = cfg.n or 20000
    sde = mc.SdeConfig(eps_list[0], N=cfg.grid and max(100, cfg.grid) or 200, n=n, seed=cfg.seed, grid=1, threads=cfg.threads)
    rows = mc.varadhan_estimate(model, x, y, eps_list, sde, sol=sol)
    flat = model.flat and model.name.startswith("euclidean")
    tol = 0.05
    table = []
    for r in rows:
        analytic = mc.euclidean_log_density(model.d, sol.distance, r.eps) if flat else None
        ok = abs(r.value - analytic) <= tol if analytic is not None else None
        table.append(
            {"eps": r.eps, "value": r.value, "se": r.se, "target": r.target, "analytic": analytic, "hits": r.hits, "within_tolerance": ok}
        )
    out.mkdir(parents=True, exist_ok=True)
    write_json(
        out / "varadhan.json",
        {**_base("varadhan", cfg, model), "distance": sol.distance, "n": n, "seed": cfg.seed, "tolerance": tol, "rows": table},
    )
    write_csv(
        out / "varadhan.csv",
        ["eps", "eps_log_p", "se", "target", "analytic", "hits"],
        ([t["eps"], t["value"], t["se"], t["target"], "" if t["analytic"] is None else t["analytic"], t["hits"]] for t in table),
    )
    return EXIT_OK


HANDLERS = {
    "geodesic": cmd_geodesic,
    "conjugate": cmd_conjugate,
    "qspec": cmd_qspec,
    "heat-const": cmd_heat_const,
    "fluctuate": cmd_fluctuate,
    "verify-clt": cmd_verify_clt,
    "varadhan": cmd_varadhan,
}


# ------------------------------------------------------------ entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="subrift", description="Sub-Riemannian geodesics, bridge fluctuations and heat-kernel constants.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--model")
    p.add_argument("--x", help="start point, comma separated")
    p.add_argument("--y", help="end point, comma separated")
    p.add_argument("--p0", help="initial covector; replaces shooting for y")
    p.add_argument("--eps", help="comma separated noise levels")
    p.add_argument("--n", help="sample count")
    p.add_argument("--seed")
    p.add_argument("--rho", help="acceptance window in units of sqrt(eps)")
    p.add_argument("--grid", help="fluctuation grid size")
    p.add_argument("--steps", help="RK4 steps for the bicharacteristic")
    p.add_argument("--intervals", help="control intervals for the second variation")
    p.add_argument("--starts", help="shooting multistart count")
    p.add_argument("--pairs", help="time pairs s:t, comma separated")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", help="worker cap for sampling")
    return p


def load(argv) -> tuple[str, RunConfig]:
    args = build_parser().parse_args(argv)
    file_values = {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        file_values = parse_config_text(text)
    overrides = {}
    for key, parse in PARSERS.items():
        raw = getattr(args, key, None)
        if raw is not None:
            overrides[key] = parse(raw)
    return args.command, build_config(file_values, overrides)


def run(argv=None) -> int:
    try:
        cmd, cfg = load(sys.argv[1:] if argv is None else argv)
        return HANDLERS[cmd](cfg, Path(cfg.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoConvergenceError, RankDeficiencyError) as exc:
        print(f"no regular geodesic: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except InconclusiveError as exc:
        print(f"inconclusive: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE
    except (SubriftError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())
