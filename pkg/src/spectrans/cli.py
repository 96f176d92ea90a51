"""Command-line front end: ``spectrans <subcommand> --config run.json [--out DIR]``.

Every subcommand reads one JSON config, writes CSV files (and an SVG plot
when ``"plot": true``) into the output directory, and prints a short summary.
Exit status is 0 on success, 1 for an invalid config and 2 when the
numerics fail; in the last case ``error.json`` records the failing step.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional

import numpy as np

from . import gbzoracle, metric, quasi
from .errors import (
    AmbiguousCentralError,
    AtTransitionError,
    ConfigError,
    InvalidInputError,
    InvalidModelError,
    PreconditionError,
    SpectransError,
    WrapAroundError,
)
from .io import read_csv_columns, write_csv
from .model import build_model, replace_parameter
from .transport import read_cloud_csv, transport_plan, write_cloud_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

_CONFIG_ERRORS = (ConfigError, InvalidModelError, PreconditionError, InvalidInputError, WrapAroundError, AmbiguousCentralError)


# ------------------------------------------------------------------ config


class Config:
    """Thin accessor over the parsed JSON with typed, defaulted lookups."""

    def __init__(self, data: Mapping[str, Any], base: Path):
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a JSON object")
        self.data = data
        self.base = base

    def section(self, name: str) -> Dict[str, Any]:
        val = self.data.get(name, {})
        if not isinstance(val, Mapping):
            raise ConfigError(f"'{name}' must be an object")
        return dict(val)

    def number(self, section: str, key: str, default=None, kind=float):
        sec = self.section(section) if section else dict(self.data)
        if key not in sec:
            if default is None:
                raise ConfigError(f"missing '{section + '.' if section else ''}{key}'")
            return kind(default)
        try:
            val = kind(sec[key])
        except (TypeError, ValueError):
            raise ConfigError(f"'{key}' must be a number") from None
        if isinstance(val, float) and not math.isfinite(val):
            raise ConfigError(f"'{key}' must be finite")
        return val

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def sweep(self, variable: Optional[str] = None, steps: Optional[int] = None):
        sw = self.section("sweep")
        if variable is not None and sw.get("variable", variable) != variable:
            raise ConfigError(f"this subcommand sweeps '{variable}', not '{sw.get('variable')}'")
        lo = self.number("sweep", "lo")
        hi = self.number("sweep", "hi")
        steps = self.number("sweep", "steps", steps, kind=int)
        if not lo < hi:
            raise ConfigError("sweep needs lo < hi")
        if steps < 2:
            raise ConfigError("sweep needs at least two steps")
        return sw.get("variable", variable), lo, hi, steps

    def finite(self, required: bool = False):
        fin = self.section("finite")
        if not fin:
            if required:
                raise ConfigError("missing 'finite' section with N and delta")
            return None, 1e-4
        N = self.number("finite", "N", kind=int)
        delta = self.number("finite", "delta", 1e-4)
        if N < 2:
            raise ConfigError("finite.N must be at least 2")
        if delta <= 0:
            raise ConfigError("finite.delta must be positive")
        return N, delta

    def model(self):
        spec = self.data.get("model")
        if not isinstance(spec, Mapping):
            raise ConfigError("missing 'model' object")
        return build_model(spec)

    def quasi_model(self) -> quasi.QuasiModel:
        spec = self.data.get("model")
        if not isinstance(spec, Mapping) or spec.get("type") != "quasiperiodic":
            raise ConfigError("this subcommand needs a model of type 'quasiperiodic'")
        p = dict(spec.get("parameters", {}))
        N = int(p.get("N", 610))
        omega = p.get("omega", "fibonacci")
        if omega == "fibonacci":
            N, omega = quasi.fibonacci_closure(N)
        elif omega == "golden":
            omega = quasi.GOLDEN
        try:
            return quasi.QuasiModel(
                lambdas=tuple(float(x) for x in np.atleast_1d(p.get("lambdas", [0.5]))),
                omega=float(omega),
                phi=float(p.get("phi", 0.0)),
                h=float(p.get("h", 0.0)),
                g=float(p.get("g", 0.0)),
                N=N,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad quasiperiodic parameters: {exc}") from None

    @property
    def K(self) -> int:
        return self.number("", "K", metric.DEFAULT_K, int)

    @property
    def plot(self) -> bool:
        return bool(self.data.get("plot", False))


def load_config(path) -> Config:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return Config(data, path.parent)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(f"cannot serialise {type(x).__name__}")


# ---------------------------------------------------------------- plotting


def emit_plot(curve_csv, svg_path, ranges=None, singularities=None) -> Path:
    """Render a metric or h-sweep CSV as a standalone SVG.

    The abscissa is the first column (``mu`` or ``h``).  Singularities are drawn
    as vertical lines; ``ranges`` (pairs ``(lo, hi)``) as shaded bands.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = read_csv_columns(curve_csv)
    names = list(cols)
    if not names or len(cols[names[0]]) == 0:
        raise InvalidInputError(f"{curve_csv}: nothing to plot")
    xname = names[0]
    yname = "gw_thermo" if "gw_thermo" in cols else "gw_h" if "gw_h" in cols else None
    if yname is None or isinstance(cols[xname], list) or isinstance(cols[yname], list):
        raise InvalidInputError(f"{curve_csv}: not a metric curve")
    x, y = cols[xname], np.where(np.isfinite(cols[yname]), cols[yname], np.nan)
    if singularities is None and "flags" in cols:
        flags = cols["flags"]
        singularities = [xi for xi, f in zip(x, flags) if isinstance(f, str) and ("divergent" in f or "singular" in f)]
    with plt.rc_context({"svg.hashsalt": "spectrans", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(x, y, color="black", lw=1.2)
        for s in singularities or []:
            ax.axvline(s, color="tab:red", lw=0.8, ls="--")
        for lo, hi in ranges or []:
            ax.axvspan(lo, hi, color="tab:blue", alpha=0.15, lw=0)
        if "n_delta_gw" in cols and np.any(np.isfinite(cols["n_delta_gw"])):
            ax2 = ax.twinx()
            ax2.plot(x, cols["n_delta_gw"], color="tab:green", lw=0.6)
            ax2.set_ylabel("N dG_W")
        ax.set_xlabel("h" if xname == "h" else "mu")
        ax.set_ylabel("G_W")
        fig.tight_layout()
        svg_path = Path(svg_path)
        svg_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return svg_path


# ------------------------------------------------------------- subcommands


def cmd_metric_sweep(cfg: Config, out: Path) -> Dict[str, Any]:
    H = cfg.model()
    _, lo, hi, steps = cfg.sweep("mu")
    N, delta = cfg.finite()
    curve = metric.scan_metric(H, lo, hi, steps, N=N, dmu=delta, K=cfg.K)
    csv_path = curve.to_csv(out / "metric.csv")
    convex = metric.convexity_check(curve)
    summary = {
        "minima": curve.minima,
        "singularities": [{"mu_c": s.mu_c, "k_c": s.k_c, "multiplicity": s.multiplicity} for s in curve.singularities],
        "convex_segments": convex,
        "argmin": float(curve.mu[int(np.nanargmin(np.where(np.isfinite(curve.gw_thermo), curve.gw_thermo, np.nan)))]),
    }
    _write_json(out / "summary.json", summary)
    if cfg.plot:
        emit_plot(csv_path, out / "metric.svg", singularities=[s.mu_c for s in curve.singularities])
    return summary


def _ranges_table(metric_ranges, oracle_ranges, step):
    rows = {k: [] for k in ("index", "metric_lo", "metric_hi", "oracle_lo", "oracle_hi", "oracle_index", "mismatch_steps")}
    used = set()
    for i, r in enumerate(metric_ranges):
        best, dist = None, math.inf
        for j, o in enumerate(oracle_ranges):
            d = max(abs(r.mu_lo - o.mu_lo), abs(r.mu_hi - o.mu_hi))
            if j not in used and d < dist:
                best, dist = j, d
        o = oracle_ranges[best] if best is not None else None
        if best is not None:
            used.add(best)
        rows["index"].append(i + 1)
        rows["metric_lo"].append(r.mu_lo)
        rows["metric_hi"].append(r.mu_hi)
        rows["oracle_lo"].append(o.mu_lo if o else math.nan)
        rows["oracle_hi"].append(o.mu_hi if o else math.nan)
        rows["oracle_index"].append(o.index if o else math.nan)
        rows["mismatch_steps"].append(round(dist / step, 6) if o else math.inf)
    return rows


def cmd_agbz(cfg: Config, out: Path) -> Dict[str, Any]:
    H = cfg.model()
    _, lo, hi, steps = cfg.sweep("mu")
    N, delta = cfg.finite(required=True)
    grid = np.linspace(lo, hi, steps)
    step = grid[1] - grid[0]
    th = cfg.section("thresholds")
    threshold = th.get("n_delta_gw")
    reference = th.get("reference")
    if threshold is None and reference is None:
        raise ConfigError("give thresholds.n_delta_gw or a thresholds.reference window")
    profile = metric.finite_size_profile(H, lo - step / 2, hi + step / 2, N, delta, K=cfg.K)
    write_csv(out / "n_delta_gw.csv", {"mu": profile[0], "n_delta_gw": profile[1]})
    mr = metric.agbz_modulus_ranges(
        H, grid, N, delta, threshold=threshold, reference=tuple(reference) if reference else None, K=cfg.K, profile=profile
    )
    orc = gbzoracle.agbz_ranges_oracle(H, grid, cfg.number("", "oracle_K", 256, int))
    table = _ranges_table(mr, orc, step)
    write_csv(out / "agbz_ranges.csv", table)
    return {
        "metric_ranges": [(r.mu_lo, r.mu_hi) for r in mr],
        "oracle_ranges": [(r.mu_lo, r.mu_hi, r.index) for r in orc],
        "max_mismatch_steps": max(table["mismatch_steps"], default=0.0),
    }


def _family(cfg: Config, name: str) -> Callable[[float], Any]:
    H0 = cfg.model()
    if name not in H0.params:
        raise ConfigError(f"model has no parameter '{name}' to sweep")
    return lambda t: replace_parameter(H0, name, t)


def cmd_ep_scan(cfg: Config, out: Path) -> Dict[str, Any]:
    var, lo, hi, _ = cfg.sweep(steps=2)
    family = _family(cfg, var)
    N, delta = cfg.finite(required=True)
    mu_lo, mu_hi = cfg.number("window", "lo"), cfg.number("window", "hi")
    th = cfg.section("thresholds")
    resolve = float(th.get("resolve", metric.TOUCH_RESOLUTION))
    threshold = float(th.get("n_delta_gw", 1e-5))
    tol = cfg.number("", "tol", 0.02)
    log: List[tuple] = []

    def gap(H):
        g = metric.touch_gap(H, mu_lo, mu_hi, N, delta, threshold=threshold, resolve=resolve, K=cfg.K)
        log.append((H.params[var], g))
        return g

    t_c = metric.ep_touch_scan(family, lo, hi, gap, tol=tol)
    log.sort()
    write_csv(out / "ep_scan.csv", {var: [a for a, _ in log], "gap": [b for _, b in log]})
    summary = {"parameter": var, "critical": t_c}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_topo_scan(cfg: Config, out: Path) -> Dict[str, Any]:
    var, lo, hi, steps = cfg.sweep()
    family = _family(cfg, var)
    ts = np.linspace(lo, hi, steps)
    cols = {k: [] for k in (var, "w", "N_plus", "N_minus", "p_plus", "p_minus", "flags")}
    for t in ts:
        H = family(float(t))
        cols[var].append(t)
        try:
            wd = gbzoracle.winding_number_nonbloch(H, gbzoracle.gbz_radius_oracle(H))
        except AtTransitionError:
            for k in ("w", "N_plus", "N_minus", "p_plus", "p_minus"):
                cols[k].append(math.nan)
            cols["flags"].append("at_transition")
            continue
        cols["w"].append(wd.w)
        cols["N_plus"].append(wd.N_plus)
        cols["N_minus"].append(wd.N_minus)
        cols["p_plus"].append(wd.p_plus)
        cols["p_minus"].append(wd.p_minus)
        cols["flags"].append("")
    write_csv(out / "winding.csv", cols)
    w = np.array(cols["w"], dtype=float)
    jumps = [
        gbzoracle.winding_transition(family, float(ts[i]), float(ts[j]), tol=1e-6)
        for i, j in _jump_brackets(w)
    ]
    summary = {"parameter": var, "transitions": jumps}
    _write_json(out / "summary.json", summary)
    return summary


def _jump_brackets(w):
    """Index pairs of consecutive finite samples whose winding differs."""
    good = [i for i in range(len(w)) if np.isfinite(w[i])]
    return [(a, b) for a, b in zip(good, good[1:]) if w[a] != w[b]]


def cmd_quasi_sweep(cfg: Config, out: Path) -> Dict[str, Any]:
    q = cfg.quasi_model()
    _, lo, hi, steps = cfg.sweep("h")
    dh = cfg.number("finite", "delta", 1e-4) if cfg.section("finite") else 1e-4
    threshold = float(cfg.section("thresholds").get("onset", quasi.ONSET_THRESHOLD))
    res = quasi.h_transition_scan(q, lo, hi, steps, dh=dh, threshold=threshold)
    csv_path = res.to_csv(out / "quasi_sweep.csv")
    summary = {"h_c": res.h_c, "onset_singularity": res.onset_singularity, "singularities": res.singularities, "N": q.N, "omega": q.omega}
    _write_json(out / "summary.json", summary)
    if cfg.plot:
        emit_plot(csv_path, out / "quasi_sweep.svg", singularities=[res.h_c] + list(res.singularities))
    return summary


def cmd_oracle_gbz(cfg: Config, out: Path) -> Dict[str, Any]:
    H = cfg.model()
    N = cfg.number("finite", "N", 60, int)
    gauge = cfg.section("oracle").get("gauge")
    cloud = gbzoracle.obc_spectrum(H, N, gauge=None if gauge is None else float(gauge))
    write_cloud_csv(out / "obc_spectrum.csv", cloud)
    pts = gbzoracle.gbz_points_from_obc(H, cloud)
    gbzoracle.write_gbz_csv(out / "gbz_points.csv", pts)
    mods = np.abs([p.beta for p in pts])
    return {"points": len(pts), "beta_modulus_min": float(mods.min()) if len(pts) else None, "beta_modulus_max": float(mods.max()) if len(pts) else None}


def cmd_transport(cfg: Config, out: Path) -> Dict[str, Any]:
    clouds = cfg.data.get("clouds")
    if not isinstance(clouds, list) or len(clouds) != 2:
        raise ConfigError("'clouds' must list exactly two CSV files")
    a, b = (read_cloud_csv(cfg.path(c)) for c in clouds)
    plan = transport_plan(a, b)
    n = len(plan.assignment)
    src = np.arange(n)
    cost = np.abs(a.points[src] - b.points[plan.assignment]) ** 2
    write_csv(out / "transport.csv", {"source": src, "target": plan.assignment, "cost": cost})
    summary = {"w2": plan.w2, "total_cost": plan.total_cost}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_plot(cfg: Config, out: Path) -> Dict[str, Any]:
    curve = cfg.data.get("curve")
    if not isinstance(curve, str):
        raise ConfigError("'curve' must name a CSV file")
    ranges = cfg.data.get("ranges")
    svg = emit_plot(cfg.path(curve), out / (Path(curve).stem + ".svg"), ranges=ranges)
    return {"svg": str(svg)}


COMMANDS: Dict[str, Callable[[Config, Path], Dict[str, Any]]] = {
    "metric-sweep": cmd_metric_sweep,
    "agbz": cmd_agbz,
    "ep-scan": cmd_ep_scan,
    "topo-scan": cmd_topo_scan,
    "quasi-sweep": cmd_quasi_sweep,
    "oracle-gbz": cmd_oracle_gbz,
    "transport": cmd_transport,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spectrans", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        summary = COMMANDS[args.subcommand](cfg, out)
    except (*_CONFIG_ERRORS, KeyError, TypeError) as exc:
        print(f"spectrans: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SpectransError, ArithmeticError, np.linalg.LinAlgError) as exc:
        _write_json(out / "error.json", {"subcommand": args.subcommand, "error": type(exc).__name__, "message": str(exc)})
        print(f"spectrans: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(summary, sort_keys=True, default=_jsonable))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
