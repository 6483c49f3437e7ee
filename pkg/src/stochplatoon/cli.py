"""Command-line interface.

Exit codes: 0 success (platoon string stable), 2 certified not string stable,
1 error. Results go to ``--out``: a JSON result document per command plus CSV
tables. Nothing time-dependent is written, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .certifier import Verdict, certify, check_definition1, mean_bound, variance_bound
from .config import Config, bundled_configs, config_hash, load_config
from .errors import AssumptionViolation, PlatoonError
from .lti import FrequencyGrid
from .moments import propagate, stationary_covariance, trajectory_rows
from .montecarlo import Record, SimulationPlan, run_ensemble, validate_against_analytics
from .platoon import build_concatenated, build_vehicle_loop, leader_error
from .spectral import psd_ladder, spectral_factorize, variance_ladder

EXIT_OK, EXIT_ERROR, EXIT_UNSTABLE = 0, 1, 2
SPECTRUM_POINTS = 1024
# vehicle-steps per CPU-second, measured on the desk-scale ensemble
MC_THROUGHPUT = 6e6

_HINTS = {
    "1a": "make T strictly proper, e.g. add a one-sample delay to the controller",
    "1b": "add integral action so that K(z)G(z) has two poles at z = 1",
}

TRAJECTORY_COLUMNS = ("k", "i", "mu", "P")
LADDER_COLUMNS = ("i", "P_inf_ladder", "P_inf_lyapunov")
SPECTRUM_COLUMNS = ("omega", "i", "phi")
NORM_COLUMNS = ("i", "mean_l2", "mean_bound", "var_linf", "var_bound", "satisfied")
ENSEMBLE_COLUMNS = ("k", "i", "mu_hat", "P_hat", "stderr_mu", "stderr_P")
FULL_STATE_COLUMNS = ("realization", "k", "i", "y", "zeta", "e")
SWEEP_COLUMNS = ("value", "rho_A", "max_gain", "margin", "string_stable", "limiting_variance", "last_vehicle_variance")


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: Path, columns, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    _atomic_write(path, buf.getvalue())
    return path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def write_json(path: Path, doc: dict) -> Path:
    _atomic_write(path, json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path


class Context:
    def __init__(self, config_source, out, seed, grid_size, quiet):
        self.config_source = config_source
        self.out = Path(out)
        self.seed = seed
        self.grid_size = grid_size
        self.quiet = quiet

    def config(self) -> Config:
        if self.config_source is None:
            raise click.UsageError("--config is required for this command")
        cfg = load_config(self.config_source)
        overrides = {}
        if self.seed is not None:
            overrides["monte_carlo.seed"] = self.seed
        if self.grid_size is not None:
            overrides["analysis.grid_size"] = self.grid_size
        return cfg.with_overrides(**overrides) if overrides else cfg

    def echo(self, msg: str) -> None:
        if not self.quiet:
            click.echo(msg)


def _document(command: str, cfg: Config | None, **body) -> dict:
    doc = {"tool": "stochplatoon", "version": __version__, "command": command}
    if cfg is not None:
        doc["config_hash"] = config_hash(cfg)
        doc["config"] = cfg.normalized()
    doc.update(body)
    return doc


def _relative(paths: dict[str, Path], root: Path) -> dict[str, str]:
    return {k: str(Path(p).relative_to(root)) for k, p in paths.items()}


def guarded(fn):
    """Map library errors to exit code 1 with a readable message."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except AssumptionViolation as exc:
            click.echo(f"error: assumption {exc.item} violated: {exc}", err=True)
            click.echo(f"hint: {_HINTS.get(exc.item, '')}", err=True)
        except (PlatoonError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_ERROR)

    return wrapper


def _verdict_line(label: str, v: Verdict) -> str:
    lv = "undefined" if v.limiting_variance is None else f"{v.limiting_variance:.10g}"
    state = "string stable" if v.string_stable else "NOT string stable"
    return (
        f"{label}: {state}; rho(A) = {v.rho_A:.6g}, max|T| = {v.max_gain:.6g} "
        f"at w = {v.worst_frequency:.6g}, limiting variance = {lv}"
    )


class _Group(click.Group):
    """Usage errors exit with 1 so that 2 keeps meaning "not string stable"."""

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as exc:
            exc.exit_code = EXIT_ERROR
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as exc:
            exc.exit_code = EXIT_ERROR
            raise


@click.group(cls=_Group)
@click.version_option(__version__, prog_name="stochplatoon")
@click.option("--config", "config_source", default=None, help=f"YAML file or bundled name ({', '.join(bundled_configs())}).")
@click.option("--out", default="results", show_default=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", default=None, type=click.IntRange(0, 2**64 - 1), help="Override monte_carlo.seed.")
@click.option("--grid-size", default=None, type=click.IntRange(16), help="Override analysis.grid_size.")
@click.option("--quiet", is_flag=True, help="Suppress console summaries.")
@click.pass_context
def main(ctx, config_source, out, seed, grid_size, quiet):
    """Certify and simulate stochastic string stability of vehicle platoons."""
    ctx.obj = Context(config_source, out, seed, grid_size, quiet)


@main.command("certify")
@click.pass_obj
@guarded
def cmd_certify(obj: Context):
    """String-stability verdict for the configured platoon."""
    cfg = obj.config()
    spec = cfg.build_spec()
    verdict = certify(spec, FrequencyGrid.uniform(cfg.analysis.grid_size))
    code = EXIT_OK if verdict.string_stable else EXIT_UNSTABLE
    path = write_json(obj.out / "certify.json", _document("certify", cfg, verdict=verdict.to_dict(), exit_code=code))
    obj.echo(_verdict_line(f"h = {spec.h:g}", verdict))
    obj.echo(f"wrote {path}")
    sys.exit(code)


def analyze(cfg: Config, out: Path, prefix: str = "") -> dict:
    """Moments, ladders, spectra and bounds; returns the result body."""
    spec = cfg.build_spec()
    grid = FrequencyGrid.uniform(cfg.analysis.grid_size)
    verdict = certify(spec, grid)
    loop = build_vehicle_loop(spec)
    sys_ = build_concatenated(loop.T_ss, spec.h, spec.N)
    K = cfg.analysis.horizon
    zeta0 = leader_error(loop.T_ss, spec.h, spec.leader, K)
    traj = propagate(sys_, zeta0, spec.initial_condition(), spec.P_d, K)
    files = {"trajectories": write_csv(out / f"{prefix}trajectories.csv", TRAJECTORY_COLUMNS, trajectory_rows(traj))}
    body = {"verdict": verdict.to_dict(), "horizon": K}
    if not verdict.mss:
        body["stationary"] = None
        body["notes"] = ["rho(A) >= 1: stationary outputs are undefined"]
        body["files"] = files
        return body

    ladder = variance_ladder(loop.T, loop.S, loop.H, spec.P_d, spec.N)
    lyap = stationary_covariance(sys_, spec.P_d).per_vehicle_variance
    files["ladder"] = write_csv(
        out / f"{prefix}ladder.csv", LADDER_COLUMNS, ((i + 1, ladder[i], lyap[i]) for i in range(spec.N))
    )
    spectrum = psd_ladder(loop.T, loop.S, loop.H, spec.P_d, spec.N, FrequencyGrid.uniform(SPECTRUM_POINTS))
    files["spectrum"] = write_csv(out / f"{prefix}spectrum.csv", SPECTRUM_COLUMNS, spectrum.rows())
    body["ladder"] = ladder
    body["limiting_variance"] = verdict.limiting_variance

    # the class-K constants exist only for a string-stable platoon
    bounds = None
    body["bounds"] = None
    if verdict.string_stable:
        factor = spectral_factorize(loop.T)
        mb = mean_bound(spec, K, loop)
        vb = variance_bound(spec, loop, factor, grid)
        bounds = (mb, vb)
        body["bounds"] = {"alpha1": mb.alpha1, "beta1": mb.beta1, "alpha2": vb.alpha2, "beta2": vb.beta2}
        body["spectral_factor"] = {**factor.to_dict(), "residual": factor.residual}
    report = check_definition1(traj, sys_.spectral_radius(), bounds, cfg.analysis.tolerances.horizon_tail)
    files["norms"] = write_csv(out / f"{prefix}norms.csv", NORM_COLUMNS, report.rows())
    body["norms"] = {
        "mean_l2": report.mean_l2,
        "var_linf": report.var_linf,
        "satisfied": bool(report.satisfied.all()) if bounds else None,
        "mean_trend": report.mean_trend,
        "variance_trend": report.variance_trend,
        "mean_linf_diagnostic": report.mean_linf,
    }
    body["files"] = files
    return body


@main.command("analyze")
@click.pass_obj
@guarded
def cmd_analyze(obj: Context):
    """Exact moments, variance ladder, PSD ladder, limit and bounds."""
    cfg = obj.config()
    body = analyze(cfg, obj.out)
    verdict = body["verdict"]
    code = EXIT_OK if verdict["string_stable"] else EXIT_UNSTABLE
    body["files"] = _relative(body["files"], obj.out)
    path = write_json(obj.out / "analyze.json", _document("analyze", cfg, exit_code=code, **body))
    obj.echo(_verdict_line(f"h = {cfg.headway:g}", Verdict(**verdict)))
    obj.echo(f"wrote {path}")
    sys.exit(code)


def simulate(cfg: Config, out: Path, prefix: str = "", realizations: int | None = None, followers: int | None = None):
    mc = cfg.monte_carlo
    spec = cfg.build_spec(N=followers) if followers else cfg.monte_carlo_spec()
    plan = SimulationPlan(
        spec=spec,
        realizations=realizations or mc.realizations,
        horizon=mc.horizon,
        master_seed=mc.seed,
        record=Record(mc.record),
    )
    stats = run_ensemble(plan)
    files = {"ensemble": write_csv(out / f"{prefix}ensemble.csv", ENSEMBLE_COLUMNS, stats.rows())}
    if plan.record is Record.FULL_STATE:
        files["full_state"] = write_csv(out / f"{prefix}full_state.csv", FULL_STATE_COLUMNS, stats.full_state_rows())
    verdict = certify(spec, FrequencyGrid.uniform(cfg.analysis.grid_size))
    body = {
        "verdict": verdict.to_dict(),
        "realizations": stats.R,
        "horizon": plan.horizon,
        "followers": spec.N,
        "seed": plan.master_seed,
        "variance_defined": stats.variance_defined,
        "validation": None,
    }
    if verdict.mss:
        loop = build_vehicle_loop(spec)
        sys_ = build_concatenated(loop.T_ss, spec.h, spec.N)
        zeta0 = leader_error(loop.T_ss, spec.h, spec.leader, plan.horizon)
        traj = propagate(sys_, zeta0, spec.initial_condition(), spec.P_d, plan.horizon)
        body["validation"] = validate_against_analytics(stats, traj).summary()
        if not stats.variance_defined:
            body["validation"]["note"] = "one realization: sample variances undefined, reported as 0"
    body["files"] = files
    return body


@main.command("simulate")
@click.option("--realizations", default=None, type=click.IntRange(1), help="Override monte_carlo.realizations.")
@click.pass_obj
@guarded
def cmd_simulate(obj: Context, realizations):
    """Monte Carlo ensemble in physical coordinates, checked against exact moments."""
    cfg = obj.config()
    body = simulate(cfg, obj.out, realizations=realizations)
    body["files"] = _relative(body["files"], obj.out)
    validation = body["validation"]
    if not body["verdict"]["string_stable"]:
        code = EXIT_UNSTABLE
    elif validation is not None and not validation["passed"] and body["variance_defined"]:
        code = EXIT_ERROR
    else:
        code = EXIT_OK
    path = write_json(obj.out / "simulate.json", _document("simulate", cfg, exit_code=code, **body))
    if validation is not None:
        obj.echo(
            f"validation {'passed' if validation['passed'] else 'FAILED'}: "
            f"{validation['mean_fraction_within_band']:.4f} of mean cells within "
            f"{validation['mean_band_stderr']:g} stderr, max stationary variance error "
            f"{max(validation['stationary_variance_rel_error']):.4f}"
        )
    obj.echo(f"wrote {path}")
    sys.exit(code)


def _parse_values(param: str, values: str | None, span: tuple | None) -> list:
    if (values is None) == (span is None):
        raise click.UsageError("give exactly one of --values and --range")
    if values is not None:
        try:
            out = [float(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise click.BadParameter(f"cannot parse {values!r}", param_hint="--values") from None
    else:
        start, stop, count = span
        if count < 1:
            raise click.BadParameter("count must be positive", param_hint="--range")
        out = list(np.linspace(start, stop, int(count)))
    if not out:
        raise click.BadParameter("no values given", param_hint="--values")
    if param == "N":
        if any(v != int(v) or v < 1 for v in out):
            raise click.BadParameter("N values must be positive integers")
        out = list(dict.fromkeys(int(v) for v in out))
    return out


def sweep_rows(cfg: Config, param: str, values: list):
    grid = FrequencyGrid.uniform(cfg.analysis.grid_size)
    for value in values:
        spec = cfg.build_spec(**{param: value})
        v = certify(spec, grid)
        last = None
        if v.mss:
            loop = build_vehicle_loop(spec)
            last = variance_ladder(loop.T, loop.S, loop.H, spec.P_d, spec.N)[-1]
        yield value, v.rho_A, v.max_gain, v.margin, v.string_stable, v.limiting_variance, last


@main.command("sweep")
@click.option("--param", required=True, type=click.Choice(["h", "P_d", "N"]))
@click.option("--values", default=None, help="Comma-separated values, e.g. 2.4,3.2.")
@click.option("--range", "span", default=None, type=(float, float, int), help="START STOP COUNT, evenly spaced.")
@click.pass_obj
@guarded
def cmd_sweep(obj: Context, param, values, span):
    """One verdict row per parameter value."""
    cfg = obj.config()
    vals = _parse_values(param, values, span)
    rows = list(sweep_rows(cfg, param, vals))
    path = write_csv(obj.out / f"sweep_{param}.csv", SWEEP_COLUMNS, rows)
    doc = _document(
        "sweep",
        cfg,
        parameter=param,
        rows=[dict(zip(SWEEP_COLUMNS, r)) for r in rows],
        files={"sweep": str(path.relative_to(obj.out))},
        exit_code=EXIT_OK,
    )
    write_json(obj.out / f"sweep_{param}.json", doc)
    for r in rows:
        obj.echo(f"{param} = {r[0]:g}: {'stable' if r[4] else 'unstable'}, rho(A) = {r[1]:.6g}, max|T| = {r[2]:.6g}")
    obj.echo(f"wrote {path}")
    sys.exit(EXIT_OK)


EXAMPLE_CONFIGS = ("paper_h3.2", "paper_h2.4")
NONZERO_IC = {"mu": 0.5, "P": 0.1}
SCALES = {"desk": {"realizations": 20000, "followers": 5}, "full": {"realizations": 1_000_000, "followers": 20}}


def _cost_seconds(scale: str, horizon: int) -> float:
    s = SCALES[scale]
    runs = len(EXAMPLE_CONFIGS) * 2
    return runs * s["realizations"] * s["followers"] * horizon / MC_THROUGHPUT


@main.command("reproduce-paper")
@click.option("--scale", default="desk", show_default=True, type=click.Choice(sorted(SCALES)))
@click.option("--yes-expensive", is_flag=True, help="Allow the full-scale ensemble.")
@click.pass_obj
@guarded
def cmd_reproduce(obj: Context, scale, yes_expensive):
    """Data behind the numerical-example figures for both headways."""
    base = {name: load_config(name) for name in EXAMPLE_CONFIGS}
    horizon = base[EXAMPLE_CONFIGS[0]].monte_carlo.horizon
    cost = _cost_seconds(scale, horizon)
    if scale == "full" and not yes_expensive:
        click.echo(
            f"refusing full scale without --yes-expensive: {len(EXAMPLE_CONFIGS) * 2} ensembles of "
            f"{SCALES['full']['realizations']} realizations, about {cost / 3600:.1f} CPU-hours",
            err=True,
        )
        sys.exit(EXIT_ERROR)
    obj.echo(f"scale {scale}: estimated Monte Carlo cost {cost:.0f} CPU-seconds")
    settings = SCALES[scale]
    summary = {}
    started = time.perf_counter()
    for name, cfg in base.items():
        if obj.seed is not None:
            cfg = cfg.with_overrides(**{"monte_carlo.seed": obj.seed})
        for ic_label, ic in (("zero", "zero"), ("nonzero", NONZERO_IC)):
            case = cfg.with_overrides(initial_condition=ic)
            tag = f"{name}_{ic_label}_"
            body = analyze(case, obj.out, prefix=tag)
            mc = simulate(case, obj.out, prefix=tag, realizations=settings["realizations"], followers=settings["followers"])
            body["files"].update({f"mc_{k}": p for k, p in mc.pop("files").items()})
            body["monte_carlo"] = mc
            body["files"] = _relative(body["files"], obj.out)
            summary[f"{name}/{ic_label}"] = body
            obj.echo(_verdict_line(f"{name} ({ic_label} initial condition)", Verdict(**body["verdict"])))
    doc = _document("reproduce-paper", None, scale=scale, nonzero_initial_condition=NONZERO_IC, cases=summary, exit_code=EXIT_OK)
    path = write_json(obj.out / "reproduce.json", doc)
    obj.echo(f"wrote {path} in {time.perf_counter() - started:.1f} s")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
