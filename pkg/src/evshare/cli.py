#!/usr/bin/env python3
"""
evshare CLI - experiments on EV charging in radial distribution grids.

Every subcommand reads an experiment config, writes CSV artifacts plus a
manifest into the output directory and prints a short summary.
"""

import functools
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

import click
import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from evshare import __version__
from evshare.allocator import Allocator
from evshare.artifacts import MANIFEST_NAME, ArtifactWriter, RunManifest, compare_artifacts
from evshare.config import MODEL_NAMES, ExperimentConfig
from evshare.errors import ConfigError, EvShareError
from evshare.fluid import (
    erlang_success,
    explicit_markov,
    invariant_solve,
    markov_ode,
    objective_diagnostic,
    picard_solve,
)
from evshare.grid import Network
from evshare.loadflow import check_domination
from evshare.log import configure_logging, get_logger
from evshare.productform import mean_occupancy, ps_loads, top_states, validate_against_simulation
from evshare.scenarios import SCENARIOS, preset_config, run_scenario
from evshare.simulator import simulate_replications
from evshare.stochastics import (
    ClassTable,
    DeterministicRatio,
    JointBD,
    Law,
    ParetoRatio,
    expected_occupancy,
    gamma_effective,
)
from evshare.weights import (
    WeightProblem,
    evaluate_weights,
    lower_bound_construction,
    solve_deterministic_ratio,
    solve_pareto_ratio,
)

console = Console()
err_console = Console(stderr=True)
log = get_logger(__name__)

Frames = Dict[str, pd.DataFrame]
SUMMARY_ROWS = 20


@dataclass
class RunOptions:
    """Global options shared by every subcommand."""

    config: Optional[Path]
    out: Optional[Path]
    seed: Optional[int]
    jobs: int
    model: Optional[str]


def get_template_path() -> Path:
    """Packaged default experiment (config plus network files)."""
    return Path(__file__).parent / "templates"


def node_ids(net: Network) -> np.ndarray:
    return np.array([net.label(k) for k in range(1, net.node_count + 1)])


def parse_state(text: Optional[str], shape: Tuple[int, int]) -> np.ndarray:
    """`1,2;3,4` gives rows per node and columns per type; a bare list is one type."""
    if text is None:
        return np.ones(shape)
    try:
        rows = [[float(v) for v in row.split(",")] for row in text.split(";")]
    except ValueError:
        raise ConfigError(f"cannot parse state {text!r}") from None
    state = np.array(rows, dtype=float)
    if state.shape == (1, shape[0]) and shape[1] == 1:
        state = state.T
    if state.shape != shape:
        raise ConfigError(f"state has shape {state.shape}, expected {shape}")
    return state


def _solve_model(model: str) -> str:
    return "ac" if model == "ac" else "distflow"


def _class_frame(net: Network, columns: Dict[str, np.ndarray]) -> pd.DataFrame:
    """Per-(node, type) table from (I, J) arrays."""
    first = next(iter(columns.values()))
    nodes, types = first.shape
    data = {
        "node": np.repeat(node_ids(net), types),
        "type": np.tile(np.arange(types), nodes),
    }
    data.update({name: np.asarray(values).ravel() for name, values in columns.items()})
    return pd.DataFrame(data)


def _summary(title: str, frame: pd.DataFrame) -> Table:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column), justify="right")
    for row in frame.head(SUMMARY_ROWS).itertuples(index=False):
        table.add_row(*[f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v) for v in row])
    if len(frame) > SUMMARY_ROWS:
        table.caption = f"{len(frame) - SUMMARY_ROWS} more rows in the CSV"
    return table


# ---------------------------------------------------------------------------
# Command bodies: (config, jobs, **options) -> (frames, name of the summary frame)


def run_simulate(config: ExperimentConfig, jobs: int, horizon: Optional[float] = None,
                 replications: Optional[int] = None) -> Tuple[Frames, str]:
    net, classes = config.build()
    run = config.run
    metrics = simulate_replications(
        net, classes, horizon or run.horizon, run.warmup, run.seed, config.model,
        replications=replications or run.replications, jobs=jobs,
        state_distribution=run.state_distribution, truncation=run.truncation, event_log=run.event_log,
    )
    frames = {"simulate.csv": metrics.to_frame(net.labels)}
    if run.event_log:
        frames["events.csv"] = metrics.event_frame()
    if run.state_distribution:
        frames["state_distribution.csv"] = pd.DataFrame(
            [(" ".join(str(int(n)) for n in key), p) for key, p in metrics.distribution.items()],
            columns=["state", "probability"],
        )
    return frames, "simulate.csv"


def run_fluid_transient(config: ExperimentConfig, jobs: int, method: str = "picard", horizon: Optional[float] = None,
                        dt: Optional[float] = None, init: Optional[str] = None) -> Tuple[Frames, str]:
    net, classes = config.build()
    horizon = horizon or config.run.fluid_horizon
    dt = dt or config.run.dt or 0.005
    z0 = parse_state(init, (classes.node_count, classes.type_count)) if init else None
    if method == "picard":
        allocator = Allocator(net, classes, config.model, jobs=jobs)
        traj = picard_solve(net, classes, z0, horizon, dt, allocator=allocator)
    elif method == "explicit":
        traj = explicit_markov(net, classes, z0, horizon, dt)
    else:
        traj = markov_ode(net, classes, z0, horizon, dt, model=config.model)
    frame = traj.to_frame(net.labels)
    last = frame[frame["t"] == frame["t"].max()]
    return {"fluid_transient.csv": frame, "fluid_transient_end.csv": last.reset_index(drop=True)}, \
        "fluid_transient_end.csv"


def run_fluid_invariant(config: ExperimentConfig, jobs: int, diagnostic: bool = False) -> Tuple[Frames, str]:
    net, classes = config.build()
    point = invariant_solve(net, classes, _solve_model(config.model))
    frames = {
        "fluid_invariant.csv": _class_frame(net, {
            "gamma": point.gamma, "lam_star": point.lam_star, "z_star": point.z_star,
            "p_star": point.p_star, "success_prob": point.success_prob,
        }),
        "fluid_multipliers.csv": pd.DataFrame({
            "node": node_ids(net),
            "voltage": point.multipliers["voltage"],
            "voltage_upper": point.multipliers["voltage_upper"],
            "node_cap": point.multipliers["node_cap"],
        }),
    }
    if diagnostic:
        frames["objective_diagnostic.csv"] = objective_diagnostic(point, classes, seed=config.run.seed)
    return frames, "fluid_invariant.csv"


def run_allocate(config: ExperimentConfig, jobs: int, state: Optional[str] = None) -> Tuple[Frames, str]:
    net, classes = config.build()
    z = parse_state(state, (classes.node_count, classes.type_count))
    alloc = Allocator(net, classes, config.model)(z)
    frames = {
        "allocation.csv": _class_frame(net, {"z": z, "p": alloc.p, "lam": alloc.lam, "cap_mult": alloc.h3}),
        "allocation_voltages.csv": pd.DataFrame({
            "node": node_ids(net),
            "w": alloc.voltages[1:],
            "lower_mult": alloc.h2,
            "upper_mult": alloc.h1,
        }),
    }
    log.info("cli.allocate", model=alloc.model, kkt=alloc.kkt_residual, exactness_gap=alloc.exactness_gap)
    return frames, "allocation.csv"


def run_loadflow_check(config: ExperimentConfig, jobs: int, scale: float = 1.0) -> Tuple[Frames, str]:
    """Domination of AC by Distflow voltages at the scaled invariant load."""
    net, classes = config.build()
    load = scale * invariant_solve(net, classes, "distflow").lam_star.sum(axis=1)
    report = check_domination(net, load)
    frame = pd.DataFrame({
        "node": node_ids(net),
        "load": load,
        "w_lin": report.w_lin[1:],
        "w_ac": report.w_ac[1:],
        "gap": report.gaps[1:],
    })
    report.raise_for_violations()
    return {"loadflow.csv": frame}, "loadflow.csv"


def run_product_form(config: ExperimentConfig, jobs: int, top: int = 10, validate: bool = False,
                     horizon: Optional[float] = None) -> Tuple[Frames, str]:
    net, classes = config.build()
    loads = ps_loads(net, classes)
    loads.require_stable()
    frames = {
        "product_form_top.csv": pd.DataFrame(
            [(" ".join(map(str, state)), p) for state, p in top_states(loads, top)], columns=["state", "probability"]
        ),
        "product_form_occupancy.csv": pd.DataFrame({
            "node": node_ids(net), "rho": loads.rho, "mean_z": mean_occupancy(loads),
        }),
    }
    if validate:
        check = validate_against_simulation(net, classes, horizon or config.run.horizon, config.run.seed)
        frames["product_form_tv.csv"] = pd.DataFrame(
            [(law, check.tv[law], check.max_occupancy[law]) for law in check.tv],
            columns=["law", "tv", "max_occupancy"],
        )
        return frames, "product_form_tv.csv"
    return frames, "product_form_top.csv"


def _ratio_law(classes: ClassTable, ratio: str, shape: float) -> JointBD:
    """The configured law, or H = E[B]/E[D] made deterministic or Pareto with the same mean."""
    joint = classes.joint[0]
    if ratio == "config":
        return joint
    mean_h = joint.mean_b / joint.mean_d
    d_law = getattr(joint, "d_law", Law("exponential", joint.mean_d))
    if ratio == "det":
        return DeterministicRatio(mean_h, d_law)
    return ParetoRatio(shape, (shape - 1.0) * mean_h, d_law)


def run_optimize_weights(config: ExperimentConfig, jobs: int, ratio: str = "config", shape: float = 2.0,
                         bound: bool = False) -> Tuple[Frames, str]:
    net, classes = config.build()
    law = _ratio_law(classes, ratio, shape)
    classes = ClassTable(classes.lam, classes.c_max, (law,), classes.weights, classes.form, classes.alpha)
    prob = WeightProblem.from_network(net, classes)
    solutions = {"weights.csv": solve_deterministic_ratio(prob) if isinstance(law, DeterministicRatio)
                 else solve_pareto_ratio(prob)}
    if bound:
        solutions["weights_bound.csv"] = lower_bound_construction(prob)
    gamma = gamma_effective(net, classes)[:, 0]
    frames: Frames = {}
    rows = []
    for name, sol in solutions.items():
        evaluation = evaluate_weights(net, classes, sol.w)
        per_node = gamma * np.array([float(law.success_prob(p)) for p in evaluation.p_star])
        frames[name] = pd.DataFrame({
            "node": node_ids(net), "w": sol.w, "c": sol.c,
            "selected": sol.selected if sol.selected.size else sol.c > 0, "success_rate": per_node,
        })
        rows.append({
            "kind": sol.kind, "objective": sol.objective, "slack": sol.slack,
            "success_rate": evaluation.success_rate, "h": evaluation.h, "kkt_residual": sol.kkt_residual,
        })
    frames["weights_summary.csv"] = pd.DataFrame(rows, columns=["kind", "objective", "slack", "success_rate", "h",
                                                               "kkt_residual"])
    return frames, "weights_summary.csv"


def run_compare(config: ExperimentConfig, jobs: int, horizon: Optional[float] = None,
                replications: Optional[int] = None) -> Tuple[Frames, str]:
    """Simulation against the fluid invariant point on one config."""
    net, classes = config.build()
    run = config.run
    point = invariant_solve(net, classes, _solve_model(config.model))
    metrics = simulate_replications(net, classes, horizon or run.horizon, run.warmup, run.seed, config.model,
                                    replications=replications or run.replications, jobs=jobs)
    sim_z = metrics.mean_z.sum(axis=1)
    fluid_z = point.z_star.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.abs(fluid_z - sim_z) / sim_z
        sim_success = 1.0 - sim_z / metrics.mean_q.sum(axis=1)
        fluid_success = 1.0 - fluid_z / expected_occupancy(net, classes).sum(axis=1)
        rel_success = np.abs(fluid_success - sim_success) / sim_success
    ids = node_ids(net)
    frames = {
        "compare.csv": pd.DataFrame({"node": ids, "sim_mean_z": sim_z, "fluid_z_star": fluid_z, "rel_err": rel}),
        "compare_success.csv": pd.DataFrame({
            "node": ids, "sim_success": sim_success, "fluid_success": fluid_success, "rel_err": rel_success,
        }),
    }
    if classes.type_count == 1:
        log.debug("cli.compare.erlang", fluid_success=erlang_success(point, net, classes)[:, 0].tolist())
    return frames, "compare.csv"


def run_scenario_command(config: ExperimentConfig, jobs: int, name: str = "case-two-type",
                         network: Optional[str] = None) -> Tuple[Frames, str]:
    frames = run_scenario(name, Path(network) if network else None, _solve_model(config.model))
    return frames, next(iter(frames))


COMMANDS: Dict[str, Callable[..., Tuple[Frames, str]]] = {
    "simulate": run_simulate,
    "fluid-transient": run_fluid_transient,
    "fluid-invariant": run_fluid_invariant,
    "allocate": run_allocate,
    "loadflow-check": run_loadflow_check,
    "product-form": run_product_form,
    "optimize-weights": run_optimize_weights,
    "compare": run_compare,
    "scenario": run_scenario_command,
}


# ---------------------------------------------------------------------------
# Execution


def load_config(opts: RunOptions, command: str, options: Dict[str, Any]) -> ExperimentConfig:
    if command == "scenario":
        config = preset_config(options["name"], options.get("network"), _solve_model(opts.model or "distflow"))
    elif opts.config is None:
        raise ConfigError(f"{command} needs --config")
    else:
        config = ExperimentConfig.from_file(opts.config)
    return config.updated(seed=opts.seed, model=opts.model)


def execute(opts: RunOptions, command: str, options: Dict[str, Any], config: Optional[ExperimentConfig] = None) -> RunManifest:
    """Run one command and record its artifacts; the single writer of the run."""
    if config is None:
        config = load_config(opts, command, options)
    # presets live inside the package, so their default output goes to the working directory
    base = Path.cwd() if command == "scenario" else config.base_dir
    out = opts.out if opts.out is not None else base / config.output_dir
    log.info("cli.run", command=command, out=str(out), seed=config.run.seed, model=config.model)
    frames, headline = COMMANDS[command](config, opts.jobs, **options)

    writer = ArtifactWriter(out)
    for name, frame in frames.items():
        writer.frame(name, frame)
    manifest = RunManifest(
        command=command,
        options=options,
        config=config.model_dump(mode="json"),
        config_hash=config.config_hash(),
        base_dir=str(config.base_dir),
        seed=config.run.seed,
        jobs=opts.jobs,
        model=config.model,
    )
    writer.finish(manifest)
    console.print(_summary(f"{command}: {headline}", frames[headline]))
    console.print(f"[green]✓[/green] wrote {len(frames)} artifacts to {out}")
    return manifest


def handle_errors(fn: Callable) -> Callable:
    """Report evshare failures and exit 1 (compute) or 2 (config)."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except EvShareError as exc:
            err_console.print(f"[red]✗[/red] {type(exc).__name__}: {exc}")
            log.error("cli.failed", error=type(exc).__name__, message=str(exc))
            sys.exit(exc.exit_code)

    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path), help="Experiment config (JSON)")
@click.option("--out", type=click.Path(path_type=Path), help="Output directory for CSVs and the manifest")
@click.option("--seed", type=click.IntRange(min=0), help="Override run.seed")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Worker count")
@click.option("--model", type=click.Choice(MODEL_NAMES), help="Override the load-flow model")
@click.option("-v", "--verbose", count=True, help="-v info, -vv debug logs on stderr")
@click.option("--log-json", is_flag=True, help="Structured JSON logs")
@click.version_option(version=__version__)
@click.pass_context
def main(ctx, config_path, out, seed, jobs, model, verbose, log_json):
    """
    evshare - EV charging as a stochastic resource-sharing network

    Simulation, fluid approximation and load-flow constrained allocation of
    charging power on radial distribution grids.
    """
    configure_logging(verbose, log_json)
    ctx.obj = RunOptions(config_path, out, seed, jobs, model)


@main.command()
@click.option("--horizon", type=click.FloatRange(min=0, min_open=True), help="Override run.horizon")
@click.option("--replications", type=click.IntRange(min=1), help="Override run.replications")
@click.pass_obj
@handle_errors
def simulate(opts: RunOptions, **options):
    """Discrete-event simulation of the charging network"""
    execute(opts, "simulate", options)


@main.command("fluid-transient")
@click.option("--method", type=click.Choice(["picard", "explicit", "ode"]), default="picard", show_default=True)
@click.option("--horizon", type=click.FloatRange(min=0, min_open=True), help="Override run.fluid_horizon")
@click.option("--dt", type=click.FloatRange(min=0, min_open=True), help="Override run.dt")
@click.option("--init", help="Initial z, rows per node separated by ';'")
@click.pass_obj
@handle_errors
def fluid_transient(opts: RunOptions, **options):
    """Transient fluid trajectory"""
    execute(opts, "fluid-transient", options)


@main.command("fluid-invariant")
@click.option("--diagnostic", is_flag=True, help="Also check the objective identity by Monte Carlo")
@click.pass_obj
@handle_errors
def fluid_invariant(opts: RunOptions, **options):
    """Invariant point of the fluid model"""
    execute(opts, "fluid-invariant", options)


@main.command()
@click.option("--state", help="z per node and type, e.g. '1,2;0,3'; defaults to all ones")
@click.pass_obj
@handle_errors
def allocate(opts: RunOptions, **options):
    """Charging rates for one state"""
    execute(opts, "allocate", options)


@main.command("loadflow-check")
@click.option("--scale", type=click.FloatRange(min=0), default=1.0, show_default=True,
              help="Multiplier on the invariant-point load")
@click.pass_obj
@handle_errors
def loadflow_check(opts: RunOptions, **options):
    """Check that Distflow voltages dominate the AC voltages"""
    execute(opts, "loadflow-check", options)


@main.command("product-form")
@click.option("--top", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--validate", is_flag=True, help="Compare with simulation for exponential and deterministic B")
@click.option("--horizon", type=click.FloatRange(min=0, min_open=True), help="Simulation horizon")
@click.pass_obj
@handle_errors
def product_form(opts: RunOptions, **options):
    """Stationary law of the processor-sharing line"""
    execute(opts, "product-form", options)


@main.command("optimize-weights")
@click.option("--ratio", type=click.Choice(["config", "det", "pareto"]), default="config", show_default=True,
              help="Law of H = B/D: as configured, deterministic, or Pareto with the same mean")
@click.option("--shape", type=click.FloatRange(min=1, min_open=True), default=2.0, show_default=True,
              help="Pareto shape a for --ratio pareto")
@click.option("--bound", is_flag=True, help="Add the Markov-inequality lower-bound construction")
@click.pass_obj
@handle_errors
def optimize_weights(opts: RunOptions, **options):
    """Utility weights maximizing successful charges in overload"""
    execute(opts, "optimize-weights", options)


@main.command()
@click.option("--horizon", type=click.FloatRange(min=0, min_open=True), help="Override run.horizon")
@click.option("--replications", type=click.IntRange(min=1), help="Override run.replications")
@click.pass_obj
@handle_errors
def compare(opts: RunOptions, **options):
    """Relative error between simulation and the fluid invariant point"""
    execute(opts, "compare", options)


@main.command()
@click.argument("name", type=click.Choice(sorted(SCENARIOS)))
@click.option("--network", type=click.Path(exists=True, dir_okay=False), help="Network CSV instead of the 47-bus feeder")
@click.pass_obj
@handle_errors
def scenario(opts: RunOptions, **options):
    """Named case-study presets"""
    execute(opts, "scenario", options)


@main.command()
@click.argument("manifest_path", type=click.Path(exists=True, path_type=Path))
@click.pass_obj
@handle_errors
def rerun(opts: RunOptions, manifest_path):
    """Re-execute a recorded run and verify the CSVs are byte-identical"""
    source = manifest_path.parent if manifest_path.is_file() else manifest_path
    expected = RunManifest.from_file(manifest_path)
    config = ExperimentConfig.from_dict(expected.config, expected.base_dir)
    out = opts.out if opts.out is not None else source / "rerun"
    replay = RunOptions(None, out, None, expected.jobs, None)
    actual = execute(replay, expected.command, expected.options, config)
    differing = compare_artifacts(expected, actual)
    if differing:
        raise EvShareError(f"rerun differs from {source / MANIFEST_NAME}: {', '.join(differing)}")
    console.print(f"[green]✓[/green] {len(actual.artifacts)} artifacts reproduced byte for byte")


@main.command()
@click.argument("directory", type=click.Path(file_okay=False, path_type=Path), default=".")
@click.option("--force", is_flag=True, help="Overwrite existing files")
@handle_errors
def init(directory, force):
    """Write the default experiment config and network files"""
    templates = get_template_path()
    target = directory / "config.json"
    if target.exists() and not force:
        console.print("[yellow]config.json already exists. Use --force to overwrite.[/yellow]")
        return
    directory.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(templates / "default_experiment" / "config.json", target)
    networks = directory / "networks"
    networks.mkdir(exist_ok=True)
    for csv_file in sorted((templates / "networks").glob("*.csv")):
        shutil.copyfile(csv_file, networks / csv_file.name)
    console.print(f"[green]✓[/green] Experiment initialized in {directory}")
    console.print(f"[dim]Run 'evshare --config {target} fluid-invariant' to start[/dim]")


if __name__ == "__main__":
    main()
