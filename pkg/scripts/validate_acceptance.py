#!/usr/bin/env python3
"""
Acceptance checks for evshare.

Runs the analytic cross-checks between modules (closed forms, solvers,
explicit fluid solutions, knapsack enumeration) and, with --full, the
simulation-based ones. Prints a rich table and exits non-zero on failure.
"""

import math
import sys
import time
from pathlib import Path
from typing import Callable, List, Tuple

import click
import numpy as np
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from evshare.allocator import Allocator, allocate_ac, allocate_distflow  # noqa: E402
from evshare.fluid import aggregate_success, explicit_markov, invariant_solve, picard_solve  # noqa: E402
from evshare.grid import line_network, synthetic_tree  # noqa: E402
from evshare.loadflow import check_domination  # noqa: E402
from evshare.log import configure_logging  # noqa: E402
from evshare.productform import ps_loads, validate_against_simulation  # noqa: E402
from evshare.scenarios import markov_config, packaged_networks  # noqa: E402
from evshare.simulator import simulate  # noqa: E402
from evshare.stochastics import ClassTable, IndependentExp, ParetoRatio, erlang_mean_occupancy  # noqa: E402
from evshare.weights import (  # noqa: E402
    WeightProblem,
    knapsack_dp,
    knapsack_exhaustive,
    overload_line_instance,
    solve_deterministic_ratio,
    solve_pareto_ratio,
)

console = Console()

Check = Tuple[bool, str]


def two_node(k_spaces=math.inf):
    net = line_network([0.01, 0.005], voltage_drop_pct=0.1, k_spaces=k_spaces)
    classes = ClassTable.build(net, [12.0, 12.0], IndependentExp(), weighting="resistance")
    return net, classes


def check_invariant_point() -> Check:
    net, classes = two_node(k_spaces=10)
    point = invariant_solve(net, classes)
    err = max(np.max(np.abs(point.lam_star - 3.8)), np.max(np.abs(point.z_star - 6.2)))
    return err < 1e-6, f"max error {err:.2e}, Little residual {point.little_residual:.2e}"


def check_fixed_point_residuals() -> Check:
    worst = 0.0
    cases = [two_node(k_spaces=10)]
    tree = synthetic_tree(6, seed=3)
    cases.append((tree, ClassTable.build(tree, np.full(tree.node_count, 0.5), IndependentExp())))
    for net, classes in cases:
        worst = max(worst, invariant_solve(net, classes).little_residual)
    return worst <= 1e-8, f"worst residual {worst:.2e}"


def check_explicit_markov() -> Check:
    net, classes = two_node()
    dt = 1.0 / 200.0
    allocator = Allocator(net, classes, "closed-form")
    traj = picard_solve(net, classes, horizon=10.0, dt=dt, allocator=allocator)
    exact = explicit_markov(net, classes, horizon=10.0, dt=dt)
    gap = float(np.max(np.abs(traj.z - exact.z)))
    return gap <= 1e-3, f"sup-norm gap {gap:.2e}"


def check_fairness_rates() -> Check:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        r = rng.uniform(0.002, 0.02, 4)
        net = line_network(r, voltage_drop_pct=0.1)
        classes = ClassTable.build(net, np.ones(4), IndependentExp(), weighting="resistance")
        z = rng.integers(1, 6, 4).astype(float)
        alloc = allocate_distflow(net, classes, z)
        target = net.deltas[-1] / float(net.cum_r[1:] @ z)
        worst = max(worst, float(np.max(np.abs(alloc.p[:, 0] / target - 1.0))))
    return worst <= 1e-6, f"worst relative deviation {worst:.2e}"


def check_ac_domination() -> Check:
    rng = np.random.default_rng(1)
    worst, gap = -math.inf, 0.0
    for seed in range(100):
        net = synthetic_tree(int(rng.integers(4, 12)), seed=seed)
        report = check_domination(net, rng.uniform(0.0, 0.4, net.node_count))
        worst = max(worst, float(np.max(-report.gaps[1:])))
    net = line_network([0.01], [0.01], voltage_drop_pct=0.1)
    classes = ClassTable.build(net, [1.0], IndependentExp())
    gap = allocate_ac(net, classes, [6.2]).exactness_gap
    return worst <= 1e-9 and gap <= 1e-6, f"worst excess {worst:.2e}, exactness gap {gap:.2e}"


def check_weight_design() -> Check:
    net, classes = overload_line_instance()
    det = solve_deterministic_ratio(WeightProblem.from_network(net, classes))
    objectives = []
    for a in (1.1, 3.0):
        pnet, pclasses = overload_line_instance(ratio=ParetoRatio(a, a - 1.0))
        objectives.append(solve_pareto_ratio(WeightProblem.from_network(pnet, pclasses)).objective)
    tail_off = bool(np.any(det.w == 0))
    ordered = objectives[0] >= objectives[1] >= det.objective
    return tail_off and ordered, f"Pareto 1.1: {objectives[0]:.3f}, Pareto 3: {objectives[1]:.3f}, det: {det.objective:.3f}"


def check_knapsack() -> Check:
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(50):
        n = int(rng.integers(2, 16))
        values = rng.integers(1, 6, n).astype(float)
        sizes = rng.integers(1, 17, n) / 32.0
        exact = knapsack_exhaustive(values, sizes, 1.0)
        dp = knapsack_dp(values, sizes, 1.0)
        mismatches += dp.tolist() != exact.tolist()
    return mismatches == 0, f"{mismatches} mismatches in 50 tight instances"


def check_markov_sweep() -> Check:
    network = packaged_networks() / "ten_node_line.csv"
    ok = True
    worst = -math.inf
    for rate in (0.5, 1.0, 2.0):
        previous = math.inf
        for lam in (10.0, 20.0, 30.0):
            net, classes = markov_config(lam, rate, 10, network).build()
            success = aggregate_success(invariant_solve(net, classes))
            bound = 1.0 / rate / (1.0 + 1.0 / rate)
            worst = max(worst, success - bound)
            ok &= success <= previous + 1e-9
            previous = success
    return ok and worst <= 1e-9, f"largest excess over the bound {worst:.2e}"


def check_erlang() -> Check:
    net = line_network([0.01], voltage_drop_pct=0.1, k_spaces=2)
    classes = ClassTable.build(net, [1.0], IndependentExp())
    metrics = simulate(net, classes, 2e4, seed=1, allocator=Allocator(net, classes, "closed-form"))
    target = erlang_mean_occupancy(2, 1.0)
    rel = abs(metrics.mean_q[0, 0] - target) / target
    return rel <= 0.02, f"E[Q] {metrics.mean_q[0, 0]:.4f} vs {target:.4f}"


def check_product_form() -> Check:
    net = line_network([0.01, 0.005], voltage_drop_pct=0.1)
    classes = ClassTable.build(net, [1.0, 1.0], IndependentExp())
    check = validate_against_simulation(net, classes, horizon=1e5, seed=0)
    rho = ps_loads(net, classes).rho_total
    return max(check.tv.values()) <= 0.02, f"rho {rho:.3f}, TV " + ", ".join(f"{k} {v:.4f}" for k, v in check.tv.items())


QUICK: List[Tuple[str, Callable[[], Check]]] = [
    ("invariant point on the two-node line", check_invariant_point),
    ("fixed-point residuals", check_fixed_point_residuals),
    ("Picard vs explicit Markovian solution", check_explicit_markov),
    ("equal rates under w = R", check_fairness_rates),
    ("Distflow dominates AC", check_ac_domination),
    ("weight design ordering", check_weight_design),
    ("knapsack DP vs enumeration", check_knapsack),
    ("Markovian success sweep", check_markov_sweep),
]

FULL: List[Tuple[str, Callable[[], Check]]] = [
    ("Erlang loss occupancy", check_erlang),
    ("product-form insensitivity", check_product_form),
]


@click.command()
@click.option("--full", is_flag=True, help="Also run the simulation-based checks")
@click.option("-v", "--verbose", count=True, help="Library logs on stderr")
def main(full: bool, verbose: int):
    """Run the acceptance checks and print a summary table."""
    configure_logging(verbose)
    checks = QUICK + (FULL if full else [])
    table = Table(title="evshare acceptance")
    table.add_column("Check")
    table.add_column("Result", justify="center")
    table.add_column("Detail")
    table.add_column("Seconds", justify="right")
    failures = 0
    with Progress(SpinnerColumn(), TextColumn("{task.description}"), TimeElapsedColumn(), console=console) as progress:
        task = progress.add_task("running", total=len(checks))
        for name, fn in checks:
            progress.update(task, description=name)
            start = time.perf_counter()
            try:
                passed, detail = fn()
            except Exception as exc:
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            failures += not passed
            mark = "[green]✓[/green]" if passed else "[red]✗[/red]"
            table.add_row(name, mark, detail, f"{time.perf_counter() - start:.1f}")
            progress.advance(task)
    console.print(table)
    if failures:
        console.print(f"[bold red]✗ {failures} of {len(checks)} checks failed[/bold red]")
        sys.exit(1)
    console.print(f"[bold green]✓ all {len(checks)} checks passed[/bold green]")


if __name__ == "__main__":
    main()
