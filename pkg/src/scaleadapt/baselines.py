"""Reference solvers and the performance-gap report.

nearest_neighbor and two_opt are the cheap heuristics; exact_small is an
exhaustive branch-and-prune search usable only at toy sizes.  gap_table
joins solver runs against baseline objectives and computes the signed
percentage gap, negative meaning better than the baseline for every task.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import problems as pr


class SizeError(ValueError):
    """Instance is too large for the exhaustive solver."""


EXACT_CAPS = {"tsp": 10, "cvrp": 8, "pctsp": 8, "op": 8}


def nearest_neighbor(instance: pr.Instance) -> pr.Solution:
    """Greedy feasible-nearest construction; ties break to the lowest index.

    tsp starts at node 0; depot tasks start at the depot and pick whichever
    feasible action (customer or return) is nearest.
    """
    state = pr.initial_state(instance)
    if instance.task == "tsp":
        state = pr.step(state, 0)
    while not pr.is_terminal(state):
        mask = pr.feasible_mask(state)
        dist = pr.locality_distances(state)
        pick = int(np.where(mask, dist, np.inf).argmin())
        state = pr.step(state, pick)
    return pr.evaluate(instance, state.partial)


def two_opt(instance: pr.Instance, solution: pr.Solution, max_passes: int = 20) -> pr.Solution:
    """First-improvement 2-opt on a tsp tour."""
    if instance.task != "tsp":
        raise ValueError("two_opt applies to tsp tours only")
    if max_passes < 1:
        raise ValueError("max_passes must be >= 1")
    tour = list(solution.actions)
    n = len(tour)
    coords = instance.coords
    d = pr.dist_matrix(coords)
    for _ in range(max_passes):
        improved = False
        for i in range(n - 1):
            a, b = tour[i], tour[i + 1]
            for j in range(i + 2, n):
                c, e = tour[j], tour[(j + 1) % n]
                if e == a:
                    continue
                delta = d[a, c] + d[b, e] - d[a, b] - d[c, e]
                if delta < -1e-12:
                    tour[i + 1 : j + 1] = reversed(tour[i + 1 : j + 1])
                    improved = True
                    a, b = tour[i], tour[i + 1]
        if not improved:
            break
    return pr.evaluate(instance, tour)


def exact_small(instance: pr.Instance) -> pr.Solution:
    """Optimal solution by exhaustive feasible-sequence search with pruning."""
    cap = EXACT_CAPS[instance.task]
    if instance.n > cap:
        raise SizeError(f"exact_small handles {instance.task} up to n={cap}, got {instance.n}")
    if instance.task == "tsp":
        return _exact_tsp(instance)
    return _exact_dfs(instance)


def _exact_tsp(instance: pr.Instance) -> pr.Solution:
    n = instance.n
    d = pr.dist_matrix(instance.coords)
    best = [math.inf, None]
    tour = [0]
    visited = np.zeros(n, dtype=bool)
    visited[0] = True

    def rec(length: float):
        if len(tour) == n:
            total = length + d[tour[-1], 0]
            if total < best[0]:
                best[0] = total
                best[1] = tuple(tour)
            return
        cur = tour[-1]
        for j in range(1, n):
            if visited[j]:
                continue
            nl = length + d[cur, j]
            if nl + d[j, 0] >= best[0]:
                continue
            visited[j] = True
            tour.append(j)
            rec(nl)
            tour.pop()
            visited[j] = False

    rec(0.0)
    return pr.evaluate(instance, best[1])


def _exact_dfs(instance: pr.Instance) -> pr.Solution:
    maximize = pr.is_maximization(instance.task)
    best = [(-math.inf if maximize else math.inf), None]
    home = pr.dist_matrix(instance.coords)[:, 0]
    if instance.task == "op":
        prize_left_total = float(instance.prizes.sum())

    def bound_beats_best(state: pr.RolloutState) -> bool:
        if maximize:
            upper = state.collected + float(instance.prizes[~state.visited].sum())
            return upper > best[0]
        lower = state.traveled + (home[state.current] if state.current else 0.0)
        return lower < best[0]

    def rec(state: pr.RolloutState):
        if pr.is_terminal(state):
            obj = pr.objective(instance, state.partial)
            if (obj > best[0]) if maximize else (obj < best[0]):
                best[0] = obj
                best[1] = state.partial
            return
        if best[1] is not None and not bound_beats_best(state):
            return
        for j in np.flatnonzero(pr.feasible_mask(state)):
            rec(pr.step(state, int(j)))

    rec(pr.initial_state(instance))
    return pr.Solution(best[1], best[0])


# ---------------------------------------------------------------------------
# gap report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunResult:
    instance: str
    method: str
    obj: float
    seconds: float = 0.0


@dataclass(frozen=True)
class GapRow:
    instance: str
    method: str
    obj: float
    obj_b: float
    gap_pct: float
    seconds: float


def gap_pct(obj: float, obj_b: float, task: str) -> float:
    """Signed percentage gap; negative always means better than the baseline."""
    if obj_b == 0.0:
        raise ValueError("baseline objective is 0; gap undefined")
    diff = (obj_b - obj) if pr.is_maximization(task) else (obj - obj_b)
    return diff / obj_b * 100.0


def gap_table(
    results: Sequence[RunResult], baseline: Mapping[str, float], task: str
) -> list[GapRow]:
    missing = sorted({r.instance for r in results} - set(baseline))
    if missing:
        raise KeyError(f"no baseline objective for instances: {', '.join(missing)}")
    rows = [
        GapRow(
            r.instance,
            r.method,
            r.obj,
            float(baseline[r.instance]),
            gap_pct(r.obj, float(baseline[r.instance]), task),
            r.seconds,
        )
        for r in results
    ]
    rows.sort(key=lambda g: (g.instance, g.method))
    return rows


def mean_gaps(rows: Sequence[GapRow]) -> dict[str, float]:
    sums: dict[str, list[float]] = {}
    for g in rows:
        sums.setdefault(g.method, []).append(g.gap_pct)
    return {m: float(np.mean(v)) for m, v in sorted(sums.items())}


def write_gap_csv(path, rows: Sequence[GapRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("instance,method,obj,obj_B,gap_pct,seconds\n")
        for g in rows:
            f.write(
                f"{g.instance},{g.method},{g.obj:.17g},{g.obj_b:.17g},"
                f"{g.gap_pct:.17g},{g.seconds:.17g}\n"
            )
