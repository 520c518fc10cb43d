"""Routing problem definitions: instances, rollout state, feasibility, objectives.

Four node-sequencing tasks over the unit square share one action interface
(pick the next node index):

  tsp    visit every node once; minimise cyclic tour length
  cvrp   node 0 is the depot; serve every customer, returning to the depot
         whenever needed; sub-route demand may not exceed vehicle capacity
         (demands are normalised by capacity, so the bound is 1)
  pctsp  collect at least min_prize, pay a penalty per skipped customer;
         minimise route length plus penalties
  op     collect as much prize as the length budget allows; maximise prize

Feasibility tolerance on the float constraints is EPS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

TASKS = ("tsp", "cvrp", "pctsp", "op")
DEPOT_TASKS = ("cvrp", "pctsp", "op")
EPS = 1e-9


class FeasibilityError(ValueError):
    """An action or solution violates a task constraint."""


def is_maximization(task: str) -> bool:
    return task == "op"


def default_capacity(n: int) -> float:
    # vehicle capacity convention: 50 at n=100, else round(25 + n/20)
    return 50.0 if n == 100 else float(round(25 + n / 20))


def default_max_length(n: int) -> float:
    # unit-square length budget, 4.0 at n=100, sqrt-scaled elsewhere
    return 4.0 * math.sqrt(n / 100.0)


@dataclass(frozen=True, eq=False)
class Instance:
    """One problem instance; arrays are read-only after construction."""

    task: str
    coords: np.ndarray  # (n, 2) in the unit square
    demands: np.ndarray | None = None  # (n,) normalised by capacity; cvrp
    prizes: np.ndarray | None = None  # (n,); pctsp, op
    penalties: np.ndarray | None = None  # (n,); pctsp
    capacity: float | None = None  # cvrp, pre-normalisation
    max_length: float | None = None  # op
    min_prize: float | None = None  # pctsp
    seed: int | None = None
    name: str | None = None
    scale_factor: float | None = None  # multiply objectives to undo normalisation

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 2:
            raise ValueError(f"coords must be (n>=2, 2), got {coords.shape}")
        if coords.min() < -EPS or coords.max() > 1.0 + EPS:
            raise ValueError("coords must lie in the unit square")
        object.__setattr__(self, "coords", coords)
        n = coords.shape[0]

        def arr(name, value):
            a = np.asarray(value, dtype=np.float64)
            if a.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {a.shape}")
            if a.min() < -EPS:
                raise ValueError(f"{name} must be non-negative")
            object.__setattr__(self, name, a)
            return a

        if self.task == "cvrp":
            if self.demands is None or self.capacity is None:
                raise ValueError("cvrp needs demands and capacity")
            d = arr("demands", self.demands)
            if d[0] != 0.0:
                raise ValueError("depot demand must be 0")
            if d.max() > 1.0 + EPS:
                raise ValueError("a single demand exceeds capacity")
            if not self.capacity > 0:
                raise ValueError("capacity must be positive")
        elif self.task == "pctsp":
            if self.prizes is None or self.penalties is None or self.min_prize is None:
                raise ValueError("pctsp needs prizes, penalties and min_prize")
            p = arr("prizes", self.prizes)
            arr("penalties", self.penalties)
            if p[0] != 0.0 or self.penalties[0] != 0.0:
                raise ValueError("depot prize and penalty must be 0")
            if self.min_prize < 0 or self.min_prize > p.sum() + EPS:
                raise ValueError("min_prize must be attainable")
        elif self.task == "op":
            if self.prizes is None or self.max_length is None:
                raise ValueError("op needs prizes and max_length")
            p = arr("prizes", self.prizes)
            if p[0] != 0.0:
                raise ValueError("depot prize must be 0")
            if not self.max_length > 0:
                raise ValueError("max_length must be positive")
        for a in (self.coords, self.demands, self.prizes, self.penalties):
            if a is not None:
                a.flags.writeable = False

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def dist(self, i: int, j: int) -> float:
        dx = self.coords[i, 0] - self.coords[j, 0]
        dy = self.coords[i, 1] - self.coords[j, 1]
        return math.hypot(dx, dy)


def dist_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def generate(task: str, n: int, seed: int) -> Instance:
    """Sample a random instance; deterministic in (task, n, seed)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if n < 2:
        raise ValueError(f"degenerate instance: n must be >= 2, got {n}")
    rng = np.random.default_rng(seed)
    coords = rng.random((n, 2))
    if task == "tsp":
        return Instance("tsp", coords, seed=seed)
    if task == "cvrp":
        cap = default_capacity(n)
        raw = rng.integers(1, 10, size=n).astype(np.float64)
        raw[0] = 0.0
        return Instance("cvrp", coords, demands=raw / cap, capacity=cap, seed=seed)
    if task == "pctsp":
        prizes = rng.uniform(0.0, 0.5, size=n)
        prizes[0] = 0.0
        pens = rng.uniform(0.0, 1.0, size=n)
        pens[0] = 0.0
        min_prize = min(1.0, float(prizes.sum()))
        return Instance(
            "pctsp", coords, prizes=prizes, penalties=pens, min_prize=min_prize, seed=seed
        )
    # op: prize grows with distance from the depot, quantised to cents
    d0 = np.sqrt(((coords - coords[0]) ** 2).sum(-1))
    prizes = (1.0 + np.floor(99.0 * d0 / d0[1:].max())) / 100.0
    prizes[0] = 0.0
    return Instance(
        "op", coords, prizes=prizes, max_length=default_max_length(n), seed=seed
    )


# ---------------------------------------------------------------------------
# single-rollout state (reference semantics; the batch env mirrors these)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RolloutState:
    instance: Instance
    visited: np.ndarray  # (n,) bool
    current: int | None
    partial: tuple[int, ...]
    route_used: float = 0.0  # demand since the last depot visit
    collected: float = 0.0  # prize so far
    traveled: float = 0.0  # path length so far


def initial_state(instance: Instance) -> RolloutState:
    visited = np.zeros(instance.n, dtype=bool)
    if instance.task in DEPOT_TASKS:
        visited[0] = True
        return RolloutState(instance, visited, 0, ())
    return RolloutState(instance, visited, None, ())


def is_terminal(state: RolloutState) -> bool:
    inst = state.instance
    if inst.task == "tsp":
        return bool(state.visited.all())
    if inst.task == "cvrp":
        return bool(state.visited[1:].all())
    # pctsp / op end once the route has returned to the depot
    return len(state.partial) > 0 and state.current == 0


def feasible_mask(state: RolloutState) -> np.ndarray:
    """Boolean mask of allowed next nodes (True = allowed)."""
    if is_terminal(state):
        raise ValueError("state is terminal; no further actions")
    inst = state.instance
    n = inst.n
    mask = np.zeros(n, dtype=bool)
    if inst.task == "tsp":
        mask = ~state.visited
        return mask
    if inst.task == "cvrp":
        fits = inst.demands <= 1.0 - state.route_used + EPS
        mask[1:] = ~state.visited[1:] & fits[1:]
        mask[0] = state.current != 0
        return mask
    if inst.task == "pctsp":
        mask[1:] = ~state.visited[1:]
        mask[0] = state.collected >= inst.min_prize - EPS or bool(state.visited[1:].all())
        return mask
    # op: a customer is allowed only if the detour still gets home in budget
    cur = state.current
    d_cur = np.array([inst.dist(cur, j) for j in range(n)])
    d_home = np.array([inst.dist(j, 0) for j in range(n)])
    within = state.traveled + d_cur + d_home <= inst.max_length + EPS
    mask[1:] = ~state.visited[1:] & within[1:]
    mask[0] = (state.current != 0) or not mask[1:].any()
    return mask


def step(state: RolloutState, action: int) -> RolloutState:
    """Apply one action, returning the successor state."""
    inst = state.instance
    action = int(action)
    if not 0 <= action < inst.n:
        raise FeasibilityError(f"action {action} out of range")
    if not feasible_mask(state)[action]:
        raise FeasibilityError(f"action {action} is not feasible here")
    visited = state.visited.copy()
    visited[action] = True
    hop = 0.0 if state.current is None else inst.dist(state.current, action)
    route_used = state.route_used
    collected = state.collected
    if inst.task == "cvrp":
        route_used = 0.0 if action == 0 else route_used + float(inst.demands[action])
    if inst.task in ("pctsp", "op") and not state.visited[action]:
        collected += float(inst.prizes[action])
    return RolloutState(
        instance=inst,
        visited=visited,
        current=action,
        partial=state.partial + (action,),
        route_used=route_used,
        collected=collected,
        traveled=state.traveled + hop,
    )


def locality_distances(state: RolloutState) -> np.ndarray:
    """Distance from the current node to each candidate; zeros where moot.

    Before any move (no current node) the bias has no anchor, so the vector
    is all zeros.  Visited customers get zeros too; they are masked anyway.
    """
    inst = state.instance
    n = inst.n
    if state.current is None:
        return np.zeros(n)
    diff = inst.coords - inst.coords[state.current]
    d = np.sqrt((diff * diff).sum(-1))
    out = np.where(state.visited, 0.0, d)
    if inst.task in DEPOT_TASKS:
        out[0] = d[0]  # the depot stays a live candidate
    return out


# ---------------------------------------------------------------------------
# solutions and objectives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Solution:
    actions: tuple[int, ...]
    objective: float  # tour cost for tsp/cvrp/pctsp; total prize for op


def _path_len(coords: np.ndarray, seq: Sequence[int]) -> float:
    if len(seq) < 2:
        return 0.0
    pts = coords[np.asarray(seq, dtype=np.int64)]
    return float(np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(-1)).sum())


def objective(instance: Instance, actions: Sequence[int]) -> float:
    """Validate a completed action sequence and compute its objective.

    Raises FeasibilityError naming the violated constraint.
    """
    inst = instance
    acts = [int(a) for a in actions]
    if any(a < 0 or a >= inst.n for a in acts):
        raise FeasibilityError("action index out of range")
    if inst.task == "tsp":
        if sorted(acts) != list(range(inst.n)):
            raise FeasibilityError("tour is not a permutation of all nodes")
        return _path_len(inst.coords, acts + acts[:1])
    customers = [a for a in acts if a != 0]
    if len(set(customers)) != len(customers):
        raise FeasibilityError("a customer is visited twice")
    if inst.task == "cvrp":
        if set(customers) != set(range(1, inst.n)):
            raise FeasibilityError("every customer must be served exactly once")
        used = 0.0
        for a in acts:
            used = 0.0 if a == 0 else used + float(inst.demands[a])
            if used > 1.0 + EPS:
                raise FeasibilityError("sub-route demand exceeds capacity")
        return _path_len(inst.coords, [0] + acts + [0])
    # pctsp / op routes must close at the depot; trailing depot repeats are
    # harmless padding
    while len(acts) > 1 and acts[-1] == 0 and acts[-2] == 0:
        acts.pop()
    if not acts or acts[-1] != 0:
        raise FeasibilityError("route must end at the depot")
    if 0 in acts[:-1]:
        raise FeasibilityError("depot may appear only at the end")
    length = _path_len(inst.coords, [0] + acts)
    if inst.task == "pctsp":
        prize = float(inst.prizes[customers].sum()) if customers else 0.0
        all_visited = set(customers) == set(range(1, inst.n))
        if prize < inst.min_prize - EPS and not all_visited:
            raise FeasibilityError("collected prize is below min_prize")
        unvisited = [j for j in range(1, inst.n) if j not in set(customers)]
        return length + float(inst.penalties[unvisited].sum()) if unvisited else length
    # op
    if length > inst.max_length + EPS:
        raise FeasibilityError("route length exceeds max_length")
    return float(inst.prizes[customers].sum()) if customers else 0.0


def evaluate(instance: Instance, actions: Sequence[int]) -> Solution:
    return Solution(tuple(int(a) for a in actions), objective(instance, actions))


def random_rollout(instance: Instance, rng: np.random.Generator) -> list[int]:
    """Roll the uniform random policy to termination via the scalar state API."""
    state = initial_state(instance)
    while not is_terminal(state):
        mask = feasible_mask(state)
        choices = np.flatnonzero(mask)
        state = step(state, int(rng.choice(choices)))
    return list(state.partial)


# ---------------------------------------------------------------------------
# vectorized environment: B instances x M rollouts, all same task and size
# ---------------------------------------------------------------------------


class BatchEnv:
    """Array-of-rollouts mirror of the scalar state API.

    Terminated rollouts are padded: their mask allows only the depot (or the
    current node for tsp), so padding steps add no length and no log-prob.
    """

    def __init__(self, instances: Sequence[Instance], m: int):
        tasks = {i.task for i in instances}
        sizes = {i.n for i in instances}
        if len(tasks) != 1 or len(sizes) != 1:
            raise ValueError("batch needs one task and one size")
        self.task = instances[0].task
        self.n = instances[0].n
        self.b = len(instances)
        self.m = m
        self.instances = list(instances)
        self.coords = np.stack([i.coords for i in instances])  # (B,N,2)
        self.dmat = np.stack([dist_matrix(i.coords) for i in instances])  # (B,N,N)
        if self.task == "cvrp":
            self.demands = np.stack([i.demands for i in instances])
        if self.task in ("pctsp", "op"):
            self.prizes = np.stack([i.prizes for i in instances])
        if self.task == "pctsp":
            self.penalties = np.stack([i.penalties for i in instances])
            self.min_prize = np.array([i.min_prize for i in instances])
        if self.task == "op":
            self.max_length = np.array([i.max_length for i in instances])
            self.d_home = self.dmat[:, :, 0]  # (B,N)
        b, n = self.b, self.n
        self.visited = np.zeros((b, m, n), dtype=bool)
        self.current = np.full((b, m), -1, dtype=np.int64)
        self.first = np.full((b, m), -1, dtype=np.int64)
        self.route_used = np.zeros((b, m))
        self.collected = np.zeros((b, m))
        self.traveled = np.zeros((b, m))
        self.done = np.zeros((b, m), dtype=bool)
        self.steps = 0
        if self.task in DEPOT_TASKS:
            self.visited[:, :, 0] = True
            self.current[:] = 0
        self._brow = np.arange(b)[:, None]
        self._mcol = np.arange(m)[None, :]

    def mask(self) -> np.ndarray:
        b, m, n = self.b, self.m, self.n
        mask = np.zeros((b, m, n), dtype=bool)
        if self.task == "tsp":
            mask = ~self.visited
            if self.done.any():
                mask[self.done] = False
                mask[self._brow, self._mcol, self.current] |= self.done
            return mask
        if self.task == "cvrp":
            fits = self.demands[:, None, :] <= 1.0 - self.route_used[:, :, None] + EPS
            mask[:, :, 1:] = ~self.visited[:, :, 1:] & fits[:, :, 1:]
            mask[:, :, 0] = self.current != 0
        elif self.task == "pctsp":
            mask[:, :, 1:] = ~self.visited[:, :, 1:]
            unlocked = self.collected >= self.min_prize[:, None] - EPS
            mask[:, :, 0] = unlocked | self.visited[:, :, 1:].all(-1)
        else:  # op
            d_cur = self.dmat[self._brow, self.current]  # (B,M,N)
            within = (
                self.traveled[:, :, None] + d_cur + self.d_home[:, None, :]
                <= self.max_length[:, None, None] + EPS
            )
            mask[:, :, 1:] = ~self.visited[:, :, 1:] & within[:, :, 1:]
            mask[:, :, 0] = (self.current != 0) | ~mask[:, :, 1:].any(-1)
        if self.done.any():
            mask[self.done] = False
            mask[:, :, 0] |= self.done
        return mask

    def force_start(self, starts: np.ndarray) -> None:
        """Apply the forced first move of a multistart rollout (no log-prob)."""
        if self.steps != 0:
            raise ValueError("force_start only applies before any step")
        self.step(starts, forced=True)
        self.first[:] = starts

    def step(self, actions: np.ndarray, forced: bool = False) -> None:
        acts = np.asarray(actions, dtype=np.int64)
        br, mc = self._brow, self._mcol
        newly = ~self.visited[br, mc, acts]
        hop = np.where(
            self.current >= 0, self.dmat[br, np.maximum(self.current, 0), acts], 0.0
        )
        self.traveled += hop
        if self.task == "cvrp":
            dem = self.demands[br, acts]
            self.route_used = np.where(acts == 0, 0.0, self.route_used + dem)
        if self.task in ("pctsp", "op"):
            self.collected += np.where(newly, self.prizes[br, acts], 0.0)
        self.visited[br, mc, acts] = True
        if self.first[0, 0] < 0 and self.task == "tsp":
            self.first[:] = acts
        self.current = acts
        self.steps += 1
        if self.task == "tsp":
            self.done = self.visited.all(-1)
        elif self.task == "cvrp":
            self.done = self.visited[:, :, 1:].all(-1)
        else:
            self.done = self.done | (acts == 0)

    def locality(self) -> np.ndarray:
        """(B,M,N) distances from the current node; zeros before the first move."""
        d = self.dmat[self._brow, np.maximum(self.current, 0)]
        d = np.where((self.current >= 0)[:, :, None], d, 0.0)
        keep = ~self.visited
        if self.task in DEPOT_TASKS:
            keep = keep.copy()
            keep[:, :, 0] = True
        return np.where(keep, d, 0.0)

    def objectives(self) -> np.ndarray:
        """(B,M) final objective per rollout; rollouts must all be done."""
        if not self.done.all():
            raise ValueError("objectives requested before all rollouts finished")
        if self.task == "tsp":
            closing = self.dmat[self._brow, self.current, self.first]
            return self.traveled + closing
        if self.task == "cvrp":
            back = self.dmat[self._brow, self.current, 0]
            return self.traveled + back
        if self.task == "pctsp":
            pen = (self.penalties[:, None, :] * ~self.visited).sum(-1)
            return self.traveled + pen
        return self.collected.copy()


def random_rollouts_batch(
    instances: Sequence[Instance], m: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-random batched rollouts; returns (actions (B,M,T), objectives)."""
    env = BatchEnv(instances, m)
    trace = []
    limit = 3 * env.n + 10
    while not env.done.all():
        if len(trace) > limit:
            raise RuntimeError("rollout failed to terminate")
        mask = env.mask()
        u = rng.random((env.b, env.m, 1))
        cdf = np.cumsum(mask, axis=-1)
        pick = (u * cdf[:, :, -1:] < cdf).argmax(-1)
        env.step(pick)
        trace.append(pick)
    actions = np.stack(trace, axis=-1) if trace else np.zeros((env.b, env.m, 0), np.int64)
    return actions, env.objectives()
