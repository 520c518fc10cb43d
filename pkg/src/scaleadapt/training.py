"""Policy pretraining: REINFORCE over multistart rollouts.

Every start of an instance shares one baseline, the mean reward over that
instance's starts, so an instance where all starts tie contributes nothing.
Fresh instances are sampled each step.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import baselines as bl
from . import policy as po
from . import problems as pr
from .autodiff import Tensor


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    task: str
    n_train: int = 20
    batch_instances: int = 64
    multistart: int = 20
    epochs: int = 40
    steps_per_epoch: int = 100
    learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.task not in pr.TASKS:
            raise po.ConfigError(f"unknown task {self.task!r}")
        for field in ("n_train", "batch_instances", "multistart", "epochs", "steps_per_epoch"):
            if getattr(self, field) < 1:
                raise po.ConfigError(f"{field} must be positive")
        # zero is allowed as a dry-run: the update is then exactly a no-op
        if self.learning_rate < 0:
            raise po.ConfigError("learning_rate must be non-negative")


def reinforce_loss(
    logp: Tensor, objectives: np.ndarray, maximize: bool
) -> tuple[Tensor, float]:
    """Negated REINFORCE objective: -mean((R - b) log p), b per-instance."""
    r = objectives if maximize else -objectives
    adv = r - r.mean(axis=1, keepdims=True)
    j = ad.tmean(ad.mul(logp, Tensor(adv)))
    return ad.neg(j), float(objectives.mean())


def _write_curve(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("step,mean_cost,loss\n")
        for step, cost, loss in rows:
            fh.write(f"{step},{format(cost, '.17g')},{format(loss, '.17g')}\n")


def pretrain(
    cfg: TrainConfig,
    params: po.PolicyParams | None = None,
    log_path=None,
) -> po.PolicyParams:
    """Train a policy from scratch (or continue `params`); returns it."""
    if params is None:
        params = po.init_policy(cfg.task, seed=cfg.seed)
    elif params.task != cfg.task:
        raise po.ConfigError(f"params are for {params.task}, config for {cfg.task}")
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    inst_rng = np.random.default_rng(seeds[0])
    sample_rng = np.random.default_rng(seeds[1])
    names = params.names()
    adam = ad.Adam([params.tensors[n] for n in names], cfg.learning_rate)
    dcfg = po.DecodeConfig(mode="sample", multistart=cfg.multistart)
    maximize = pr.is_maximization(cfg.task)
    rows = []
    step = 0
    for _ in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            batch_seeds = inst_rng.integers(0, 2**62, size=cfg.batch_instances)
            insts = [pr.generate(cfg.task, cfg.n_train, int(s)) for s in batch_seeds]
            tape = ad.Tape()
            watched = params.watch_all(tape)
            res = po.rollout_batch(params, insts, dcfg, rng=sample_rng)
            loss, mean_cost = reinforce_loss(res.logp, res.objectives, maximize)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(step, float(loss.data))
            adam.step(tape.gradients(loss, watched))
            rows.append((step, mean_cost, float(loss.data)))
            step += 1
    params.unbind()
    if log_path is not None:
        _write_curve(log_path, rows)
    return params


@dataclasses.dataclass
class ValidationReport:
    mean_objective: float
    mean_gap_pct: float
    rows: list


def validate(
    params: po.PolicyParams,
    instances,
    baseline_objs,
    multistart: int | None = None,
    augmentations: int = 1,
    chunk: int = 64,
) -> ValidationReport:
    """Greedy multistart evaluation against a baseline objective column."""
    instances = list(instances)
    if not instances:
        raise po.ConfigError("validation needs at least one instance")
    if baseline_objs is None:
        raise po.ConfigError("baseline objectives are required")
    baseline_objs = [float(x) for x in baseline_objs]
    if len(baseline_objs) != len(instances):
        raise po.ConfigError(
            f"{len(baseline_objs)} baseline values for {len(instances)} instances"
        )
    frozen = params.detached()
    task = instances[0].task
    objs: list[float | None] = [None] * len(instances)
    by_size: dict[int, list[int]] = {}
    for i, inst in enumerate(instances):
        by_size.setdefault(inst.n, []).append(i)
    for n, idxs in by_size.items():
        cfg = po.DecodeConfig(
            mode="greedy",
            multistart=multistart if multistart is not None else n,
            augmentations=augmentations,
        )
        for lo in range(0, len(idxs), chunk):
            part = idxs[lo : lo + chunk]
            res = po.rollout_batch(frozen, [instances[i] for i in part], cfg)
            for i, sol in zip(part, res.best_solutions()):
                objs[i] = sol.objective
    rows = []
    for i, inst in enumerate(instances):
        name = inst.name if inst.name else f"{i:04d}"
        rows.append(
            bl.GapRow(
                instance=name,
                method="greedy",
                obj=float(objs[i]),
                obj_b=baseline_objs[i],
                gap_pct=bl.gap_pct(float(objs[i]), baseline_objs[i], task),
                seconds=0.0,
            )
        )
    mean_obj = float(np.mean([r.obj for r in rows]))
    mean_gap = float(np.mean([r.gap_pct for r in rows]))
    return ValidationReport(mean_obj, mean_gap, rows)
