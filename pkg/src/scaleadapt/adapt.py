"""Test-time adaptation of a frozen policy.

Three modes share one engine:

- "sage": per-instance residual query adapters are trained by policy
  gradient plus a small imitation term on each iteration's best sample,
  while the locality bias and sampling temperature decay geometrically.
- "eas": the same adapter updates with the bias pinned to 0 and the
  temperature pinned to 1 (the schedule-free ablation).
- "as": no adapter; a per-instance copy of every policy weight is updated
  instead, one instance at a time.

The base parameters are never mutated; iteration k=0 of the history is
always the un-adapted (zero-shot) evaluation.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import policy as po
from . import problems as pr
from .autodiff import Tensor

MODES = ("sage", "eas", "as")

# adaptation learning rates that behaved at desk scale, per task
SAGE_DELTA = {"tsp": 3.2e-3, "cvrp": 4.1e-3, "pctsp": 1e-3, "op": 1e-3}
AS_DELTA = {"tsp": 2.6e-4, "cvrp": 2.6e-5, "pctsp": 2.6e-4, "op": 2.6e-4}
DEFAULT_ITERATIONS = {"tsp": 200, "cvrp": 200, "pctsp": 100, "op": 100}

_ETA_ORDER = ("w1", "b1", "w2", "b2")


class AdaptationDivergedError(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite adaptation loss {value!r} at iteration {iteration}")
        self.iteration = iteration


@dataclasses.dataclass(frozen=True)
class SageConfig:
    iterations: int = 200
    samples: int = 50  # rollouts per iteration = multistart * augmentations
    lam: float = 0.005
    delta: float | None = None  # None: per-task default for the mode
    alpha0: float = 1.0
    alphaK: float = 0.3
    temp0: float = 1.0
    tempK: float = 0.3
    mode: str = "sage"
    augmentations: int = 1

    def __post_init__(self):
        if self.iterations < 0 or self.samples < 0:
            raise po.ConfigError("iterations and samples must be non-negative")
        if self.lam < 0:
            raise po.ConfigError("lam must be non-negative")
        if self.delta is not None and self.delta < 0:
            raise po.ConfigError("delta must be non-negative")
        if not (self.alpha0 >= 0 and self.alphaK >= 0):
            raise po.ConfigError("alpha endpoints must be non-negative")
        if not (self.temp0 > 0 and self.tempK > 0):
            raise po.ConfigError("temperature endpoints must be positive")
        if self.alphaK > self.alpha0 or self.tempK > self.temp0:
            raise po.ConfigError("schedules must not increase")
        if self.mode not in MODES:
            raise po.ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.augmentations < 1 or self.samples % self.augmentations:
            raise po.ConfigError("samples must be a positive multiple of augmentations")


def default_config(task: str, mode: str = "sage", **overrides) -> SageConfig:
    base = dict(
        iterations=DEFAULT_ITERATIONS[task],
        delta=(AS_DELTA if mode == "as" else SAGE_DELTA)[task],
        mode=mode,
    )
    if mode in ("eas", "as"):
        base.update(alpha0=0.0, alphaK=0.0, temp0=1.0, tempK=1.0)
    base.update(overrides)
    return SageConfig(**base)


@dataclasses.dataclass(frozen=True)
class AdaptState:
    k: int
    alpha: float
    temperature: float
    gamma1: float
    gamma2: float
    best: pr.Solution | None = None
    history: tuple = ()  # rows (k, best, mean, alpha, temperature)


def gammas(cfg: SageConfig) -> tuple[float, float]:
    """Per-iteration decay factors solving start * gamma^K = end."""
    if cfg.iterations == 0 or cfg.mode != "sage":
        return 1.0, 1.0
    g1 = (cfg.alphaK / cfg.alpha0) ** (1.0 / cfg.iterations) if cfg.alpha0 > 0 else 1.0
    g2 = (cfg.tempK / cfg.temp0) ** (1.0 / cfg.iterations)
    return g1, g2


def schedule_step(state: AdaptState, cfg: SageConfig) -> AdaptState:
    if state.k >= cfg.iterations:
        raise ValueError(f"schedule exhausted at k={state.k}")
    return dataclasses.replace(
        state,
        k=state.k + 1,
        alpha=state.alpha * state.gamma1,
        temperature=state.temperature * state.gamma2,
    )


def init_eta(embed_dim: int, batch: int | None = None, seed: int = 0) -> dict[str, Tensor]:
    """Residual adapter weights; the second layer starts at zero, so the
    adapter is the identity until the first update."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(embed_dim)
    if batch is None:
        w1 = rng.uniform(-bound, bound, (embed_dim, embed_dim))
        return {
            "w1": Tensor(w1),
            "b1": Tensor(np.zeros(embed_dim)),
            "w2": Tensor(np.zeros((embed_dim, embed_dim))),
            "b2": Tensor(np.zeros(embed_dim)),
        }
    w1 = rng.uniform(-bound, bound, (batch, embed_dim, embed_dim))
    return {
        "w1": Tensor(w1),
        "b1": Tensor(np.zeros((batch, 1, embed_dim))),
        "w2": Tensor(np.zeros((batch, embed_dim, embed_dim))),
        "b2": Tensor(np.zeros((batch, 1, embed_dim))),
    }


def eta_row(eta: dict[str, Tensor], i: int) -> dict[str, np.ndarray]:
    """Detached single-instance slice of a batched adapter."""
    return {
        "w1": eta["w1"].data[i].copy(),
        "b1": eta["b1"].data[i, 0].copy(),
        "w2": eta["w2"].data[i].copy(),
        "b2": eta["b2"].data[i, 0].copy(),
    }


@dataclasses.dataclass
class AdaptResult:
    state: AdaptState  # final schedule state with best and history attached
    eta: dict[str, np.ndarray] | None  # None in "as" mode
    theta: po.PolicyParams | None  # per-instance weights, "as" mode only


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("k,best_cost,mean_cost,alpha,temperature\n")
        for k, best, mean, alpha, temp in history:
            fh.write(
                f"{k},{format(best, '.17g')},{format(mean, '.17g')},"
                f"{format(alpha, '.17g')},{format(temp, '.17g')}\n"
            )


def _iteration_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed), counter=k))


def _better(maximize: bool, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a > b if maximize else a < b


def adapt_batch(
    instances,
    cfg: SageConfig,
    params: po.PolicyParams,
    sml=None,
    seed: int = 0,
) -> list[AdaptResult]:
    """Adapt every instance of a same-size batch jointly; base weights frozen.

    "as" mode cannot share decode work across instances (each carries its
    own full weight copy), so it delegates to one-instance runs.
    """
    instances = list(instances)
    if cfg.mode == "as":
        return [_active_search_one(inst, cfg, params, seed + i) for i, inst in enumerate(instances)]
    frozen = params.detached()
    b = len(instances)
    d = params.embed_dim
    maximize = pr.is_maximization(instances[0].task)
    delta = cfg.delta if cfg.delta is not None else SAGE_DELTA[instances[0].task]
    multi = max(cfg.samples // cfg.augmentations, 1)
    alpha0, temp0 = (cfg.alpha0, cfg.temp0) if cfg.mode == "sage" else (0.0, 1.0)
    g1, g2 = gammas(cfg)
    if cfg.augmentations > 1:
        enc_insts = [
            po.augment(inst, t) for inst in instances for t in range(cfg.augmentations)
        ]
    else:
        enc_insts = instances
    h = po.encode_batch(frozen, enc_insts)
    if sml is not None and cfg.mode == "sage":
        from . import sml as sml_mod

        h = sml_mod.apply_sml_batch(sml, h, instances[0].n)
    h = Tensor(h.data)  # constant from here on
    eta = init_eta(d, batch=b, seed=seed)
    adam = ad.Adam([eta[n] for n in _ETA_ORDER], lr=delta)
    state = AdaptState(0, alpha0, temp0, g1, g2)
    best_obj = np.full(b, -np.inf if maximize else np.inf)
    best_act: list[tuple[int, ...] | None] = [None] * b
    history: list[list[tuple]] = [[] for _ in range(b)]

    def record(objs: np.ndarray, acts: np.ndarray, k: int, alpha: float, temp: float):
        flat_obj = objs.reshape(b, -1)
        flat_act = acts.reshape(b, flat_obj.shape[1], -1)
        for i in range(b):
            j = int(flat_obj[i].argmax() if maximize else flat_obj[i].argmin())
            if _better(maximize, flat_obj[i, j], best_obj[i]):
                best_obj[i] = flat_obj[i, j]
                best_act[i] = tuple(int(x) for x in flat_act[i, j])
            history[i].append(
                (k, float(best_obj[i]), float(flat_obj[i].mean()), alpha, temp)
            )

    def run(k: int, record_grads: bool):
        dcfg = po.DecodeConfig(
            mode="sample" if cfg.samples else "greedy",
            multistart=multi if cfg.samples else instances[0].n,
            augmentations=cfg.augmentations,
            alpha=state.alpha,
            temperature=state.temperature,
        )
        rng = _iteration_rng(seed, k)
        adapter = eta if record_grads else {n: Tensor(eta[n].data) for n in _ETA_ORDER}
        return po.rollout_batch(frozen, instances, dcfg, adapter=adapter, rng=rng, h=h)

    res0 = run(0, record_grads=False)
    record(res0.per_instance_objectives(), res0.actions, 0, state.alpha, state.temperature)
    for k in range(1, cfg.iterations + 1):
        if cfg.samples == 0:
            # nothing to learn from; keep emitting zero-shot greedy rows
            res = run(k, record_grads=False)
            record(res.per_instance_objectives(), res.actions, k, state.alpha, state.temperature)
            state = schedule_step(state, cfg)
            continue
        tape = ad.Tape()
        watched = [tape.watch(eta[n]) for n in _ETA_ORDER]
        res = run(k, record_grads=True)
        objs = res.per_instance_objectives()
        lp = ad.reshape(res.logp, objs.shape)
        r = objs if maximize else -objs
        adv = r - r.mean(axis=1, keepdims=True)
        j_rl = ad.tsum(ad.mul(lp, Tensor(adv / objs.shape[1])))
        best_idx = r.argmax(axis=1).reshape(b, 1)
        j_il = ad.tsum(ad.take_along(lp, best_idx, axis=1))
        loss = ad.neg(ad.add(j_rl, ad.scale(j_il, cfg.lam)))
        if not np.isfinite(loss.data):
            raise AdaptationDivergedError(k, float(loss.data))
        adam.step(tape.gradients(loss, watched))
        record(objs, res.actions, k, state.alpha, state.temperature)
        state = schedule_step(state, cfg)
    for n in _ETA_ORDER:
        eta[n].tape = None
        eta[n].node = None
    out = []
    for i in range(b):
        final = dataclasses.replace(
            state,
            best=pr.Solution(best_act[i], float(best_obj[i])),
            history=tuple(history[i]),
        )
        out.append(AdaptResult(final, eta_row(eta, i), None))
    return out


def _active_search_one(
    instance: pr.Instance, cfg: SageConfig, params: po.PolicyParams, seed: int
) -> AdaptResult:
    theta = params.copy()
    maximize = pr.is_maximization(instance.task)
    delta = cfg.delta if cfg.delta is not None else AS_DELTA[instance.task]
    multi = max(cfg.samples // cfg.augmentations, 1)
    names = theta.names()
    adam = ad.Adam([theta.tensors[n] for n in names], lr=delta)
    state = AdaptState(0, 0.0, 1.0, 1.0, 1.0)
    best_obj = -np.inf if maximize else np.inf
    best_act: tuple[int, ...] | None = None
    history: list[tuple] = []

    def dcfg():
        if cfg.samples == 0:
            return po.DecodeConfig(mode="greedy", multistart=instance.n)
        return po.DecodeConfig(
            mode="sample", multistart=multi, augmentations=cfg.augmentations
        )

    def record(objs: np.ndarray, acts: np.ndarray, k: int):
        nonlocal best_obj, best_act
        flat_obj = objs.reshape(-1)
        flat_act = acts.reshape(flat_obj.size, -1)
        j = int(flat_obj.argmax() if maximize else flat_obj.argmin())
        if _better(maximize, flat_obj[j], best_obj):
            best_obj = flat_obj[j]
            best_act = tuple(int(x) for x in flat_act[j])
        history.append((k, float(best_obj), float(flat_obj.mean()), 0.0, 1.0))

    res0 = po.rollout_batch(
        theta.detached(), [instance], dcfg(), rng=_iteration_rng(seed, 0)
    )
    record(res0.objectives, res0.actions, 0)
    for k in range(1, cfg.iterations + 1):
        if cfg.samples == 0:
            res = po.rollout_batch(
                theta.detached(), [instance], dcfg(), rng=_iteration_rng(seed, k)
            )
            record(res.objectives, res.actions, k)
            continue
        tape = ad.Tape()
        watched = theta.watch_all(tape)
        res = po.rollout_batch(theta, [instance], dcfg(), rng=_iteration_rng(seed, k))
        objs = res.objectives.reshape(1, -1)
        lp = ad.reshape(res.logp, objs.shape)
        r = objs if maximize else -objs
        adv = r - r.mean(axis=1, keepdims=True)
        j_rl = ad.tsum(ad.mul(lp, Tensor(adv / objs.shape[1])))
        best_idx = r.argmax(axis=1).reshape(1, 1)
        j_il = ad.tsum(ad.take_along(lp, best_idx, axis=1))
        loss = ad.neg(ad.add(j_rl, ad.scale(j_il, cfg.lam)))
        if not np.isfinite(loss.data):
            raise AdaptationDivergedError(k, float(loss.data))
        adam.step(tape.gradients(loss, watched))
        record(res.objectives, res.actions, k)
    theta.unbind()
    final = dataclasses.replace(
        state,
        k=cfg.iterations,
        best=pr.Solution(best_act, float(best_obj)),
        history=tuple(history),
    )
    return AdaptResult(final, None, theta)


def sage(
    instance: pr.Instance,
    cfg: SageConfig,
    params: po.PolicyParams,
    sml=None,
    seed: int = 0,
) -> AdaptResult:
    if cfg.mode != "sage":
        raise po.ConfigError(f"sage() called with mode {cfg.mode!r}")
    return adapt_batch([instance], cfg, params, sml=sml, seed=seed)[0]


def eas(
    instance: pr.Instance, cfg: SageConfig, params: po.PolicyParams, seed: int = 0
) -> AdaptResult:
    cfg = dataclasses.replace(
        cfg, mode="eas", alpha0=0.0, alphaK=0.0, temp0=1.0, tempK=1.0
    )
    return adapt_batch([instance], cfg, params, seed=seed)[0]


def active_search(
    instance: pr.Instance, cfg: SageConfig, params: po.PolicyParams, seed: int = 0
) -> AdaptResult:
    cfg = dataclasses.replace(
        cfg, mode="as", alpha0=0.0, alphaK=0.0, temp0=1.0, tempK=1.0
    )
    return _active_search_one(instance, cfg, params, seed)
