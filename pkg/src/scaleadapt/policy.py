"""Attention encoder-decoder policy over routing states.

The encoder turns raw node features into d-dimensional context embeddings;
the decoder emits one node per step from a masked, clipped compatibility
distribution.  Both run on the tape from `autodiff`, so the same code path
serves sampling (constants, nothing recorded) and training (parameters
watched on a tape).  Decoding hooks: an optional residual query adapter and
a distance penalty on the logits, both used by the adaptation loop.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from . import problems as pr
from .autodiff import Tensor

FEATURE_WIDTHS = {"tsp": 2, "cvrp": 3, "pctsp": 4, "op": 3}
NORM_EPS = 1e-5


class ConfigError(ValueError):
    """Shapes, widths, or options that do not line up."""


def instance_features(instance: pr.Instance) -> np.ndarray:
    """(N, F) raw feature matrix; columns beyond coords are task payloads."""
    cols = [instance.coords]
    if instance.task == "cvrp":
        cols.append(instance.demands[:, None])
    elif instance.task == "pctsp":
        cols.append(instance.prizes[:, None])
        cols.append(instance.penalties[:, None])
    elif instance.task == "op":
        cols.append(instance.prizes[:, None])
    return np.concatenate(cols, axis=1)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class PolicyParams:
    """Flat named-tensor parameter set plus the dimensions that shape it."""

    task: str
    embed_dim: int
    heads: int
    layers: int
    ff_dim: int
    clip_c: float
    tensors: dict[str, Tensor]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def watch_all(self, tape: ad.Tape) -> list[Tensor]:
        """Bind every parameter to the tape; returns them in name order."""
        return [tape.watch(self.tensors[n]) for n in self.names()]

    def detached(self) -> "PolicyParams":
        """Constant view sharing the same arrays (for no-grad evaluation)."""
        t = {k: Tensor(v.data) for k, v in self.tensors.items()}
        return dataclasses.replace(self, tensors=t)

    def unbind(self) -> None:
        """Drop tape bindings in place so later calls record nothing."""
        for t in self.tensors.values():
            t.tape = None
            t.node = None

    def copy(self) -> "PolicyParams":
        t = {k: Tensor(v.data.copy()) for k, v in self.tensors.items()}
        return dataclasses.replace(self, tensors=t)

    def checksum(self) -> str:
        return ad.checksum({k: v.data for k, v in self.tensors.items()})


def _layout(task: str, d: int, heads: int, layers: int, ff: int) -> dict[str, tuple]:
    if d % heads != 0:
        raise ConfigError(f"embed_dim {d} not divisible by heads {heads}")
    if task not in FEATURE_WIDTHS:
        raise ConfigError(f"unknown task {task!r}")
    f = FEATURE_WIDTHS[task]
    shapes: dict[str, tuple] = {"embed.w": (f, d), "embed.b": (d,)}
    for i in range(layers):
        p = f"enc{i}."
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
        shapes[p + "norm1.g"] = (d,)
        shapes[p + "norm1.b"] = (d,)
        shapes[p + "ff.w1"] = (d, ff)
        shapes[p + "ff.b1"] = (ff,)
        shapes[p + "ff.w2"] = (ff, d)
        shapes[p + "ff.b2"] = (d,)
        shapes[p + "norm2.g"] = (d,)
        shapes[p + "norm2.b"] = (d,)
    for w in ("wk", "wv", "wo"):
        shapes["dec." + w] = (d, d)
    shapes["dec.bo"] = (d,)
    return shapes


def init_policy(
    task: str,
    embed_dim: int = 128,
    heads: int = 8,
    layers: int = 3,
    ff_dim: int = 512,
    clip_c: float = 10.0,
    seed: int = 0,
) -> PolicyParams:
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    if not clip_c > 0:
        raise ConfigError(f"clip_c must be positive, got {clip_c}")
    shapes = _layout(task, embed_dim, heads, layers, ff_dim)
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith((".b", ".b1", ".b2", ".bo", "norm1.b", "norm2.b")):
            data = np.zeros(shape)
        elif name.endswith(".g"):
            data = np.ones(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, shape)
        tensors[name] = Tensor(data)
    return PolicyParams(task, embed_dim, heads, layers, ff_dim, clip_c, tensors)


def save_policy(path, params: PolicyParams) -> None:
    blob = {k: v.data for k, v in params.tensors.items()}
    blob["meta.task"] = np.array(float(pr.TASKS.index(params.task)))
    blob["meta.dims"] = np.array(
        [params.embed_dim, params.heads, params.layers, params.ff_dim], dtype=np.float64
    )
    blob["meta.clip_c"] = np.array(float(params.clip_c))
    ad.save_tensors(path, blob)


def load_policy(path) -> PolicyParams:
    blob = ad.load_tensors(path)
    try:
        task = pr.TASKS[int(blob.pop("meta.task"))]
        d, heads, layers, ff = (int(x) for x in blob.pop("meta.dims"))
        clip_c = float(blob.pop("meta.clip_c"))
    except (KeyError, IndexError) as exc:
        raise ValueError(f"checkpoint missing metadata: {exc}") from exc
    shapes = _layout(task, d, heads, layers, ff)
    if set(blob) != set(shapes):
        raise ValueError("checkpoint tensor names do not match the policy layout")
    for name, arr in blob.items():
        if arr.shape != shapes[name]:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}")
    tensors = {k: Tensor(v) for k, v in blob.items()}
    return PolicyParams(task, d, heads, layers, ff, clip_c, tensors)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Embeddings:
    """Per-node context embeddings of one instance."""

    h: Tensor  # (N, d)
    h_mean: Tensor  # (d,)
    h_depot: Tensor | None  # (d,); None for tsp (first visited node is used)


def _instance_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    # normalize each feature over the node axis, per instance
    mu = ad.tmean(x, axis=-2, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.tmean(ad.mul(xc, xc), axis=-2, keepdims=True)
    return ad.add(ad.mul(g, ad.div(xc, ad.sqrt(ad.add(var, NORM_EPS)))), b)


def _mha(h: Tensor, t: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    b, n, d = h.shape
    dk = d // heads

    def split(x: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(x, (b, n, heads, dk)), (0, 2, 1, 3))

    q = split(ad.matmul(h, t[prefix + "wq"]))
    k = split(ad.matmul(h, t[prefix + "wk"]))
    v = split(ad.matmul(h, t[prefix + "wv"]))
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dk))
    mixed = ad.matmul(ad.softmax_temp(logits, 1.0), v)  # (b, H, n, dk)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
    return ad.matmul(mixed, t[prefix + "wo"])


def encode_batch(params: PolicyParams, instances) -> Tensor:
    """(B, N, d) embeddings for same-task, same-size instances."""
    feats = []
    for inst in instances:
        if inst.task != params.task:
            raise ConfigError(f"policy is for {params.task}, instance is {inst.task}")
        feats.append(instance_features(inst))
    x = np.stack(feats)
    t = params.tensors
    if x.shape[-1] != t["embed.w"].shape[0]:
        raise ConfigError(
            f"feature width {x.shape[-1]} does not match projection "
            f"{t['embed.w'].shape}"
        )
    h = ad.add(ad.matmul(Tensor(x), t["embed.w"]), t["embed.b"])
    for i in range(params.layers):
        p = f"enc{i}."
        h = _instance_norm(
            ad.add(h, _mha(h, t, p + "attn.", params.heads)),
            t[p + "norm1.g"],
            t[p + "norm1.b"],
        )
        inner = ad.relu(ad.add(ad.matmul(h, t[p + "ff.w1"]), t[p + "ff.b1"]))
        ff = ad.add(ad.matmul(inner, t[p + "ff.w2"]), t[p + "ff.b2"])
        h = _instance_norm(ad.add(h, ff), t[p + "norm2.g"], t[p + "norm2.b"])
    if not np.isfinite(h.data).all():
        raise ConfigError("encoder produced non-finite embeddings")
    return h


def encode(params: PolicyParams, instance: pr.Instance) -> Embeddings:
    h3 = encode_batch(params, [instance])
    h = ad.reshape(h3, (instance.n, params.embed_dim))
    h_mean = ad.tmean(h, axis=0)
    depot = None
    if instance.task in pr.DEPOT_TASKS:
        idx = np.zeros((1, 1), dtype=np.int64)
        depot = ad.reshape(ad.take_along(h, idx, axis=0), (params.embed_dim,))
    return Embeddings(h, h_mean, depot)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class DecodeConfig:
    temperature: float = 1.0
    alpha: float = 0.0
    mode: str = "sample"
    multistart: int = 1
    augmentations: int = 1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.mode not in ("sample", "greedy"):
            raise ConfigError(f"mode must be sample or greedy, got {self.mode!r}")
        if self.multistart < 1 or self.augmentations < 1:
            raise ConfigError("multistart and augmentations must be >= 1")
        if self.augmentations > 8:
            raise ConfigError("at most 8 distinct coordinate transforms exist")


def apply_eta(q: Tensor, adapter: dict[str, Tensor], groups: int = 1) -> Tensor:
    """Residual two-layer ReLU adapter on the last axis: q + mlp(q).

    Weights may be shared (w1: (d,d)) or per-instance (w1: (B,d,d) against
    q of shape (B,M,d)).  With `groups` > 1, consecutive groups of q's batch
    rows share one weight row: q (B*groups, M, d) is folded to
    (B, groups*M, d) for the matmuls, so augmented copies of an instance
    reuse its adapter without materialising repeated weights.
    """
    w1, b1, w2, b2 = adapter["w1"], adapter["b1"], adapter["w2"], adapter["b2"]
    folded = groups > 1 and w1.ndim == 3
    shape = q.shape
    if folded:
        bq, m, d = shape
        q = ad.reshape(q, (bq // groups, groups * m, d))
    z = ad.relu(ad.add(ad.matmul(q, w1), b1))
    out = ad.add(q, ad.add(ad.matmul(z, w2), b2))
    if folded:
        out = ad.reshape(out, shape)
    return out


def _compat(q: Tensor, k_t: Tensor, clip_c: float, dk: int) -> Tensor:
    return ad.scale(ad.tanh(ad.scale(ad.matmul(q, k_t), 1.0 / math.sqrt(dk))), clip_c)


def decode_step(
    params: PolicyParams,
    emb: Embeddings,
    state: pr.RolloutState,
    cfg: DecodeConfig,
    adapter: dict[str, Tensor] | None = None,
) -> np.ndarray:
    """Probability over next nodes for a single rollout state."""
    inst = state.instance
    n, d = emb.h.shape
    if n != inst.n or d != params.embed_dim:
        raise ConfigError(f"embeddings shaped {emb.h.shape} do not fit the state")
    if pr.is_terminal(state):
        raise ValueError("state is terminal; no further actions")
    allowed = pr.feasible_mask(state)
    h = Tensor(emb.h.data)
    t = params.tensors
    k_t = ad.transpose(ad.matmul(h, t["dec.wk"]))  # (d, N)
    # value path folded through the output projection up front
    vo = ad.matmul(ad.matmul(h, t["dec.wv"]), t["dec.wo"])
    ctx = np.zeros(d)
    if inst.task in pr.DEPOT_TASKS:
        ctx = ctx + emb.h_depot.data
    elif state.partial:
        ctx = ctx + emb.h.data[state.partial[0]]
    if state.current is not None:
        ctx = ctx + emb.h.data[state.current]
    q = Tensor((emb.h_mean.data + ctx)[None, :])  # (1, d)
    dk = d // params.heads
    att = ad.softmax_temp(_compat(q, k_t, params.clip_c, dk), 1.0, mask=~allowed)
    glimpse = ad.add(ad.matmul(att, vo), t["dec.bo"])
    if adapter is not None:
        glimpse = apply_eta(glimpse, adapter)
    u = _compat(glimpse, k_t, params.clip_c, dk)
    if cfg.alpha > 0.0:
        u = ad.sub(u, Tensor(cfg.alpha * pr.locality_distances(state)[None, :]))
    p = ad.softmax_temp(u, cfg.temperature, mask=~allowed)
    return p.data[0].copy()


# ---------------------------------------------------------------------------
# coordinate transforms
# ---------------------------------------------------------------------------

_TRANSFORMS = (
    lambda x, y: (x, y),
    lambda x, y: (1.0 - x, y),
    lambda x, y: (x, 1.0 - y),
    lambda x, y: (1.0 - x, 1.0 - y),
    lambda x, y: (y, x),
    lambda x, y: (1.0 - y, x),
    lambda x, y: (y, 1.0 - x),
    lambda x, y: (1.0 - y, 1.0 - x),
)


def augment(instance: pr.Instance, index: int) -> pr.Instance:
    """One of the 8 unit-square symmetries applied to coords; payloads kept."""
    if not 0 <= index < 8:
        raise ValueError(f"transform index must be in 0..7, got {index}")
    if index == 0:
        return instance
    x, y = instance.coords[:, 0], instance.coords[:, 1]
    nx, ny = _TRANSFORMS[index](x, y)
    return dataclasses.replace(instance, coords=np.stack([nx, ny], axis=1))


# ---------------------------------------------------------------------------
# batched rollouts
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Trajectory:
    actions: tuple[int, ...]
    objective: float
    step_logps: tuple[float, ...]  # zeros at forced and padded steps

    @property
    def logp(self) -> float:
        return float(np.sum(self.step_logps))


@dataclasses.dataclass
class BatchRollout:
    """M*A trajectories per instance; logp stays on the tape when recording."""

    instances: list
    aug: int
    actions: np.ndarray  # (B*A, M, T)
    objectives: np.ndarray  # (B*A, M)
    logp: Tensor  # (B*A, M)
    step_logps: np.ndarray  # (B*A, M, T)

    def per_instance_objectives(self) -> np.ndarray:
        b = len(self.instances)
        return self.objectives.reshape(b, -1)

    def best_solutions(self) -> list[pr.Solution]:
        maximize = pr.is_maximization(self.instances[0].task)
        b = len(self.instances)
        objs = self.per_instance_objectives()
        acts = self.actions.reshape(b, objs.shape[1], -1)
        out = []
        for i in range(b):
            j = int(objs[i].argmax() if maximize else objs[i].argmin())
            out.append(pr.Solution(tuple(int(a) for a in acts[i, j]), float(objs[i, j])))
        return out


def _select_starts(env: pr.BatchEnv, m: int, rng) -> np.ndarray:
    """Distinct feasible first moves; random subset when there are too many."""
    mask0 = env.mask()[:, 0, :]
    starts = np.empty((env.b, m), dtype=np.int64)
    for i in range(env.b):
        avail = np.flatnonzero(mask0[i])
        if len(avail) > m:
            sel = np.sort(rng.permutation(avail)[:m]) if rng is not None else avail[:m]
        else:
            sel = np.resize(avail, m)
        starts[i] = sel
    return starts


def _choose(p: np.ndarray, mode: str, rng) -> np.ndarray:
    if mode == "greedy":
        return p.argmax(-1).astype(np.int64)
    cdf = np.cumsum(p, axis=-1)
    r = rng.random(p.shape[:-1] + (1,)) * cdf[..., -1:]
    return (r < cdf).argmax(-1).astype(np.int64)


def rollout_batch(
    params: PolicyParams,
    instances,
    cfg: DecodeConfig,
    adapter: dict[str, Tensor] | None = None,
    rng=None,
    h: Tensor | None = None,
    forced_actions: np.ndarray | None = None,
) -> BatchRollout:
    """Decode multistart rollouts for a batch of same-size instances.

    `h` overrides the internal encoder (its tape, if any, receives the
    decode); with augmentation it must cover the expanded batch, one row
    per (instance, transform) pair in instance-major order.  Gradients
    reach whatever is watched: params, adapter tensors, or `h` itself.

    `forced_actions` (B, M, T) replays fixed trajectories instead of
    choosing: column 0 is the forced start, later columns must stay
    feasible.  Useful for scoring given solutions under the current
    parameters.
    """
    instances = list(instances)
    if cfg.mode == "sample" and rng is None and forced_actions is None:
        raise ConfigError("sample mode needs an rng")
    a = cfg.augmentations
    if a > 1:
        if forced_actions is not None:
            raise ConfigError("cannot replay fixed trajectories across augmentations")
        expanded = [augment(inst, t) for inst in instances for t in range(a)]
    else:
        expanded = instances
    env = pr.BatchEnv(expanded, cfg.multistart)
    if forced_actions is not None:
        forced_actions = np.asarray(forced_actions, dtype=np.int64)
        if forced_actions.shape[:2] != (env.b, env.m):
            raise ConfigError(
                f"forced actions shaped {forced_actions.shape} do not fit the batch"
            )
    if h is None:
        h = encode_batch(params, expanded)
    elif h.shape != (len(expanded), env.n, params.embed_dim):
        raise ConfigError(f"h shaped {h.shape} does not fit the batch")
    b, m, d = env.b, env.m, params.embed_dim
    t = params.tensors
    dk = d // params.heads
    k_t = ad.transpose(ad.matmul(h, t["dec.wk"]))  # (B, d, N)
    # value path folded through the output projection once per batch
    vo = ad.matmul(ad.matmul(h, t["dec.wv"]), t["dec.wo"])
    h_mean = ad.reshape(ad.tmean(h, axis=1), (b, 1, d))
    if forced_actions is not None:
        starts = forced_actions[:, :, 0]
    else:
        starts = _select_starts(env, m, rng if cfg.mode == "sample" else None)
    env.force_start(starts)
    if env.task in pr.DEPOT_TASKS:
        h_ctx = ad.take_along(h, np.zeros((b, 1, 1), dtype=np.int64), axis=1)
    else:
        h_ctx = ad.take_along(h, env.first[:, :, None], axis=1)
    base = ad.add(h_mean, h_ctx)  # (B, 1 or M, d)
    logp = Tensor(np.zeros((b, m)))
    trace = [starts]
    lps = [np.zeros((b, m))]
    limit = 3 * env.n + 10
    while not env.done.all():
        if env.steps > limit:
            raise RuntimeError("rollout failed to terminate")
        excluded = ~env.mask()
        h_last = ad.take_along(h, env.current[:, :, None], axis=1)
        q = ad.add(base, h_last)
        att = ad.softmax_temp(_compat(q, k_t, params.clip_c, dk), 1.0, mask=excluded)
        glimpse = ad.add(ad.matmul(att, vo), t["dec.bo"])
        if adapter is not None:
            glimpse = apply_eta(glimpse, adapter, groups=a)
        u = _compat(glimpse, k_t, params.clip_c, dk)
        if cfg.alpha > 0.0:
            u = ad.sub(u, Tensor(cfg.alpha * env.locality()))
        p = ad.softmax_temp(u, cfg.temperature, mask=excluded)
        if forced_actions is not None:
            col = len(trace)
            if col >= forced_actions.shape[2]:
                raise ValueError("forced actions end before rollouts terminate")
            pick = forced_actions[:, :, col]
            chosen = np.take_along_axis(p.data, pick[:, :, None], axis=2)
            if not (chosen > 0.0).all():
                raise pr.FeasibilityError("forced action has zero probability")
        else:
            pick = _choose(p.data, cfg.mode, rng)
        lp = ad.reshape(ad.log(ad.take_along(p, pick[:, :, None], axis=2)), (b, m))
        logp = ad.add(logp, lp)
        lps.append(lp.data)
        env.step(pick)
        trace.append(pick)
    return BatchRollout(
        instances=instances,
        aug=a,
        actions=np.stack(trace, axis=-1),
        objectives=env.objectives(),
        logp=logp,
        step_logps=np.stack(lps, axis=-1),
    )


def rollout(
    params: PolicyParams,
    instance: pr.Instance,
    cfg: DecodeConfig,
    adapter: dict[str, Tensor] | None = None,
    rng=None,
) -> list[Trajectory]:
    """All multistart/augmented trajectories of one instance."""
    res = rollout_batch(params.detached(), [instance], cfg, adapter=adapter, rng=rng)
    objs = res.objectives.reshape(-1)
    acts = res.actions.reshape(objs.size, -1)
    lps = res.step_logps.reshape(objs.size, -1)
    return [
        Trajectory(tuple(int(x) for x in acts[i]), float(objs[i]), tuple(lps[i]))
        for i in range(objs.size)
    ]
