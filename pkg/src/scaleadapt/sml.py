"""Scale meta-learner: conditions node embeddings on instance size.

The learner g_phi maps (h, n) -> h_S.  It is trained so that h_S imitates
the embedding the per-instance adapter would have produced after a full
adaptation run (distillation), while also directly improving the sampled
rollout objective when h_S is decoded with no adapter at all (zero-shot
simulation).  The base policy weights are frozen throughout.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import adapt as adp
from . import autodiff as ad
from . import policy as po
from . import problems as pr
from .autodiff import Tensor

_SML_ORDER = (
    "scale.w1",
    "scale.b1",
    "scale.w2",
    "scale.b2",
    "comb.w1",
    "comb.b1",
    "comb.w2",
    "comb.b2",
)


class SmlDivergedError(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite meta-training loss {value!r} in epoch {epoch}")
        self.epoch = epoch


@dataclasses.dataclass(frozen=True)
class SmlParams:
    """phi: a scale encoder (1 -> d) and a residual combiner (d -> d)."""

    embed_dim: int
    tensors: dict[str, Tensor]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def watch_all(self, tape: ad.Tape) -> list[Tensor]:
        return [tape.watch(self.tensors[n]) for n in self.names()]

    def detached(self) -> "SmlParams":
        return SmlParams(self.embed_dim, {k: Tensor(v.data) for k, v in self.tensors.items()})

    def copy(self) -> "SmlParams":
        return SmlParams(
            self.embed_dim, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()}
        )

    def unbind(self) -> None:
        for t in self.tensors.values():
            t.tape = None
            t.node = None

    def checksum(self) -> str:
        return ad.checksum({k: v.data for k, v in self.tensors.items()})


def init_sml(embed_dim: int = 128, seed: int = 0) -> SmlParams:
    """Identity at start: the combiner's output layer is zeroed."""
    rng = np.random.default_rng(seed)
    d = embed_dim
    bound = 1.0 / np.sqrt(d)
    tensors = {
        "scale.w1": Tensor(rng.uniform(-1.0, 1.0, (1, d))),
        "scale.b1": Tensor(np.zeros(d)),
        "scale.w2": Tensor(rng.uniform(-bound, bound, (d, d))),
        "scale.b2": Tensor(np.zeros(d)),
        "comb.w1": Tensor(rng.uniform(-bound, bound, (d, d))),
        "comb.b1": Tensor(np.zeros(d)),
        "comb.w2": Tensor(np.zeros((d, d))),
        "comb.b2": Tensor(np.zeros(d)),
    }
    return SmlParams(d, tensors)


def save_sml(path, phi: SmlParams) -> None:
    blob = {k: v.data for k, v in phi.tensors.items()}
    blob["meta.dim"] = np.array(float(phi.embed_dim))
    ad.save_tensors(path, blob)


def load_sml(path) -> SmlParams:
    blob = ad.load_tensors(path)
    try:
        d = int(blob.pop("meta.dim"))
    except KeyError as exc:
        raise ValueError(f"checkpoint missing metadata: {exc}") from exc
    if set(blob) != set(_SML_ORDER):
        raise ValueError("checkpoint tensor names do not match the learner layout")
    return SmlParams(d, {k: Tensor(v) for k, v in blob.items()})


def scale_feature(n: int) -> float:
    # sizes are conditioned as n/100 so desk and benchmark scales stay O(1)
    return float(n) / 100.0


def apply_sml_batch(phi: SmlParams, h: Tensor, n: int) -> Tensor:
    """h_S = h + combiner(h + scale_embedding(n)); works on (..., N, d)."""
    if n < 2:
        raise po.ConfigError(f"scale must be >= 2, got {n}")
    if h.shape[-1] != phi.embed_dim:
        raise po.ConfigError(
            f"embedding width {h.shape[-1]} does not match the learner ({phi.embed_dim})"
        )
    t = phi.tensors
    feat = Tensor(np.array([[scale_feature(n)]]))
    s = ad.relu(ad.add(ad.matmul(feat, t["scale.w1"]), t["scale.b1"]))
    s = ad.add(ad.matmul(s, t["scale.w2"]), t["scale.b2"])  # (1, d)
    z = ad.add(h, s)
    u = ad.relu(ad.add(ad.matmul(z, t["comb.w1"]), t["comb.b1"]))
    return ad.add(h, ad.add(ad.matmul(u, t["comb.w2"]), t["comb.b2"]))


def apply_sml(phi: SmlParams, emb: po.Embeddings, n: int) -> po.Embeddings:
    hs = apply_sml_batch(phi, emb.h, n)
    h_mean = ad.tmean(hs, axis=0)
    depot = None
    if emb.h_depot is not None:
        d = hs.shape[-1]
        depot = ad.reshape(
            ad.take_along(hs, np.zeros((1, d), dtype=np.int64), axis=0), (d,)
        )
    return po.Embeddings(hs, h_mean, depot)


# ---------------------------------------------------------------------------
# distillation set
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class DistillRecord:
    instance_id: str
    scale: int
    source: np.ndarray  # (N, d) embeddings before adaptation
    target: np.ndarray  # (N, d) after the trained adapter

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ValueError(
                f"source {self.source.shape} and target {self.target.shape} differ"
            )


def _adapter_transform(h: np.ndarray, eta: dict[str, np.ndarray]) -> np.ndarray:
    z = np.maximum(h @ eta["w1"] + eta["b1"], 0.0)
    return h + z @ eta["w2"] + eta["b2"]


def instance_for_record(task: str, scale: int, index: int, seed: int) -> pr.Instance:
    iid = f"n{scale:03d}-{index:04d}"
    ss = np.random.SeedSequence([seed, scale, index])
    inst = pr.generate(task, scale, int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))
    return dataclasses.replace(inst, name=iid)


def build_distill_set(
    params: po.PolicyParams,
    scales,
    per_scale: int = 200,
    k: int = 50,
    samples: int = 50,
    seed: int = 0,
    chunk: int = 25,
    out_dir=None,
) -> list[DistillRecord]:
    """Adaptation targets for every (scale, instance) pair; the learner is
    deliberately absent here, so targets do not depend on phi."""
    if per_scale < 1 or k < 0 or chunk < 1:
        raise po.ConfigError("per_scale and chunk must be >= 1, k >= 0")
    frozen = params.detached()
    records: list[DistillRecord] = []
    for scale in scales:
        cfg = adp.default_config(params.task, iterations=k, samples=samples)
        for lo in range(0, per_scale, chunk):
            idxs = range(lo, min(lo + chunk, per_scale))
            insts = [instance_for_record(params.task, scale, i, seed) for i in idxs]
            try:
                results = adp.adapt_batch(insts, cfg, frozen, seed=seed + lo)
            except adp.AdaptationDivergedError as exc:
                raise RuntimeError(
                    f"adaptation diverged for instances "
                    f"{insts[0].name}..{insts[-1].name}: {exc}"
                ) from exc
            h = po.encode_batch(frozen, insts).data
            for inst, res, hi in zip(insts, results, h):
                records.append(
                    DistillRecord(
                        instance_id=inst.name,
                        scale=scale,
                        source=hi.copy(),
                        target=_adapter_transform(hi, res.eta),
                    )
                )
    if out_dir is not None:
        save_distill_set(out_dir, params.task, k, records)
    return records


def save_distill_set(out_dir, task: str, k: int, records) -> None:
    os.makedirs(out_dir, exist_ok=True)
    by_scale: dict[int, list[DistillRecord]] = {}
    for rec in records:
        by_scale.setdefault(rec.scale, []).append(rec)
    manifest = {"task": task, "k": k, "scales": sorted(by_scale), "files": {}, "ids": {}}
    for scale, group in sorted(by_scale.items()):
        fname = f"scale_{scale:03d}.bin"
        blob = {}
        for rec in group:
            blob[f"{rec.instance_id}.src"] = rec.source
            blob[f"{rec.instance_id}.tgt"] = rec.target
        ad.save_tensors(os.path.join(out_dir, fname), blob)
        manifest["files"][str(scale)] = fname
        manifest["ids"][str(scale)] = [rec.instance_id for rec in group]
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_distill_set(in_dir) -> tuple[dict, list[DistillRecord]]:
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    records = []
    for scale_text, fname in sorted(manifest["files"].items()):
        blob = ad.load_tensors(os.path.join(in_dir, fname))
        for iid in manifest["ids"][scale_text]:
            records.append(
                DistillRecord(
                    instance_id=iid,
                    scale=int(scale_text),
                    source=blob[f"{iid}.src"],
                    target=blob[f"{iid}.tgt"],
                )
            )
    return manifest, records


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def j_distil(phi: SmlParams, records) -> Tensor:
    """Mean embedding distance to the stored targets (a loss, >= 0)."""
    records = list(records)
    if not records:
        raise po.ConfigError("no distillation records")
    total = None
    for rec in records:
        hs = apply_sml_batch(phi, Tensor(rec.source), rec.scale)
        diff = ad.sub(hs, Tensor(rec.target))
        dist = ad.sqrt(ad.tsum(ad.mul(diff, diff)))
        total = dist if total is None else ad.add(total, dist)
    return ad.scale(total, 1.0 / len(records))


def _j_sage(
    phi: SmlParams,
    params: po.PolicyParams,
    instances,
    samples: int,
    lam: float,
    rng,
) -> tuple[Tensor, float]:
    """Sampled-rollout objective with h_S decoded directly: no adapter, no
    bias, unit temperature.  Returns (objective to maximize, mean cost)."""
    frozen = params.detached()
    instances = list(instances)
    h0 = po.encode_batch(frozen, instances)
    hs = apply_sml_batch(phi, Tensor(h0.data), instances[0].n)
    dcfg = po.DecodeConfig(mode="sample", multistart=samples)
    res = po.rollout_batch(frozen, instances, dcfg, rng=rng, h=hs)
    objs = res.per_instance_objectives()
    maximize = pr.is_maximization(instances[0].task)
    lp = ad.reshape(res.logp, objs.shape)
    r = objs if maximize else -objs
    adv = r - r.mean(axis=1, keepdims=True)
    b, m = objs.shape
    j = ad.tsum(ad.mul(lp, Tensor(adv / (b * m))))
    if lam > 0.0:
        best_idx = r.argmax(axis=1).reshape(b, 1)
        j = ad.add(j, ad.scale(ad.tsum(ad.take_along(lp, best_idx, axis=1)), lam / b))
    return j, float(objs.mean())


def j_zero(
    phi: SmlParams,
    params: po.PolicyParams,
    instances,
    samples: int = 50,
    lam: float = 0.005,
    rng=None,
) -> Tensor:
    if rng is None:
        rng = np.random.default_rng(0)
    return _j_sage(phi, params, instances, samples, lam, rng)[0]


# ---------------------------------------------------------------------------
# meta-training
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SmlTrainConfig:
    beta: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 5
    batch_records: int = 32
    zero_batch: int = 8
    samples: int = 50
    lam: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0 or self.learning_rate < 0 or self.lam < 0:
            raise po.ConfigError("beta, learning_rate and lam must be non-negative")
        if self.epochs < 0:
            raise po.ConfigError("epochs must be non-negative")
        if self.batch_records < 1 or self.zero_batch < 1 or self.samples < 1:
            raise po.ConfigError("batch sizes must be positive")


@dataclasses.dataclass
class SmlTrainResult:
    phi: SmlParams
    log: list  # rows (epoch, step, distil_loss, zero_objective, mean_cost)


def train_sml(
    params: po.PolicyParams,
    records,
    cfg: SmlTrainConfig = SmlTrainConfig(),
    phi: SmlParams | None = None,
    log_path=None,
) -> SmlTrainResult:
    """Minimize distillation distance minus beta times the sampled objective.

    The base policy is frozen; fresh zero-shot batches are drawn each step
    from the scales present in the records.
    """
    records = list(records)
    if not records:
        raise po.ConfigError("no distillation records")
    frozen = params.detached()
    if phi is None:
        phi = init_sml(frozen.embed_dim, seed=cfg.seed)
    else:
        phi = phi.copy()
    scales = sorted({rec.scale for rec in records})
    order_rng = np.random.default_rng([cfg.seed, 1])
    inst_ss = np.random.SeedSequence([cfg.seed, 2])
    tensors = [phi.tensors[n] for n in phi.names()]
    adam = ad.Adam(tensors, lr=cfg.learning_rate)
    log: list = []
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(records))
        for lo in range(0, len(records), cfg.batch_records):
            batch = [records[i] for i in order[lo : lo + cfg.batch_records]]
            tape = ad.Tape()
            watched = phi.watch_all(tape)
            dist = j_distil(phi, batch)
            loss = dist
            zero_val = 0.0
            mean_cost = float("nan")
            if cfg.beta > 0.0:
                scale = scales[step % len(scales)]
                seeds = inst_ss.spawn(1)[0].generate_state(cfg.zero_batch + 1)
                insts = [
                    pr.generate(frozen.task, scale, int(s >> 1))
                    for s in seeds[: cfg.zero_batch]
                ]
                rng = np.random.default_rng(int(seeds[-1]))
                j, mean_cost = _j_sage(phi, frozen, insts, cfg.samples, cfg.lam, rng)
                zero_val = float(j.data)
                loss = ad.sub(loss, ad.scale(j, cfg.beta))
            value = float(loss.data)
            if not np.isfinite(value):
                raise SmlDivergedError(epoch, value)
            adam.step(tape.gradients(loss, watched))
            log.append((epoch, step, float(dist.data), zero_val, mean_cost))
            step += 1
    phi.unbind()
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            fh.write("epoch,step,distil_loss,zero_objective,mean_cost\n")
            for row in log:
                fh.write(
                    f"{row[0]},{row[1]},{format(row[2], '.17g')},"
                    f"{format(row[3], '.17g')},{format(row[4], '.17g')}\n"
                )
    return SmlTrainResult(phi, log)


def scale_match_table(
    phi: SmlParams,
    params: po.PolicyParams,
    n: int,
    scale_inputs,
    count: int = 64,
    samples: int = 1,
    seed: int = 0,
) -> dict[int, float]:
    """Mean greedy multistart cost on `count` size-n instances when the
    learner is told the size is n' (a conditioning diagnostic)."""
    frozen = params.detached()
    ss = np.random.SeedSequence([seed, n])
    insts = [
        pr.generate(frozen.task, n, int(s >> 1)) for s in ss.generate_state(count)
    ]
    h0 = po.encode_batch(frozen, insts)
    out = {}
    for n_prime in scale_inputs:
        hs = apply_sml_batch(phi.detached(), Tensor(h0.data), n_prime)
        dcfg = po.DecodeConfig(mode="greedy", multistart=max(samples, 1))
        res = po.rollout_batch(frozen, insts, dcfg, h=Tensor(hs.data))
        best = [s.objective for s in res.best_solutions()]
        out[int(n_prime)] = float(np.mean(best))
    return out
