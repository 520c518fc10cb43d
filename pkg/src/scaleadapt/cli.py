"""Command-line entry point.

Subcommands cover the whole pipeline: gen (instance files), pretrain
(policy weights), distill (adaptation targets), train-sml (scale
meta-learner), adapt (test-time adaptation with --mode sage/eas/as), eval
(greedy multistart against a baseline), and report (aggregate CSVs).
Every run directory receives a config.toml snapshot that replays the run
bit-for-bit under the same seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import json
import os
import sys
import time

import numpy as np

from . import adapt as adp
from . import baselines as bl
from . import config as cf
from . import formats as fm
from . import policy as po
from . import problems as pr
from . import sml as sm
from . import training as tr

SCHEMAS = {
    "gen": {"n": 20, "count": 100, "format": "json"},
    "pretrain": {
        "n": 20, "epochs": 40, "steps": 100, "batch": 64, "multistart": 20, "lr": 1e-4,
    },
    "distill": {
        "checkpoint": "", "scales": [30, 40, 50], "per_scale": 200, "k": 50,
        "samples": 50, "chunk": 25,
    },
    "train-sml": {
        "checkpoint": "", "records": "", "beta": 1.0, "lr": 1e-3, "epochs": 5,
        "batch_records": 32, "zero_batch": 8, "samples": 50, "lam": 0.005,
    },
    "adapt": {
        "checkpoint": "", "sml": "", "no_sml": False, "mode": "sage",
        "iterations": -1, "samples": 50, "augmentations": 1, "lam": 0.005,
        "delta": -1.0, "alpha0": 1.0, "alpha_end": 0.3, "temp0": 1.0,
        "temp_end": 0.3, "instances": "", "n": 50, "count": 8,
    },
    "eval": {
        "checkpoint": "", "baseline": "nn", "instances": "", "n": 20, "count": 64,
        "multistart": 0, "augmentations": 1,
    },
    "report": {"runs": ""},
}

_CLI_ERRORS = (
    cf.OptionError,
    po.ConfigError,
    bl.SizeError,
    fm.ParseError,
    fm.UnsupportedFormatError,
    fm.DegenerateInstanceError,
    pr.FeasibilityError,
    adp.AdaptationDivergedError,
    sm.SmlDivergedError,
    tr.TrainingDivergedError,
    FileNotFoundError,
    NotADirectoryError,
    ValueError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scaleadapt",
        description="constructive routing policies with test-time adaptation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command, help=f"run the {command} stage")
        p.add_argument("--config", help="TOML config file (flags override it)")
        for key, template in {**cf.COMMON, **schema}.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(template, bool):
                p.add_argument(flag, dest=key, action="store_const", const=True,
                               default=None, help=f"set {key} (default false)")
            else:
                p.add_argument(flag, dest=key, default=None, metavar=key.upper(),
                               help=f"{key} (default {template!r})")
        if command == "report":
            p.add_argument("run_dirs", nargs="*", metavar="RUN_DIR",
                           help="run directories holding gap.csv / solutions.csv")
    return parser


def _resolve(args: argparse.Namespace, command: str) -> dict:
    schema = SCHEMAS[command]
    file_data = cf.load_file(args.config) if args.config else None
    flags = {
        key: getattr(args, key, None) for key in list(cf.COMMON) + list(schema)
    }
    if command == "report" and getattr(args, "run_dirs", None):
        flags["runs"] = ",".join(args.run_dirs)
    cfg = cf.resolve(command, schema, file_data, os.environ, flags)
    if cfg["task"] not in pr.TASKS:
        raise cf.OptionError(f"task must be one of {pr.TASKS}, got {cfg['task']!r}")
    return cfg


def _ensure_run_dir(cfg: dict, command: str) -> str:
    out = cfg["out"] or os.path.join("runs", command)
    os.makedirs(out, exist_ok=True)
    snap = dict(cfg)
    snap["out"] = out
    cf.write_snapshot(os.path.join(out, "config.toml"), command, SCHEMAS[command], snap)
    return out


def _instance_seed(run_seed: int, n: int, index: int) -> int:
    ss = np.random.SeedSequence([run_seed, n, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def _gen_instance(task: str, n: int, run_seed: int, index: int):
    seed = _instance_seed(run_seed, n, index)
    inst = pr.generate(task, n, seed)
    name = f"{task}{n:03d}-{index:04d}"
    return dataclasses.replace(inst, name=name), seed


def _load_policy(path: str) -> po.PolicyParams:
    if not path:
        raise cf.OptionError("--checkpoint is required (path to a policy.bin)")
    if not os.path.exists(path):
        raise cf.OptionError(
            f"checkpoint not found at {path}; run `scaleadapt pretrain` first"
        )
    return po.load_policy(path)


def _load_instances(cfg: dict, task: str) -> list:
    if cfg["instances"]:
        files = sorted(
            path
            for path in glob.glob(os.path.join(cfg["instances"], "*.json"))
            if os.path.basename(path) != "manifest.json"
        )
        if not files:
            raise cf.OptionError(
                f"no .json instances under {cfg['instances']}; "
                "create some with `scaleadapt gen`"
            )
        insts = []
        for path in files:
            inst = fm.read_native(path)
            if inst.task != task:
                raise cf.OptionError(
                    f"{path} is a {inst.task} instance but the run is for {task}"
                )
            if not inst.name:
                stem = os.path.splitext(os.path.basename(path))[0]
                inst = dataclasses.replace(inst, name=stem)
            insts.append(inst)
        return insts
    return [
        _gen_instance(task, cfg["n"], cfg["seed"], i)[0] for i in range(cfg["count"])
    ]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _resolve(args, "gen")
    if cfg["format"] not in ("json", "lib"):
        raise cf.OptionError(f"format must be json or lib, got {cfg['format']!r}")
    out = _ensure_run_dir(cfg, "gen")
    ids, seeds = [], []
    for i in range(cfg["count"]):
        inst, seed = _gen_instance(cfg["task"], cfg["n"], cfg["seed"], i)
        ids.append(inst.name)
        seeds.append(seed)
        if cfg["format"] == "json":
            fm.write_native(inst, os.path.join(out, f"{inst.name}.json"))
        else:
            ext = "tsp" if cfg["task"] == "tsp" else "vrp"
            fm.write_lib(inst, os.path.join(out, f"{inst.name}.{ext}"))
    manifest = {
        "task": cfg["task"], "n": cfg["n"], "count": cfg["count"],
        "seed": cfg["seed"], "format": cfg["format"], "ids": ids, "seeds": seeds,
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    print(f"wrote {cfg['count']} {cfg['task']} instances (n={cfg['n']}) to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve(args, "pretrain")
    out = _ensure_run_dir(cfg, "pretrain")
    tcfg = tr.TrainConfig(
        task=cfg["task"],
        n_train=cfg["n"],
        batch_instances=cfg["batch"],
        multistart=cfg["multistart"],
        epochs=cfg["epochs"],
        steps_per_epoch=cfg["steps"],
        learning_rate=cfg["lr"],
        seed=cfg["seed"],
    )
    start = time.perf_counter()
    params = tr.pretrain(tcfg, log_path=os.path.join(out, "curve.csv"))
    elapsed = time.perf_counter() - start
    ckpt = os.path.join(out, "policy.bin")
    po.save_policy(ckpt, params)
    _log(out, f"pretrain finished in {elapsed:.1f}s")
    print(f"pretrained {cfg['task']} (n={cfg['n']}) -> {ckpt}")
    return 0


def cmd_distill(args) -> int:
    cfg = _resolve(args, "distill")
    params = _load_policy(cfg["checkpoint"])
    out = _ensure_run_dir(cfg, "distill")
    start = time.perf_counter()
    records = sm.build_distill_set(
        params,
        cfg["scales"],
        per_scale=cfg["per_scale"],
        k=cfg["k"],
        samples=cfg["samples"],
        seed=cfg["seed"],
        chunk=cfg["chunk"],
        out_dir=out,
    )
    _log(out, f"distillation finished in {time.perf_counter() - start:.1f}s")
    print(f"stored {len(records)} adaptation targets under {out}")
    return 0


def cmd_train_sml(args) -> int:
    cfg = _resolve(args, "train-sml")
    params = _load_policy(cfg["checkpoint"])
    if not cfg["records"]:
        raise cf.OptionError("--records is required (directory written by distill)")
    try:
        _, records = sm.load_distill_set(cfg["records"])
    except FileNotFoundError as exc:
        raise cf.OptionError(
            f"no distillation records at {cfg['records']}; run `scaleadapt distill` "
            f"first ({exc})"
        ) from exc
    out = _ensure_run_dir(cfg, "train-sml")
    scfg = sm.SmlTrainConfig(
        beta=cfg["beta"],
        learning_rate=cfg["lr"],
        epochs=cfg["epochs"],
        batch_records=cfg["batch_records"],
        zero_batch=cfg["zero_batch"],
        samples=cfg["samples"],
        lam=cfg["lam"],
        seed=cfg["seed"],
    )
    start = time.perf_counter()
    result = sm.train_sml(params, records, scfg, log_path=os.path.join(out, "sml_log.csv"))
    _log(out, f"meta-training finished in {time.perf_counter() - start:.1f}s")
    path = os.path.join(out, "sml.bin")
    sm.save_sml(path, result.phi)
    print(f"trained scale learner on {len(records)} records -> {path}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _resolve(args, "adapt")
    params = _load_policy(cfg["checkpoint"])
    if params.task != cfg["task"]:
        raise cf.OptionError(
            f"checkpoint is a {params.task} policy but task={cfg['task']}; "
            "pass --task to match"
        )
    insts = _load_instances(cfg, params.task)
    phi = None
    if cfg["mode"] == "sage" and cfg["sml"] and not cfg["no_sml"]:
        if not os.path.exists(cfg["sml"]):
            raise cf.OptionError(
                f"scale learner not found at {cfg['sml']}; run `scaleadapt train-sml` "
                "first or pass --no-sml"
            )
        phi = sm.load_sml(cfg["sml"])
    kwargs = dict(
        iterations=(
            adp.DEFAULT_ITERATIONS[params.task]
            if cfg["iterations"] < 0
            else cfg["iterations"]
        ),
        samples=cfg["samples"],
        lam=cfg["lam"],
        augmentations=cfg["augmentations"],
        delta=None if cfg["delta"] < 0 else cfg["delta"],
    )
    if cfg["mode"] == "sage":
        kwargs.update(
            alpha0=cfg["alpha0"], alphaK=cfg["alpha_end"],
            temp0=cfg["temp0"], tempK=cfg["temp_end"],
        )
    scfg = adp.default_config(params.task, mode=cfg["mode"], **kwargs)
    out = _ensure_run_dir(cfg, "adapt")
    method = cfg["mode"] + ("+sml" if phi is not None else "")
    groups: dict[int, list[int]] = {}
    for i, inst in enumerate(insts):
        groups.setdefault(inst.n, []).append(i)
    results: list = [None] * len(insts)
    start = time.perf_counter()
    for gi, (n, idxs) in enumerate(sorted(groups.items())):
        batch = [insts[i] for i in idxs]
        for i, res in zip(idxs, adp.adapt_batch(batch, scfg, params, sml=phi,
                                                seed=cfg["seed"] + gi)):
            results[i] = res
    _log(out, f"adaptation finished in {time.perf_counter() - start:.1f}s")
    with open(os.path.join(out, "solutions.csv"), "w", encoding="utf-8",
              newline="") as fh:
        fh.write("instance,method,obj,seconds\n")
        for inst, res in zip(insts, results):
            adp.write_history_csv(
                os.path.join(out, f"history_{inst.name}.csv"), res.state.history
            )
            fh.write(
                f"{inst.name},{method},{res.state.best.objective:.17g},0\n"
            )
    mean_best = float(np.mean([r.state.best.objective for r in results]))
    print(
        f"adapted {len(insts)} instances with {method} "
        f"(K={scfg.iterations}, M={scfg.samples}): mean best {mean_best:.6f}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args, "eval")
    params = _load_policy(cfg["checkpoint"])
    if params.task != cfg["task"]:
        raise cf.OptionError(
            f"checkpoint is a {params.task} policy but task={cfg['task']}; "
            "pass --task to match"
        )
    insts = _load_instances(cfg, params.task)
    if cfg["baseline"] == "nn":
        if params.task not in ("tsp", "cvrp"):
            raise cf.OptionError(
                "the nearest-neighbor baseline covers tsp and cvrp only; "
                "use --baseline exact on tiny instances"
            )
        base = [bl.nearest_neighbor(inst).objective for inst in insts]
    elif cfg["baseline"] == "exact":
        try:
            base = [bl.exact_small(inst).objective for inst in insts]
        except bl.SizeError as exc:
            raise cf.OptionError(
                f"exact baseline refused an instance: {exc}; "
                f"size caps are {bl.EXACT_CAPS}"
            ) from exc
    else:
        raise cf.OptionError(f"baseline must be nn or exact, got {cfg['baseline']!r}")
    report = tr.validate(
        params,
        insts,
        base,
        multistart=cfg["multistart"] if cfg["multistart"] > 0 else None,
        augmentations=cfg["augmentations"],
    )
    rows = list(report.rows) + [
        bl.GapRow(inst.name, cfg["baseline"], b, b, 0.0, 0.0)
        for inst, b in zip(insts, base)
    ]
    rows.sort(key=lambda r: (r.instance, r.method))
    out = _ensure_run_dir(cfg, "eval")
    bl.write_gap_csv(os.path.join(out, "gap.csv"), rows)
    print(
        f"evaluated {len(insts)} instances: mean obj {report.mean_objective:.6f}, "
        f"mean gap {report.mean_gap_pct:+.3f}% vs {cfg['baseline']}"
    )
    return 0


def cmd_report(args) -> int:
    cfg = _resolve(args, "report")
    run_dirs = [d for d in cfg["runs"].split(",") if d]
    if not run_dirs:
        raise cf.OptionError("report needs at least one run directory")
    lines = []
    for run in run_dirs:
        found = False
        for fname in ("gap.csv", "solutions.csv"):
            path = os.path.join(run, fname)
            if not os.path.exists(path):
                continue
            found = True
            with open(path, encoding="utf-8", newline="") as fh:
                rows = list(csv.DictReader(fh))
            per_method: dict[str, list[dict]] = {}
            for row in rows:
                per_method.setdefault(row["method"], []).append(row)
            for mth in sorted(per_method):
                group = per_method[mth]
                mean_obj = float(np.mean([float(r["obj"]) for r in group]))
                gaps = [float(r["gap_pct"]) for r in group if "gap_pct" in r]
                gap_text = f",{np.mean(gaps):.17g}" if gaps else ","
                lines.append(f"{run},{mth},{len(group)},{mean_obj:.17g}{gap_text}")
        if not found:
            raise cf.OptionError(
                f"{run} holds no gap.csv or solutions.csv; is it a run directory?"
            )
    text = "run,method,count,mean_obj,mean_gap_pct\n" + "\n".join(lines) + "\n"
    sys.stdout.write(text)
    print(
        "note: baselines are these heuristics, not exact solvers; gap magnitudes"
        " are not comparable with published benchmark tables."
    )
    if cfg["out"]:
        os.makedirs(cfg["out"], exist_ok=True)
        with open(os.path.join(cfg["out"], "report.csv"), "w", encoding="utf-8",
                  newline="") as fh:
            fh.write(text)
    return 0


def _log(out: str, message: str) -> None:
    with open(os.path.join(out, "run.log"), "a", encoding="utf-8") as fh:
        fh.write(message + "\n")


_COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "train-sml": cmd_train_sml,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _CLI_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
