"""Command line front end: configuration, orchestration and result files.

Every subcommand reads one JSON config, derives all randomness from a root
seed through named streams, and writes its outputs atomically under the
output directory (``--out``, else ``$CAL_OUT_DIR``, else ``./cal_out``).
Output file names carry the hash of the config section they depend on.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .alignment import IdentityMap, Partition, greedy_identity_search, load_map
from .autodiff import _atomic_write
from .das import DasConfig, aggregate, eval_iia, expand_grid, run_das, sweep
from .diagnostics import collision_probe, distance_csv, min_distance_table
from .errors import CausalignError, ConfigError, MissingArtifactError
from .mlp import Mlp, MlpConfig, train, train_with_interventions
from .records import CSV_COLUMNS, config_hash, derive_seed, git_describe
from .tasks import (ALGORITHM_TASK, TASKS, counterfactual_training_policy, gen_base_dataset,
                    gen_interchange_dataset, get_algorithm, load_dataset, save_dataset)
from .vacuity import FiniteWorld, pick_inputs, run_demo

FAMILIES = ("identity", "orthogonal", "revnet")
DEFAULT_HIDDEN = {"heq": [16, 16, 16], "dlaw": [24, 24, 24]}


def _section(d, key, defaults):
    got = dict(d.get(key) or {})
    unknown = set(got) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")
    return {**defaults, **got}


@dataclass
class ExperimentConfig:
    task: str
    algorithm: str
    seed: int = 0
    dnn: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    map: dict = field(default_factory=dict)
    das: dict = field(default_factory=dict)
    layers: list = field(default_factory=lambda: [1])
    sizes: list = field(default_factory=lambda: [8])
    families: list = field(default_factory=lambda: ["revnet"])
    seeds: list = field(default_factory=lambda: [0])
    greedy: dict = field(default_factory=dict)
    vacuity: dict = field(default_factory=dict)
    injectivity: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key in ("task", "algorithm"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        task = d["task"]
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        cfg = cls(
            task=task,
            algorithm=d["algorithm"],
            seed=int(d.get("seed", 0)),
            dnn=_section(d, "dnn", {"hidden_dims": DEFAULT_HIDDEN[task], "lr": 1e-3, "batch": 1024,
                                    "max_epochs": 20, "patience": 3, "train_size": 262144,
                                    "eval_size": 10000, "test_size": 10000, "counterfactual": None,
                                    "init_only": False}),
            data=_section(d, "data", {"train": 128000, "eval": 10000, "test": 10000}),
            map=_section(d, "map", {"L_rn": 10, "d_rn": [16]}),
            das=_section(d, "das", {"lr": 1e-3, "batch": 6400, "max_epochs": 50, "patience": 5,
                                    "improve_threshold": 1e-3}),
            layers=list(d.get("layers", [1])),
            sizes=list(d.get("sizes", [8])),
            families=list(d.get("families", ["revnet"])),
            seeds=list(d.get("seeds", [0])),
            greedy=_section(d, "greedy", {"layer": None, "max_size": 1}),
            vacuity=_section(d, "vacuity", {"n_inputs": 8, "layer": 1, "depth": 1, "budget": 10 ** 6}),
            injectivity=_section(d, "injectivity", {"n_samples": 100000, "n_all": 20000,
                                                    "n_ref": 1000, "seeds": [0]}),
        )
        if not isinstance(cfg.map["d_rn"], list):
            cfg.map["d_rn"] = [cfg.map["d_rn"]]
        cfg.validate()
        return cfg

    # -- validation ------------------------------------------------------
    def validate(self):
        if self.algorithm not in ALGORITHM_TASK:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if ALGORITHM_TASK[self.algorithm] != self.task:
            raise ConfigError(f"algorithm {self.algorithm!r} does not solve task {self.task!r}")
        hidden = self.dnn["hidden_dims"]
        if not hidden or any(int(h) <= 0 for h in hidden):
            raise ConfigError("hidden_dims must be a nonempty list of positive widths")
        for key in ("train_size", "eval_size", "test_size", "batch", "max_epochs", "patience"):
            if int(self.dnn[key]) <= 0:
                raise ConfigError(f"dnn.{key} must be positive")
        for key in ("train", "eval", "test"):
            if int(self.data[key]) <= 0:
                raise ConfigError(f"data.{key} must be positive")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if any(f not in FAMILIES for f in self.families) or not self.families:
            raise ConfigError(f"families must be drawn from {FAMILIES}")
        if not self.layers or not self.sizes:
            raise ConfigError("layers and sizes must be nonempty")
        n_nodes = len(get_algorithm(self.algorithm).inner)
        for layer in self.layers:
            if isinstance(layer, list) or not 1 <= int(layer) <= len(hidden):
                raise ConfigError(f"layer {layer!r} must be a single index in 1..{len(hidden)}")
            width = int(hidden[int(layer) - 1])
            for size in self.sizes:
                if int(size) <= 0 or int(size) * n_nodes > width:
                    raise ConfigError(f"size {size} x {n_nodes} nodes does not fit layer width {width}")
            if "revnet" in self.families and width % 2:
                raise ConfigError(f"RevNet needs an even width at layer {layer}")
        if int(self.map["L_rn"]) <= 0 or any(int(h) <= 0 for h in self.map["d_rn"]):
            raise ConfigError("L_rn and d_rn must be positive")
        for key in ("lr",):
            if float(self.das[key]) <= 0 or float(self.dnn[key]) <= 0:
                raise ConfigError("learning rates must be positive")
        for key in ("batch", "max_epochs", "patience"):
            if int(self.das[key]) <= 0:
                raise ConfigError(f"das.{key} must be positive")
        cf = self.dnn["counterfactual"]
        if cf is not None:
            if set(cf) - {"algorithm", "layer", "size"}:
                raise ConfigError("dnn.counterfactual takes algorithm, layer and size")
            alg = cf.get("algorithm", self.algorithm)
            if ALGORITHM_TASK.get(alg) != self.task:
                raise ConfigError(f"counterfactual algorithm {alg!r} does not solve {self.task!r}")
            layer, size = int(cf.get("layer", 1)), int(cf.get("size", 1))
            k = len(get_algorithm(alg).inner)
            if not 1 <= layer <= len(hidden) or size <= 0 or size * k > int(hidden[layer - 1]):
                raise ConfigError("counterfactual partition does not fit the network")
        g = self.greedy
        if g["layer"] is not None and not 1 <= int(g["layer"]) <= len(hidden):
            raise ConfigError("greedy.layer out of range")
        glayer = int(g["layer"] or self.layers[0])
        if int(g["max_size"]) <= 0 or int(g["max_size"]) * n_nodes > int(hidden[glayer - 1]) - 1:
            raise ConfigError("greedy.max_size leaves no unused neuron")
        v = self.vacuity
        if int(v["n_inputs"]) < 2 or int(v["depth"]) < 0 or int(v["budget"]) <= 0:
            raise ConfigError("vacuity needs n_inputs >= 2, depth >= 0, budget > 0")
        if not 1 <= int(v["layer"]) <= len(hidden) or n_nodes >= int(hidden[int(v["layer"]) - 1]):
            raise ConfigError("vacuity layer must exist and keep one unused neuron")
        inj = self.injectivity
        if int(inj["n_samples"]) < 2 or not 2 <= int(inj["n_ref"]) <= int(inj["n_all"]):
            raise ConfigError("injectivity needs n_samples >= 2 and 2 <= n_ref <= n_all")
        if not inj["seeds"]:
            raise ConfigError("injectivity.seeds must be nonempty")
        return self

    def to_dict(self):
        return asdict(self)

    def hash(self, *keys):
        d = self.to_dict()
        return config_hash({k: d[k] for k in keys} if keys else d)

    # -- derived pieces --------------------------------------------------
    def stream(self, purpose):
        return derive_seed(self.seed, purpose)

    def mlp_config(self):
        d = self.dnn
        return MlpConfig(input_dim=TASKS[self.task].input_dim, hidden_dims=tuple(d["hidden_dims"]),
                         seed=self.stream("dnn-init"), lr=float(d["lr"]), batch=int(d["batch"]),
                         max_epochs=int(d["max_epochs"]), patience=int(d["patience"]))

    def das_configs(self):
        kw = {k: self.das[k] for k in ("lr", "batch", "max_epochs", "patience", "improve_threshold")}
        out = expand_grid(self.algorithm, [int(l) for l in self.layers], [int(s) for s in self.sizes],
                          self.families, [self.stream(f"das-{s}") for s in self.seeds],
                          L_rn=int(self.map["L_rn"]), d_rn=[int(h) for h in self.map["d_rn"]], **kw)
        return out


# -- file helpers -------------------------------------------------------------
def out_dir(arg):
    d = Path(arg or os.environ.get("CAL_OUT_DIR") or "cal_out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_text(path, text):
    _atomic_write(path, text.encode())


def write_json(path, obj):
    write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def dnn_key(cfg):
    return cfg.hash("task", "seed", "dnn")


def dnn_path(cfg, out):
    return out / f"dnn-{dnn_key(cfg)}"


def data_key(cfg):
    return cfg.hash("task", "algorithm", "seed", "data")


def _base_sets(cfg):
    d = cfg.dnn
    return (gen_base_dataset(cfg.task, int(d["train_size"]), cfg.stream("base-train")),
            gen_base_dataset(cfg.task, int(d["eval_size"]), cfg.stream("base-eval")),
            gen_base_dataset(cfg.task, int(d["test_size"]), cfg.stream("base-test")))


def interchange_sets(cfg, out, save=False):
    """Train/eval/test interchange datasets, loaded from ``out`` if present."""
    key = data_key(cfg)
    sets = []
    for split in ("train", "eval", "test"):
        path = out / f"data-{split}-{key}"
        if Path(f"{path}.json").exists():
            sets.append(load_dataset(path))
            continue
        ds = gen_interchange_dataset(cfg.task, cfg.algorithm, int(cfg.data[split]),
                                     cfg.stream(f"interchange-{split}"))
        if save:
            save_dataset(path, ds, {"config_hash": key})
        sets.append(ds)
    return tuple(sets)


def load_dnn(cfg, out):
    path = dnn_path(cfg, out)
    if not Path(f"{path}.json").exists():
        raise MissingArtifactError(f"no trained network at {path}.json; run train-dnn first")
    return Mlp.load(path)


# -- commands -----------------------------------------------------------------
def cmd_gen_data(cfg, out, jobs=1):
    key = data_key(cfg)
    train_b, eval_b, test_b = _base_sets(cfg)
    paths = []
    for split, ds in zip(("train", "eval", "test"), (train_b, eval_b, test_b)):
        p = out / f"base-{split}-{dnn_key(cfg)}"
        save_dataset(p, ds, {"config_hash": dnn_key(cfg)})
        paths.append(f"{p}.json")
    interchange_sets(cfg, out, save=True)
    paths += [str(out / f"data-{s}-{key}.json") for s in ("train", "eval", "test")]
    return {"config_hash": key, "files": paths}


def cmd_train_dnn(cfg, out, jobs=1):
    mcfg = cfg.mlp_config()
    model = Mlp.init(mcfg)
    test = None
    t0 = time.perf_counter()
    cf = cfg.dnn["counterfactual"]
    if cfg.dnn["init_only"]:
        history = []
        _, _, test = _base_sets(cfg)
    elif cf is None:
        tr, ev, test = _base_sets(cfg)
        history = train(model, tr, mcfg, ev).history
    else:
        alg = cf.get("algorithm", cfg.algorithm)
        layer, size = int(cf.get("layer", 1)), int(cf.get("size", 1))
        pol = counterfactual_training_policy(alg)
        n = cfg.dnn
        tr = gen_interchange_dataset(cfg.task, alg, int(n["train_size"]), cfg.stream("cf-train"), pol)
        ev = gen_interchange_dataset(cfg.task, alg, int(n["eval_size"]), cfg.stream("cf-eval"), pol)
        part = Partition.contiguous(tr.nodes, size, model.layer_dim(layer))
        history = train_with_interventions(model, tr, layer, part.nodes, mcfg, ev).history
        test = gen_base_dataset(cfg.task, int(n["test_size"]), cfg.stream("base-test"))
    acc = model.accuracy(test.x, test.y)
    key = dnn_key(cfg)
    path = dnn_path(cfg, out)
    model.save(path, {"config_hash": key, "config": cfg.mlp_config().to_dict()})
    write_text(out / f"dnn-metrics-{key}.csv",
               csv_text(["epoch", "loss", "eval_acc"],
                        [[h["epoch"], repr(h["loss"]), repr(h["eval_acc"])] for h in history]))
    return {"config_hash": key, "checkpoint": f"{path}.json", "test_accuracy": acc,
            "epochs": len(history), "wall_ms": round((time.perf_counter() - t0) * 1000, 1)}


def _record_rows(records):
    return [r.csv_row() for r in records]


def cmd_train_align(cfg, out, jobs=1):
    dnn = load_dnn(cfg, out)
    datasets = interchange_sets(cfg, out)
    dcfg = cfg.das_configs()[0]
    rec, amap, part = run_das(dnn, datasets, dcfg)
    rec.git = git_describe()
    key = dcfg.hash()
    amap.save(out / f"map-{key}", part, {"config_hash": key})
    rec.artifacts = {"map": str(out / f"map-{key}.json"), "dnn": str(dnn_path(cfg, out)) + ".json"}
    write_json(out / f"run-{key}.json", rec.to_dict())
    write_text(out / f"run-{key}.csv", csv_text(CSV_COLUMNS, _record_rows([rec])))
    return {"config_hash": key, "iia": rec.iia, "plain_acc": rec.plain_acc, "epochs": rec.epochs}


def cmd_eval_iia(cfg, out, jobs=1):
    dnn = load_dnn(cfg, out)
    _, _, test = interchange_sets(cfg, out)
    dcfg = cfg.das_configs()[0]
    key = dcfg.hash()
    if dcfg.family == "identity":
        amap = IdentityMap(dnn.layer_dim(dcfg.layer))
        part = Partition.contiguous(test.nodes, dcfg.intervention_size, amap.dim)
    else:
        path = out / f"map-{key}"
        if not Path(f"{path}.json").exists():
            raise MissingArtifactError(f"no trained map at {path}.json; run train-align first")
        amap, part, _ = load_map(path)
    rep = eval_iia(dnn, amap, part, test, dcfg.layer, key, dcfg.seed)
    write_json(out / f"iia-{key}.json", rep.to_dict())
    return rep.to_dict()


def cmd_greedy_id(cfg, out, jobs=1):
    dnn = load_dnn(cfg, out)
    _, ev, test = interchange_sets(cfg, out)
    layer = int(cfg.greedy["layer"] or cfg.layers[0])
    res = greedy_identity_search(dnn, get_algorithm(cfg.algorithm), layer, int(cfg.greedy["max_size"]), ev)
    rep = eval_iia(dnn, IdentityMap(dnn.layer_dim(layer)), res.partition, test, layer)
    key = cfg.hash("task", "algorithm", "seed", "dnn", "data", "greedy", "layers")
    body = {"config_hash": key, "layer": layer, "partition": res.partition.to_dict(),
            "trace": res.trace, "test_iia": rep.iia}
    write_json(out / f"greedy-{key}.json", body)
    return body


def cmd_sweep(cfg, out, jobs=1):
    dnn = load_dnn(cfg, out)
    datasets = interchange_sets(cfg, out)
    records = sweep(dnn, datasets, cfg.das_configs(), jobs=jobs)
    key = cfg.hash()
    for r in records:
        r.git = git_describe()
    write_text(out / f"sweep-{key}.csv", csv_text(CSV_COLUMNS, _record_rows(records)))
    agg = aggregate(records)
    cols = ["task", "alg", "family", "layer", "size", "d_rn", "L_rn", "n", "max", "mean", "ci_low", "ci_high"]
    write_text(out / f"sweep-aggregate-{key}.csv",
               csv_text(["config_hash", *cols], [[key, *(("" if a[c] is None else a[c]) for c in cols)] for a in agg]))
    write_json(out / f"sweep-{key}.json", {"config": cfg.to_dict(), "records": [r.to_dict() for r in records]})
    return {"config_hash": key, "runs": len(records),
            "failed": sum(r.status != "ok" for r in records), "cells": len(agg)}


def cmd_vacuity(cfg, out, jobs=1):
    dnn = load_dnn(cfg, out)
    v = cfg.vacuity
    alg = get_algorithm(cfg.algorithm)
    x = pick_inputs(cfg.task, dnn, int(v["n_inputs"]), cfg.stream("vacuity-inputs"), alg)
    world = FiniteWorld(x, dnn, alg, int(v["layer"]), depth=int(v["depth"]), budget=int(v["budget"]))
    report = run_demo(world)
    key = cfg.hash("task", "algorithm", "seed", "dnn", "vacuity")
    report["config_hash"] = key
    write_json(out / f"vacuity-{key}.json", report)
    return report


def cmd_injectivity(cfg, out, jobs=1):
    dnn = load_dnn(cfg, out)
    inj = cfg.injectivity
    key = cfg.hash("task", "algorithm", "seed", "dnn", "injectivity")
    collisions = collision_probe(dnn, int(inj["n_samples"]), cfg.stream("collisions"), cfg.task)
    reports = [min_distance_table(dnn, int(inj["n_all"]), int(inj["n_ref"]),
                                  cfg.stream(f"distances-{s}"), cfg.task, cfg.algorithm)
               for s in inj["seeds"]]
    write_text(out / f"injectivity-{key}.csv", distance_csv(reports))
    write_json(out / f"injectivity-{key}.json",
               {"config_hash": key, "collisions": collisions, "reports": [r.to_dict() for r in reports]})
    return {"config_hash": key, "collisions": collisions}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dnn": cmd_train_dnn,
    "train-align": cmd_train_align,
    "eval-iia": cmd_eval_iia,
    "greedy-id": cmd_greedy_id,
    "sweep": cmd_sweep,
    "vacuity-demo": cmd_vacuity,
    "injectivity-probe": cmd_injectivity,
}


def load_config(path, seed=None):
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"config file {p} not found")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if seed is not None and isinstance(raw, dict):
        raw["seed"] = seed
    return ExperimentConfig.from_dict(raw)


def build_parser():
    p = argparse.ArgumentParser(prog="causalign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--seed", type=int, default=None, help="override the root seed")
        s.add_argument("--jobs", type=int, default=1, help="parallel jobs for sweeps")
        s.add_argument("--out", default=None, help="output directory (default $CAL_OUT_DIR or ./cal_out)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        if args.jobs <= 0:
            raise ConfigError("--jobs must be positive")
        result = COMMANDS[args.command](cfg, out_dir(args.out), args.jobs)
    except CausalignError as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "exit_code": exc.exit_code}) + "\n")
        return exc.exit_code
    sys.stdout.write(json.dumps(result, indent=2, sort_keys=True, default=str) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
