"""Hierarchical-equality and distributive-law tasks, their candidate
algorithms, and base / interchange dataset generators.

Inputs are concatenations of 4-dimensional blocks drawn uniformly from
[-0.5, 0.5].  Equal blocks are produced by copying, so block equality is
exact float equality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import load_bundle, save_bundle
from .causal_model import CausalModel, Node, evaluate, run_until
from .errors import ValidationError

BLOCK_DIM = 4


@dataclass(frozen=True)
class TaskSpec:
    name: str
    num_blocks: int
    block_dim: int = BLOCK_DIM
    low: float = -0.5
    high: float = 0.5

    @property
    def input_dim(self):
        return self.num_blocks * self.block_dim

    @property
    def pairs(self):
        return [(i, i + 1) for i in range(0, self.num_blocks, 2)]


HEQ = TaskSpec("heq", 4)
DLAW = TaskSpec("dlaw", 6)
TASKS = {"heq": HEQ, "dlaw": DLAW}


def get_task(task):
    if isinstance(task, TaskSpec):
        return task
    try:
        return TASKS[task]
    except KeyError:
        raise ValidationError(f"unknown task {task!r}; expected one of {sorted(TASKS)}") from None


def _pattern_label(task, eq):
    """Task output from the (n, num_pairs) matrix of pairwise equalities."""
    if task.name == "heq":
        return eq[:, 0] == eq[:, 1]
    return (eq[:, 0] & eq[:, 1]) | (eq[:, 1] & eq[:, 2])


def pair_equalities(task, x):
    task = get_task(task)
    blocks = np.asarray(x).reshape(-1, task.num_blocks, task.block_dim)
    return np.stack([np.all(blocks[:, i] == blocks[:, j], axis=1) for i, j in task.pairs], axis=1)


def task_labels(task, x):
    """Vectorised task function T over the rows of ``x`` as 0/1 labels."""
    task = get_task(task)
    return _pattern_label(task, pair_equalities(task, x)).astype(np.int64)


def task_function(task, x):
    return bool(task_labels(task, np.asarray(x)[None])[0])


def sample_inputs(task, n, rng, eq=None):
    """Draw ``n`` inputs; pair k is made equal where ``eq[:, k]`` is true.

    Without ``eq`` every pair is equal independently with probability 1/2.
    """
    task = get_task(task)
    blocks = rng.uniform(task.low, task.high, size=(n, task.num_blocks, task.block_dim))
    if eq is None:
        eq = rng.random((n, len(task.pairs))) < 0.5
    for k, (i, j) in enumerate(task.pairs):
        blocks[eq[:, k], j] = blocks[eq[:, k], i]
    return blocks.reshape(n, task.input_dim)


def _balanced_patterns(task, n, rng):
    want = rng.random(n) < 0.5
    eq = rng.random((n, len(task.pairs))) < 0.5
    todo = _pattern_label(task, eq) != want
    while todo.any():
        eq[todo] = rng.random((int(todo.sum()), len(task.pairs))) < 0.5
        todo = _pattern_label(task, eq) != want
    return eq


# -- algorithms ---------------------------------------------------------------
def _inputs(k):
    return [Node(f"x{i}", "input", dim=BLOCK_DIM) for i in range(1, k + 1)]


def _both_eq():
    return CausalModel("both-eq", tuple(_inputs(4) + [
        Node("x1==x2", "inner", ("x1", "x2"), "vec_eq"),
        Node("x3==x4", "inner", ("x3", "x4"), "vec_eq"),
        Node("y", "output", ("x1==x2", "x3==x4"), "bool_eq"),
    ]))


def _left_eq():
    return CausalModel("left-eq", tuple(_inputs(4) + [
        Node("x1==x2", "inner", ("x1", "x2"), "vec_eq"),
        Node("y", "output", ("x1==x2", "x3", "x4"), "bool_eq_vec_eq"),
    ]))


def _identity_first():
    return CausalModel("identity-first", tuple(_inputs(4) + [
        Node("id(x1)", "inner", ("x1",), "identity", dim=BLOCK_DIM),
        Node("y", "output", ("id(x1)", "x2", "x3", "x4"), "vec_eq_eq_vec_eq"),
    ]))


def _and_or_and():
    return CausalModel("and-or-and", tuple(_inputs(6) + [
        Node("(x1==x2)&(x3==x4)", "inner", ("x1", "x2", "x3", "x4"), "and_of_vec_eqs"),
        Node("(x3==x4)&(x5==x6)", "inner", ("x3", "x4", "x5", "x6"), "and_of_vec_eqs"),
        Node("y", "output", ("(x1==x2)&(x3==x4)", "(x3==x4)&(x5==x6)"), "or"),
    ]))


def _and_or():
    return CausalModel("and-or", tuple(_inputs(6) + [
        Node("x3==x4", "inner", ("x3", "x4"), "vec_eq"),
        Node("(x1==x2)|(x5==x6)", "inner", ("x1", "x2", "x5", "x6"), "or_of_vec_eqs"),
        Node("y", "output", ("x3==x4", "(x1==x2)|(x5==x6)"), "and"),
    ]))


_BUILDERS = {
    "both-eq": _both_eq,
    "left-eq": _left_eq,
    "identity-first": _identity_first,
    "and-or-and": _and_or_and,
    "and-or": _and_or,
}
ALGORITHM_TASK = {"both-eq": "heq", "left-eq": "heq", "identity-first": "heq",
                  "and-or-and": "dlaw", "and-or": "dlaw"}
_LIBRARY = {}


def algorithm_library():
    """All five candidate algorithms keyed by id."""
    if not _LIBRARY:
        _LIBRARY.update({k: b() for k, b in _BUILDERS.items()})
    return dict(_LIBRARY)


def get_algorithm(alg_id):
    if isinstance(alg_id, CausalModel):
        return alg_id
    lib = algorithm_library()
    if alg_id not in lib:
        raise ValidationError(f"unknown algorithm {alg_id!r}; expected one of {sorted(lib)}")
    return lib[alg_id]


def default_policy(alg_id):
    """Intervened-node sets and their probabilities for DAS datasets.

    Two-node algorithms intervene on either node or both with probability
    1/3 each; one-node algorithms always intervene on their inner node.
    """
    inner = tuple(get_algorithm(alg_id).inner)
    if len(inner) == 1:
        return ((inner, 1.0),)
    subsets = [(v,) for v in inner] + [inner]
    return tuple((s, 1.0 / len(subsets)) for s in subsets)


def counterfactual_training_policy(alg_id):
    """Quarter non-intervened, quarter per single node, quarter on both."""
    inner = tuple(get_algorithm(alg_id).inner)
    subsets = [()] + [(v,) for v in inner] + [inner]
    return tuple((s, 1.0 / len(subsets)) for s in subsets)


def _normalise_policy(alg, policy):
    if policy is None or policy == "default":
        return default_policy(alg.name)
    out = []
    for nodes, w in policy:
        nodes = tuple(nodes)
        bad = [v for v in nodes if v not in alg.inner]
        if bad:
            raise ValidationError(f"policy names nodes {bad} that are not inner nodes of {alg.name}")
        out.append((nodes, float(w)))
    total = sum(w for _, w in out)
    if not out or total <= 0:
        raise ValidationError("policy needs at least one subset with positive weight")
    return tuple((n, w / total) for n, w in out)


# -- datasets -----------------------------------------------------------------
@dataclass(frozen=True)
class BaseSample:
    x: np.ndarray
    y: int


@dataclass(frozen=True)
class InterchangeSample:
    x_base: np.ndarray
    sources: dict
    y_gold: int


@dataclass
class BaseDataset:
    task: str
    x: np.ndarray
    y: np.ndarray
    seed: int | None = None

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i):
        return BaseSample(self.x[i], int(self.y[i]))

    def subset(self, idx):
        return BaseDataset(self.task, self.x[idx], self.y[idx], self.seed)


@dataclass
class InterchangeDataset:
    """Column-oriented store of interchange samples.

    ``sources[:, k]`` is the source input for ``nodes[k]``; where
    ``mask[:, k]`` is false that node is not intervened and the stored source
    is a copy of the base input.
    """

    task: str
    algorithm: str
    nodes: tuple
    x_base: np.ndarray
    sources: np.ndarray
    mask: np.ndarray
    y_gold: np.ndarray
    y_base: np.ndarray
    seed: int | None = None
    policy: tuple = field(default=())

    def __len__(self):
        return len(self.y_gold)

    def __getitem__(self, i):
        srcs = {v: self.sources[i, k] for k, v in enumerate(self.nodes) if self.mask[i, k]}
        return InterchangeSample(self.x_base[i], srcs, int(self.y_gold[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx):
        return InterchangeDataset(self.task, self.algorithm, self.nodes, self.x_base[idx],
                                  self.sources[idx], self.mask[idx], self.y_gold[idx],
                                  self.y_base[idx], self.seed, self.policy)

    def node_counts(self):
        return {v: int(self.mask[:, k].sum()) for k, v in enumerate(self.nodes)}


def gen_base_dataset(task, n, seed):
    """``n`` labelled inputs.

    heq: each pair equality holds independently with probability 1/2.
    dlaw: equality patterns are rejection-sampled so the label is true half
    the time.
    """
    task = get_task(task)
    if n <= 0:
        raise ValidationError("dataset size must be positive")
    rng = np.random.default_rng(seed)
    eq = _balanced_patterns(task, n, rng) if task.name == "dlaw" else None
    x = sample_inputs(task, n, rng, eq)
    return BaseDataset(task.name, x, task_labels(task, x), seed)


def gold_label(alg, x_base, sources):
    """Algorithm output on ``x_base`` with each node in ``sources`` set to
    the value it takes on its own source input."""
    iv = {v: run_until(alg, src, None, v) for v, src in sources.items()}
    return int(bool(evaluate(alg, x_base, iv)[0]))


MAX_REJECTIONS = 1000


def gen_interchange_dataset(task, alg_id, n, seed, node_policy=None):
    """``n`` interchange samples for algorithm ``alg_id``.

    For dlaw, (base, sources) are re-drawn until the intervention changes
    the output in a target half of the samples (at most ``MAX_REJECTIONS``
    draws per sample, after which the last draw is kept).  Samples with an
    empty intervention cannot change the output and are not balanced.
    """
    task = get_task(task)
    alg = get_algorithm(alg_id)
    if alg.name not in ALGORITHM_TASK:
        raise ValidationError(f"unknown algorithm {alg.name!r}")
    if ALGORITHM_TASK[alg.name] != task.name:
        raise ValidationError(f"algorithm {alg.name!r} does not solve task {task.name!r}")
    if n <= 0:
        raise ValidationError("dataset size must be positive")
    policy = _normalise_policy(alg, node_policy)
    nodes = tuple(alg.inner)
    k = len(nodes)
    rng = np.random.default_rng(seed)
    choice = rng.choice(len(policy), size=n, p=[w for _, w in policy])
    mask = np.zeros((n, k), dtype=bool)
    for c, (subset, _) in enumerate(policy):
        for v in subset:
            mask[choice == c, nodes.index(v)] = True

    x_base = sample_inputs(task, n, rng)
    sources = sample_inputs(task, n * k, rng).reshape(n, k, task.input_dim)
    y_gold = np.empty(n, dtype=np.int64)
    balance = task.name == "dlaw"
    want_change = rng.random(n) < 0.5 if balance else None
    for i in range(n):
        for attempt in range(MAX_REJECTIONS):
            srcs = {v: sources[i, j] for j, v in enumerate(nodes) if mask[i, j]}
            y = gold_label(alg, x_base[i], srcs)
            if not balance or not srcs or (y != task_function(task, x_base[i])) == want_change[i]:
                break
            if attempt + 1 < MAX_REJECTIONS:
                x_base[i] = sample_inputs(task, 1, rng)[0]
                sources[i] = sample_inputs(task, k, rng)
        y_gold[i] = y
    sources[~mask] = np.broadcast_to(x_base[:, None, :], sources.shape)[~mask]
    return InterchangeDataset(task.name, alg.name, nodes, x_base, sources, mask, y_gold,
                              task_labels(task, x_base), seed, policy)


# -- persistence --------------------------------------------------------------
def save_dataset(path, ds, extra=None):
    """Write a dataset as one f64 row matrix plus a JSON manifest."""
    if isinstance(ds, BaseDataset):
        d = ds.x.shape[1]
        rows = np.column_stack([ds.x, ds.y])
        header = {"kind": "base", "task": ds.task, "n": len(ds), "seed": ds.seed,
                  "columns": {"x": [0, d], "y": [d, d + 1]}}
    else:
        n, k, d = ds.sources.shape
        rows = np.column_stack([ds.x_base, ds.sources.reshape(n, k * d), ds.mask, ds.y_gold, ds.y_base])
        header = {
            "kind": "interchange", "task": ds.task, "algorithm": ds.algorithm, "n": n,
            "seed": ds.seed, "nodes": list(ds.nodes),
            "policy": [[list(s), w] for s, w in ds.policy],
            "columns": {"x_base": [0, d], "sources": [d, d + k * d],
                        "mask": [d + k * d, d + k * d + k], "y_gold": [d + k * d + k, d + k * d + k + 1],
                        "y_base": [d + k * d + k + 1, d + k * d + k + 2]},
        }
    header.update(extra or {})
    save_bundle(Path(path), {"rows": rows}, header)


def load_dataset(path):
    arrays, h = load_bundle(Path(path))
    rows = arrays["rows"]

    def col(name):
        a, b = h["columns"][name]
        return rows[:, a:b]

    if h["kind"] == "base":
        return BaseDataset(h["task"], col("x").copy(), col("y")[:, 0].astype(np.int64), h["seed"])
    nodes = tuple(h["nodes"])
    x_base = col("x_base").copy()
    n, d = x_base.shape
    return InterchangeDataset(
        h["task"], h["algorithm"], nodes, x_base,
        col("sources").reshape(n, len(nodes), d).copy(), col("mask").astype(bool),
        col("y_gold")[:, 0].astype(np.int64), col("y_base")[:, 0].astype(np.int64),
        h["seed"], tuple((tuple(s), w) for s, w in h["policy"]),
    )
