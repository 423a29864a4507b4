"""Finite-scale lookup-table alignment that makes any algorithm fit any
network that meets a handful of preconditions.

The construction works at one layer of an MLP and a finite input list X:

* every clean hidden state ``h(x)`` is sent to a latent vector whose node
  coordinates carry the algorithm's node values (plus a per-input tag so each
  coordinate is injective) and whose unused coordinates carry the input index;
* every latent that only arises from an interchange is sent back to a fresh
  hidden state, not reachable from X, on which the rest of the network
  outputs whatever the algorithm says the intervened output should be.

Interchange accuracy over all enumerated interventions is then exactly one.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .causal_model import evaluate, run_until
from .das import IiaReport
from .errors import AssumptionError, BudgetError, ConfigError, ConstructionError, ValidationError
from .tasks import gen_base_dataset

TAG_EPS = 2.0 ** -30
DEFAULT_BUDGET = 10 ** 6


def _key(v):
    return np.ascontiguousarray(v, dtype=np.float64).tobytes()


@dataclass
class FiniteWorld:
    X: np.ndarray
    dnn: object
    alg: object
    layer: int
    coords: dict | None = None
    depth: int = 1
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if len(self.X) < 2:
            raise ValidationError("the input set needs at least two elements")
        if len(np.unique(self.X, axis=0)) != len(self.X):
            raise ValidationError("the input set contains duplicates")
        if not 1 <= self.layer <= self.dnn.num_layers:
            raise ConfigError(f"layer {self.layer} out of range 1..{self.dnn.num_layers}")
        if self.depth < 0:
            raise ConfigError("depth must be nonnegative")
        inner = list(self.alg.inner)
        if self.coords is None:
            self.coords = {v: k for k, v in enumerate(inner)}
        self.coords = {v: int(c) for v, c in self.coords.items()}
        if sorted(self.coords) != sorted(inner):
            raise ConfigError(f"coordinates must be assigned to exactly the inner nodes {inner}")
        d = self.width
        cs = list(self.coords.values())
        if len(set(cs)) != len(cs) or min(cs) < 0 or max(cs) >= d:
            raise ConfigError("node coordinates must be distinct and inside the layer")
        if len(cs) >= d:
            raise ConfigError("at least one coordinate of the layer must stay unused")
        for v in inner:
            clash = self.alg.ancestors(v).intersection(inner)
            if clash:
                raise ConfigError(f"node {v!r} depends on {sorted(clash)}; all aligned nodes share one layer")

    @property
    def width(self):
        return self.dnn.layer_dim(self.layer)

    @property
    def nodes(self):
        return list(self.alg.inner)

    @property
    def unused(self):
        used = set(self.coords.values())
        return [i for i in range(self.width) if i not in used]

    def hidden(self, layer=None):
        return self.dnn.hidden_states(self.X)[(layer or self.layer) - 1]


# -- interventions ------------------------------------------------------------
@dataclass(frozen=True)
class Intervention:
    """``sources[j]`` is the index into X feeding node j, or None."""

    sources: tuple

    def assignment(self, world):
        return {v: s for v, s in zip(world.nodes, self.sources) if s is not None}


def enumerate_interventions(world, depth=None):
    """All input-restricted interventions up to ``depth`` at the world's layer.

    Depth-1 values come from clean runs on X.  A depth-k value comes from a
    run under a depth-(k-1) intervention; because aligned nodes never depend
    on one another, such a run leaves the node's value unchanged, so the set
    stops growing after depth 1.  This is checked, not assumed.
    """
    depth = world.depth if depth is None else depth
    nodes, m = world.nodes, len(world.X)
    if depth == 0:
        return [Intervention((None,) * len(nodes))]
    total = (m + 1) ** len(nodes)
    if total * m > world.budget:
        raise BudgetError(f"{total} interventions x {m} bases exceeds the budget of {world.budget}")
    out = [Intervention(s) for s in itertools.product([None, *range(m)], repeat=len(nodes))]
    if depth > 1:
        clean = {(v, i): run_until(world.alg, world.X[i], None, v) for v in nodes for i in range(m)}
        for _ in range(depth - 1):
            for iv in out:
                vals = {v: clean[v, s] for v, s in iv.assignment(world).items()}
                for v in nodes:
                    if v in vals:
                        continue
                    for i in range(m):
                        got = run_until(world.alg, world.X[i], vals, v)
                        if not np.array_equal(got, clean[v, i]):
                            raise ConstructionError(f"node {v!r} changes under a deeper intervention")
    return out


def intervention_values(world, iv):
    return {v: run_until(world.alg, world.X[s], None, v) for v, s in iv.assignment(world).items()}


def gold_output(world, base, iv):
    return int(bool(evaluate(world.alg, world.X[base], intervention_values(world, iv))[0]))


# -- assumptions --------------------------------------------------------------
def realize_class(dnn, layer, cls, restarts=32, steps=2000, lr=0.05, target=1.0, seed=0):
    """Hidden state at ``layer`` whose output has strict argmax ``cls``.

    Gradient ascent on ``logit_cls - max other logit`` from random starts,
    all restarts batched as rows.  Returns None if no restart succeeds.
    """
    frozen = dnn.frozen()
    d = dnn.layer_dim(layer)
    rng = np.random.default_rng([seed, cls])
    h = ad.Tensor(rng.normal(size=(restarts, d)), requires_grad=True)
    n_cls = frozen.weights[-1].shape[1]
    penalty = np.zeros((restarts, n_cls))
    penalty[:, cls] = -1e30
    onehot = np.zeros((n_cls, 1))
    onehot[cls] = 1.0
    best = None
    for _ in range(steps):
        logits = frozen.logits_from_layer(h, layer)
        margin = _margin(logits, onehot, penalty)
        m = margin.data
        i = int(np.argmax(m))
        if m[i] > 0 and (best is None or m[i] > best[0]):
            best = (m[i], h.data[i].copy())
        if m[i] >= target:
            break
        h.grad = None
        margin.sum().backward()
        h.data = h.data + lr * h.grad
    return None if best is None else best[1]


def _margin(logits, onehot, penalty):
    return ad.matmul(logits, onehot)[:, 0] - ad.rowmax(logits + penalty)


@dataclass
class AssumptionReport:
    injective: dict
    surjective: dict
    task_correct: bool
    realizers: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self):
        return all(self.injective.values()) and all(self.surjective.values()) and self.task_correct

    def to_dict(self):
        return {"injective": {str(k): v for k, v in self.injective.items()},
                "surjective": {str(k): v for k, v in self.surjective.items()},
                "task_correct": self.task_correct, "ok": self.ok}


def check_assumptions(world, raise_on_failure=True, search=None):
    """Injectivity at every layer, strict surjectivity per class, and task
    correctness on X.  Raises AssumptionError naming the first failure."""
    search = search or {}
    states = world.dnn.hidden_states(world.X)
    injective = {l + 1: len({_key(h) for h in hs}) == len(world.X) for l, hs in enumerate(states)}
    n_cls = world.dnn.weights[-1].shape[1]
    realizers, surjective = {}, {}
    for c in range(n_cls):
        h = realize_class(world.dnn, world.layer, c, **search)
        surjective[c] = h is not None
        if h is not None:
            realizers[c] = h
    want = np.array([int(bool(evaluate(world.alg, x)[0])) for x in world.X])
    task_correct = bool(np.array_equal(world.dnn.predict(world.X), want))
    rep = AssumptionReport(injective, surjective, task_correct, realizers)
    if raise_on_failure:
        bad = [l for l, ok in injective.items() if not ok]
        if bad:
            raise AssumptionError("injectivity", f"hidden states collide at layers {bad}")
        bad = [c for c, ok in surjective.items() if not ok]
        if bad:
            raise AssumptionError("strict surjectivity", f"no hidden state found for classes {bad}")
        if not task_correct:
            raise AssumptionError("task correctness", "the network misclassifies part of the input set")
    return rep


# -- construction -------------------------------------------------------------
@dataclass
class LookupMap:
    """Bit-exact bijection between hidden states and latents at one layer."""

    forward_table: dict
    inverse_table: dict
    clean_keys: frozenset
    classes: dict = field(default_factory=dict)

    def forward(self, h):
        return self.forward_table[_key(h)]

    def inverse(self, z):
        return self.inverse_table[_key(z)]

    def __len__(self):
        return len(self.forward_table)

    def copy(self):
        return LookupMap(dict(self.forward_table), dict(self.inverse_table), self.clean_keys, dict(self.classes))


def _codes(world):
    """First-appearance integer code of each node value over X."""
    out = {}
    for v in world.nodes:
        seen, codes = [], []
        for x in world.X:
            val = run_until(world.alg, x, None, v)
            for k, s in enumerate(seen):
                if np.array_equal(s, val):
                    break
            else:
                k = len(seen)
                seen.append(val)
            if np.ndim(val) == 0 and isinstance(val, (bool, np.bool_)):
                k = int(val)
            codes.append(k)
        out[v] = codes
    return out


def encode_clean(world):
    """Latent vectors for every clean hidden state, row i for X[i]."""
    m = len(world.X)
    if m * TAG_EPS >= 0.5:
        raise BudgetError("input set too large for the per-input tag")
    z = np.zeros((m, world.width))
    codes = _codes(world)
    idx = np.arange(m, dtype=np.float64)
    for v, c in world.coords.items():
        z[:, c] = np.asarray(codes[v], dtype=np.float64) + idx * TAG_EPS
    for u in world.unused:
        z[:, u] = idx
    return z


def interchange_latent(world, z_clean, base, iv):
    z = z_clean[base].copy()
    for v, s in iv.assignment(world).items():
        c = world.coords[v]
        z[c] = z_clean[s, c]
    return z


def construct_map(world, report=None, perturb=1e-3, max_tries=1000):
    """Build the forward and inverse tables for all enumerated interventions."""
    report = report or check_assumptions(world)
    h_clean = world.hidden()
    z_clean = encode_clean(world)
    fwd, inv = {}, {}
    for h, z in zip(h_clean, z_clean):
        fwd[_key(h)], inv[_key(z)] = z, h.copy()
    clean_keys = frozenset(fwd)
    rng = np.random.default_rng(0)
    used = set(clean_keys)
    classes = {}
    for iv in enumerate_interventions(world):
        for base in range(len(world.X)):
            z = interchange_latent(world, z_clean, base, iv)
            kz = _key(z)
            if kz in inv:
                continue
            y = gold_output(world, base, iv)
            h = _fresh_state(world, report.realizers[y], y, used, rng, perturb, max_tries)
            used.add(_key(h))
            fwd[_key(h)], inv[kz] = z, h
            classes[kz] = y
    return LookupMap(fwd, inv, clean_keys, classes)


def _fresh_state(world, seed_state, y, used, rng, scale, tries):
    for _ in range(tries):
        h = seed_state + scale * rng.standard_normal(seed_state.shape)
        lg = world.dnn.numpy_logits_from_layer(h[None], world.layer)[0]
        if _key(h) not in used and _strict(lg, y):
            return h
    raise ConstructionError(f"could not place a fresh hidden state for class {y}")


def _strict(logits, y):
    others = np.delete(logits, y)
    return bool(logits[y] > others.max())


# -- verification -------------------------------------------------------------
def verify_perfect_iia(world, lmap, depth=None):
    """Exhaustive interchange accuracy of the lookup map."""
    h_clean = world.hidden()
    z_clean = np.stack([lmap.forward(h) for h in h_clean])
    ivs = enumerate_interventions(world, depth)
    hits = total = 0
    counts = {v: 0 for v in world.nodes}
    for iv in ivs:
        for v in iv.assignment(world):
            counts[v] += len(world.X)
        for base in range(len(world.X)):
            z = interchange_latent(world, z_clean, base, iv)
            try:
                h = lmap.inverse(z)
            except KeyError:
                total += 1
                continue
            lg = world.dnn.numpy_logits_from_layer(h[None], world.layer)[0]
            hits += _strict(lg, gold_output(world, base, iv))
            total += 1
    want = np.array([int(bool(evaluate(world.alg, x)[0])) for x in world.X])
    plain = float(np.mean(world.dnn.predict(world.X) == want))
    return IiaReport(iia=hits / total, n=total, node_counts=counts, dnn_plain_accuracy=plain)


def mutate_inverse(world, lmap, report):
    """Copy of ``lmap`` with one intervention-only entry sent to a state of
    the wrong class."""
    bad = lmap.copy()
    for kz, y in lmap.classes.items():
        other = [c for c in report.realizers if c != y]
        if other:
            bad.inverse_table[kz] = report.realizers[other[0]].copy()
            return bad, kz
    raise ConstructionError("no intervention-only entry available to mutate")


def bijection_holds(lmap):
    if len(lmap.forward_table) != len(lmap.inverse_table):
        return False
    for kh, z in lmap.forward_table.items():
        if _key(lmap.inverse_table[_key(z)]) != kh:
            return False
    return True


def dimension_injective(lmap):
    zs = np.stack([lmap.forward_table[k] for k in lmap.clean_keys])
    return all(len(np.unique(zs[:, j])) == len(zs) for j in range(zs.shape[1]))


def pick_inputs(task, dnn, n, seed, alg=None):
    """``n`` distinct inputs on which the network agrees with the task."""
    ds = gen_base_dataset(task, max(64, 8 * n), seed)
    ok = dnn.predict(ds.x) == ds.y
    if alg is not None:
        ok &= np.array([int(bool(evaluate(alg, x)[0])) for x in ds.x]) == ds.y
    x = ds.x[ok][:n]
    if len(x) < n:
        raise ConstructionError(f"only {len(x)} correctly classified inputs found")
    return x


def run_demo(world, search=None):
    """Checks, construction, verification and the mutation control as one report."""
    rep = check_assumptions(world, search=search)
    lmap = construct_map(world, rep)
    iia = verify_perfect_iia(world, lmap)
    bad, _ = mutate_inverse(world, lmap, rep)
    mutated = verify_perfect_iia(world, bad)
    return {
        "assumptions": rep.to_dict(),
        "n_inputs": len(world.X),
        "layer": world.layer,
        "depth": world.depth,
        "n_interventions": len(enumerate_interventions(world)),
        "n_cases": iia.n,
        "forward_table": len(lmap.forward_table),
        "inverse_table": len(lmap.inverse_table),
        "bijection": bijection_holds(lmap),
        "dimension_injective": dimension_injective(lmap),
        "iia": iia.iia,
        "plain_accuracy": iia.dnn_plain_accuracy,
        "mutated_iia": mutated.iia,
    }
