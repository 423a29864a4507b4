"""Hidden-state collision counts and minimal pairwise distances."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .causal_model import evaluate
from .errors import ValidationError
from .tasks import gen_base_dataset, get_algorithm

PAIR_CLASSES = ("all", "same_output", "not_same_output", "same_variables", "not_same_variables")


def layer_names(dnn):
    return ["input"] + [f"layer{l}" for l in range(1, dnn.num_layers + 1)]


def _states(dnn, x):
    return [np.asarray(x, dtype=np.float64)] + dnn.hidden_states(x)


def count_collisions(rows):
    """Number of unordered pairs of identical rows (bit-exact)."""
    _, counts = np.unique(np.ascontiguousarray(rows), axis=0, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def collision_probe(dnn, n_samples, seed, task="heq"):
    """Duplicate hidden states among distinct sampled inputs, per layer."""
    if n_samples < 2:
        raise ValidationError("need at least two samples")
    x = gen_base_dataset(task, n_samples, seed).x
    x = np.unique(x, axis=0)
    return {name: count_collisions(h) for name, h in zip(layer_names(dnn), _states(dnn, x))}


def pair_distance(a, b):
    """Euclidean distance, summing squared differences in coordinate order."""
    s = 0.0
    for k in range(len(a)):
        s += (a[k] - b[k]) ** 2
    return float(np.sqrt(s))


def _tile_sq(a, r):
    s = np.zeros((len(a), len(r)))
    for k in range(a.shape[1]):
        s += (a[:, k, None] - r[None, :, k]) ** 2
    return s


@dataclass
class DistanceReport:
    layers: list
    table: dict
    pair_counts: dict
    witnesses: dict = field(default_factory=dict)
    n_all: int = 0
    n_ref: int = 0
    seed: int | None = None

    def to_dict(self):
        return {"layers": self.layers, "table": self.table, "pair_counts": self.pair_counts,
                "n_all": self.n_all, "n_ref": self.n_ref, "seed": self.seed}


def pair_labels(task, alg_id, x):
    """Output label and tuple of inner-node values per input, from traces."""
    alg = get_algorithm(alg_id)
    ys, vs = [], []
    for row in x:
        out, trace = evaluate(alg, row)
        ys.append(int(bool(out)))
        vs.append(tuple(bool(trace[v]) if np.ndim(trace[v]) == 0 else trace[v].tobytes() for v in alg.inner))
    codes = {v: i for i, v in enumerate(dict.fromkeys(vs))}
    return np.array(ys), np.array([codes[v] for v in vs])


def min_distances(states, y, var, n_ref, tile=1024):
    """Exact minima over pairs (i, r) with r < n_ref and i != r, by class.

    Tiles locate the minimising pair per class; the reported distance is
    recomputed for that pair with :func:`pair_distance`.
    """
    n = len(states)
    best = {c: (np.inf, None) for c in PAIR_CLASSES}
    counts = dict.fromkeys(PAIR_CLASSES, 0)
    for r0 in range(0, n_ref, tile):
        r1 = min(r0 + tile, n_ref)
        R = states[r0:r1]
        for a0 in range(0, n, tile):
            a1 = min(a0 + tile, n)
            d2 = _tile_sq(states[a0:a1], R)
            ai = np.arange(a0, a1)[:, None]
            ri = np.arange(r0, r1)[None, :]
            valid = ai != ri
            so = y[a0:a1, None] == y[None, r0:r1]
            sv = var[a0:a1, None] == var[None, r0:r1]
            masks = {"all": valid, "same_output": valid & so, "not_same_output": valid & ~so,
                     "same_variables": valid & sv, "not_same_variables": valid & ~sv}
            for c, m in masks.items():
                counts[c] += int(m.sum())
                if not m.any():
                    continue
                masked = np.where(m, d2, np.inf)
                flat = int(np.argmin(masked))
                i, j = divmod(flat, masked.shape[1])
                if masked[i, j] < best[c][0]:
                    best[c] = (masked[i, j], (a0 + i, r0 + j))
    table, wit = {}, {}
    for c, (_, pair) in best.items():
        table[c] = float("nan") if pair is None else pair_distance(states[pair[0]], states[pair[1]])
        wit[c] = pair
    return table, counts, wit


def min_distance_table(dnn, n_all, n_ref, seed, task="heq", alg="both-eq", tile=1024):
    if not 2 <= n_ref <= n_all:
        raise ValidationError("need 2 <= n_ref <= n_all")
    x = gen_base_dataset(task, n_all, seed).x
    y, var = pair_labels(task, alg, x)
    layers = layer_names(dnn)
    table, counts, wit = {}, {}, {}
    for name, h in zip(layers, _states(dnn, x)):
        table[name], counts[name], wit[name] = min_distances(h, y, var, n_ref, tile)
    return DistanceReport(layers, table, counts, wit, n_all, n_ref, seed)


def distance_csv(reports):
    """Rows = layers, columns = pair classes, cells = mean +- sd over reports."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", *PAIR_CLASSES])
    for name in reports[0].layers:
        row = [name]
        for c in PAIR_CLASSES:
            v = np.array([r.table[name][c] for r in reports])
            sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            row.append(f"{v.mean():.6g} ± {sd:.2g}")
        w.writerow(row)
    return buf.getvalue()
