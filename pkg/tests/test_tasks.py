import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalign.causal_model import evaluate, run_until
from causalign.errors import ValidationError
from causalign.tasks import (DLAW, HEQ, algorithm_library, counterfactual_training_policy,
                             gen_base_dataset, gen_interchange_dataset, load_dataset,
                             pair_equalities, sample_inputs, save_dataset, task_labels)

ALGS_BY_TASK = {"heq": ["both-eq", "left-eq", "identity-first"], "dlaw": ["and-or-and", "and-or"]}


def binomial_band(n, p=0.5, z=4.0):
    half = z * np.sqrt(p * (1 - p) / n)
    return p - half, p + half


def test_specs():
    assert HEQ.input_dim == 16 and DLAW.input_dim == 24 and HEQ.block_dim == 4


def test_heq_equalities_balanced():
    ds = gen_base_dataset("heq", 10000, 0)
    eq = pair_equalities("heq", ds.x)
    for k in range(2):
        assert 0.47 <= eq[:, k].mean() <= 0.53
    assert np.all((ds.x >= -0.5) & (ds.x <= 0.5))


def test_dlaw_label_balanced():
    ds = gen_base_dataset("dlaw", 10000, 0)
    assert 0.47 <= ds.y.mean() <= 0.53


def test_base_dataset_deterministic():
    a, b = gen_base_dataset("heq", 500, 3), gen_base_dataset("heq", 500, 3)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(a.x, gen_base_dataset("heq", 500, 4).x)


def test_base_labels_match_algorithms():
    for task, algs in ALGS_BY_TASK.items():
        ds = gen_base_dataset(task, 2000, 1)
        for a in algs:
            alg = algorithm_library()[a]
            got = np.array([int(bool(evaluate(alg, x)[0])) for x in ds.x])
            np.testing.assert_array_equal(got, ds.y)


def test_and_or_and_equals_and_or_on_random_inputs():
    lib = algorithm_library()
    x = sample_inputs("dlaw", 10000, np.random.default_rng(0))
    a = [evaluate(lib["and-or-and"], r)[0] for r in x]
    b = [evaluate(lib["and-or"], r)[0] for r in x]
    assert a == b


def test_dlaw_truth_table_example():
    x = sample_inputs("dlaw", 1, np.random.default_rng(1), eq=np.array([[False, True, False]]))[0]
    lib = algorithm_library()
    assert evaluate(lib["and-or-and"], x)[0] is False
    assert evaluate(lib["and-or"], x)[0] is False


def test_identity_first_has_vector_node():
    alg = algorithm_library()["identity-first"]
    x = np.arange(16.0)
    np.testing.assert_array_equal(run_until(alg, x, None, "id(x1)"), x[:4])


def test_node_policy_frequencies():
    ds = gen_interchange_dataset("heq", "both-eq", 30000, 0)
    both = ds.mask.all(axis=1).mean()
    only = [(ds.mask[:, k] & ~ds.mask[:, 1 - k]).mean() for k in range(2)]
    for f in [both, *only]:
        assert abs(f - 1 / 3) <= 0.02


def test_single_node_algorithms_always_intervene():
    for a in ("left-eq", "identity-first"):
        ds = gen_interchange_dataset("heq", a, 500, 0)
        assert ds.mask.shape[1] == 1 and ds.mask.all()


def test_gold_labels_recomputed_from_traces():
    for task, algs in ALGS_BY_TASK.items():
        for a in algs:
            alg = algorithm_library()[a]
            ds = gen_interchange_dataset(task, a, 300, 5)
            for s in ds:
                iv = {v: evaluate(alg, src)[1][v] for v, src in s.sources.items()}
                assert int(bool(evaluate(alg, s.x_base, iv)[0])) == s.y_gold


def test_null_intervention_keeps_base_label():
    # a source that agrees with the base on the node leaves the output alone
    ds = gen_interchange_dataset("heq", "left-eq", 2000, 2)
    eq_src = pair_equalities("heq", ds.sources[:, 0])[:, 0]
    eq_base = pair_equalities("heq", ds.x_base)[:, 0]
    same = eq_src == eq_base
    assert same.any()
    np.testing.assert_array_equal(ds.y_gold[same], ds.y_base[same])


def test_dlaw_intervention_changes_output_half_the_time():
    ds = gen_interchange_dataset("dlaw", "and-or-and", 6000, 0)
    lo, hi = binomial_band(6000)
    assert lo <= (ds.y_gold != ds.y_base).mean() <= hi


def test_unknown_and_mismatched_algorithms():
    with pytest.raises(ValidationError):
        gen_interchange_dataset("heq", "nope", 10, 0)
    with pytest.raises(ValidationError):
        gen_interchange_dataset("heq", "and-or", 10, 0)
    with pytest.raises(ValidationError):
        gen_base_dataset("other", 10, 0)


def test_counterfactual_policy_quarters():
    pol = counterfactual_training_policy("and-or-and")
    assert len(pol) == 4 and all(w == 0.25 for _, w in pol)
    ds = gen_interchange_dataset("dlaw", "and-or-and", 4000, 0, pol)
    lo, hi = binomial_band(4000, 0.25)
    assert lo <= (~ds.mask.any(axis=1)).mean() <= hi


def test_dataset_files_roundtrip(tmp_path):
    ds = gen_interchange_dataset("heq", "both-eq", 200, 9)
    save_dataset(tmp_path / "d", ds)
    back = load_dataset(tmp_path / "d")
    for f in ("x_base", "sources", "mask", "y_gold", "y_base"):
        np.testing.assert_array_equal(getattr(back, f), getattr(ds, f))
    assert back.nodes == ds.nodes and back.policy == ds.policy
    base = gen_base_dataset("dlaw", 100, 1)
    save_dataset(tmp_path / "b", base)
    np.testing.assert_array_equal(load_dataset(tmp_path / "b").x, base.x)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(sorted(algorithm_library())), st.integers(0, 2**31))
def test_every_algorithm_solves_its_task(a, seed):
    task = "heq" if a in ALGS_BY_TASK["heq"] else "dlaw"
    x = sample_inputs(task, 50, np.random.default_rng(seed))
    alg = algorithm_library()[a]
    got = np.array([int(bool(evaluate(alg, r)[0])) for r in x])
    np.testing.assert_array_equal(got, task_labels(task, x))


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2**31))
def test_interchange_generation_is_pure(n, seed):
    a = gen_interchange_dataset("dlaw", "and-or", n, seed)
    b = gen_interchange_dataset("dlaw", "and-or", n, seed)
    np.testing.assert_array_equal(a.sources, b.sources)
    np.testing.assert_array_equal(a.y_gold, b.y_gold)
