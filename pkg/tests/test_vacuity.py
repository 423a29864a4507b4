import itertools

import numpy as np
import pytest

from causalign.causal_model import run_until
from causalign.errors import AssumptionError, BudgetError, ConfigError, ValidationError
from causalign.mlp import Mlp, MlpConfig
from causalign.tasks import algorithm_library
from causalign.vacuity import (TAG_EPS, FiniteWorld, _key, bijection_holds, check_assumptions,
                               construct_map, dimension_injective, enumerate_interventions,
                               encode_clean, mutate_inverse, pick_inputs, run_demo, verify_perfect_iia)

ALGS = algorithm_library()


@pytest.fixture(scope="module")
def world8(heq_mlp):
    return FiniteWorld(pick_inputs("heq", heq_mlp, 8, 0), heq_mlp, ALGS["both-eq"], 1)


@pytest.fixture(scope="module")
def built(world8):
    rep = check_assumptions(world8)
    return rep, construct_map(world8, rep)


def test_enumeration_counts(heq_mlp):
    x = pick_inputs("heq", heq_mlp, 4, 1)
    one = FiniteWorld(x, heq_mlp, ALGS["left-eq"], 1)
    assert len(enumerate_interventions(one)) == 5
    two = FiniteWorld(x, heq_mlp, ALGS["both-eq"], 1)
    ivs = enumerate_interventions(two)
    # recount: each node is either left alone or fed by one of the 4 inputs
    brute = {tuple(c) for c in itertools.product([None, 0, 1, 2, 3], repeat=2)}
    assert len(ivs) == len(brute) == 25
    assert {iv.sources for iv in ivs} == brute
    assert [iv.sources for iv in enumerate_interventions(two, depth=0)] == [(None, None)]
    assert len(enumerate_interventions(two, depth=3)) == 25


def test_budget_and_world_validation(heq_mlp):
    x = pick_inputs("heq", heq_mlp, 8, 2)
    with pytest.raises(BudgetError):
        enumerate_interventions(FiniteWorld(x, heq_mlp, ALGS["both-eq"], 1, budget=100))
    with pytest.raises(ValidationError):
        FiniteWorld(x[:1], heq_mlp, ALGS["both-eq"], 1)
    with pytest.raises(ValidationError):
        FiniteWorld(np.vstack([x, x[:1]]), heq_mlp, ALGS["both-eq"], 1)
    with pytest.raises(ConfigError):
        FiniteWorld(x, heq_mlp, ALGS["both-eq"], 1, coords={"x1==x2": 3, "x3==x4": 3})
    with pytest.raises(ConfigError):
        FiniteWorld(x, heq_mlp, ALGS["both-eq"], 4)


def test_assumptions_pass_on_trained_network(world8):
    rep = check_assumptions(world8)
    assert rep.ok and all(rep.injective.values()) and set(rep.surjective) == {0, 1}


def test_zero_network_fails_injectivity(world8):
    m = Mlp.init(MlpConfig(16, (16, 16, 16)))
    for p in m.parameters():
        p.data[...] = 0.0
    w = FiniteWorld(world8.X, m, world8.alg, 1)
    with pytest.raises(AssumptionError) as e:
        check_assumptions(w)
    assert e.value.assumption == "injectivity"


def test_untrained_network_fails_task_check(world8):
    m = Mlp.init(MlpConfig(16, (16, 16, 16), seed=11))
    rep = check_assumptions(FiniteWorld(world8.X, m, world8.alg, 1), raise_on_failure=False)
    assert not rep.task_correct
    with pytest.raises(AssumptionError):
        check_assumptions(FiniteWorld(world8.X, m, world8.alg, 1))


def test_perfect_iia_and_mutation(world8, built):
    rep, lmap = built
    res = verify_perfect_iia(world8, lmap)
    assert res.iia == 1.0 and res.n == 81 * 8
    assert verify_perfect_iia(world8, lmap, depth=0).iia == 1.0 == res.dnn_plain_accuracy
    bad, _ = mutate_inverse(world8, lmap, rep)
    assert verify_perfect_iia(world8, bad).iia < 1.0


def test_clean_round_trip_keeps_prediction(world8, built):
    _, lmap = built
    for x, h in zip(world8.X, world8.hidden()):
        back = lmap.inverse(lmap.forward(h))
        assert _key(back) == _key(h)
    want = [run_until(world8.alg, x, None, "y") for x in world8.X]
    assert list(world8.dnn.predict(world8.X)) == [int(bool(v)) for v in want]


def test_node_coordinates_decode_to_trace(world8, built):
    _, lmap = built
    for x, h in zip(world8.X, world8.hidden()):
        z = lmap.forward(h)
        for v, c in world8.coords.items():
            assert (z[c] > 0.5) == bool(run_until(world8.alg, x, None, v))


def test_table_invariants(world8, built):
    _, lmap = built
    assert bijection_holds(lmap) and dimension_injective(lmap)
    assert len(lmap.forward_table) == len(lmap.inverse_table)
    clean = {_key(h) for h in world8.hidden()}
    fresh = [h for kz, h in lmap.inverse_table.items() if kz in lmap.classes]
    assert fresh and all(_key(h) not in clean for h in fresh)


def test_tags_keep_coordinates_injective(world8):
    z = encode_clean(world8)
    for c in world8.coords.values():
        assert len(np.unique(z[:, c])) == len(z)
        assert np.all(np.abs(z[:, c] - np.round(z[:, c])) < len(z) * TAG_EPS)


def test_other_algorithms_and_tasks(heq_mlp):
    w = FiniteWorld(pick_inputs("heq", heq_mlp, 6, 3), heq_mlp, ALGS["identity-first"], 2)
    assert run_demo(w)["iia"] == 1.0
    rng = Mlp.init(MlpConfig(24, (24, 24, 24), seed=0))
    # an untrained net qualifies on inputs it happens to classify correctly
    x = pick_inputs("dlaw", rng, 4, 0, ALGS["and-or-and"])
    rep = run_demo(FiniteWorld(x, rng, ALGS["and-or-and"], 2))
    assert rep["iia"] == 1.0 and rep["mutated_iia"] < 1.0


def test_nested_nodes_rejected(heq_mlp):
    from causalign.causal_model import CausalModel
    alg = ALGS["both-eq"]
    assert isinstance(alg, CausalModel)
    x = pick_inputs("heq", heq_mlp, 4, 4)
    with pytest.raises(ConfigError):
        FiniteWorld(x, heq_mlp, alg, 1, coords={"x1==x2": 0, "x3==x4": 1, "y": 2})
