"""A lookup-table alignment map that gives perfect interchange accuracy for
any algorithm, as long as the network is injective, can output every class,
and gets the inputs right."""

import json

from causalign.errors import AssumptionError
from causalign.mlp import Mlp, MlpConfig, train
from causalign.tasks import gen_base_dataset, get_algorithm
from causalign.vacuity import FiniteWorld, construct_map, check_assumptions, pick_inputs, run_demo

cfg = MlpConfig(16, (16, 16, 16), seed=0)
dnn = Mlp.init(cfg)
train(dnn, gen_base_dataset("heq", 262144, 1), cfg, gen_base_dataset("heq", 10000, 2))

# eight inputs the network classifies correctly
X = pick_inputs("heq", dnn, 8, 0)

# the real algorithm, a wrong-looking one, and one with a vector-valued node
for alg_id in ("both-eq", "left-eq", "identity-first"):
    world = FiniteWorld(X, dnn, get_algorithm(alg_id), layer=1)
    rep = run_demo(world)
    print(alg_id, json.dumps({k: rep[k] for k in ("n_interventions", "n_cases", "iia", "mutated_iia")}))

# peek inside: latent for the first input, node coordinates first
world = FiniteWorld(X, dnn, get_algorithm("both-eq"), layer=2)
lmap = construct_map(world)
h0 = world.hidden()[0]
print("coords", world.coords, "latent", lmap.forward(h0)[:4])
print("table sizes", len(lmap.forward_table), len(lmap.inverse_table))

# an all-zero network maps every input to the same state: refused
zero = Mlp.init(cfg)
for p in zero.parameters():
    p.data[...] = 0.0
try:
    check_assumptions(FiniteWorld(X, zero, get_algorithm("both-eq"), 1))
except AssumptionError as e:
    print("refused:", e)
