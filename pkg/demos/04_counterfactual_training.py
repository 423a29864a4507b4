"""Distributive law: force And-Or-And into layer 2 by training with
interventions, then compare it with And-Or, which computes the same function."""

from causalign.alignment import IdentityMap, Partition
from causalign.das import eval_iia
from causalign.mlp import Mlp, MlpConfig, train_with_interventions
from causalign.tasks import counterfactual_training_policy, gen_base_dataset, gen_interchange_dataset

pol = counterfactual_training_policy("and-or-and")
tr = gen_interchange_dataset("dlaw", "and-or-and", 128000, 20, pol)
ev = gen_interchange_dataset("dlaw", "and-or-and", 10000, 21, pol)
cfg = MlpConfig(24, (24, 24, 24), seed=0)
dnn = Mlp.init(cfg)
part = Partition.contiguous(tr.nodes, 12, 24)
res = train_with_interventions(dnn, tr, 2, part.nodes, cfg, ev)
te = gen_base_dataset("dlaw", 10000, 3)
print("interchange acc while training", [round(h["eval_acc"], 3) for h in res.history])
print("task acc", dnn.accuracy(te.x, te.y))

# same neurons, two stories
for alg in ("and-or-and", "and-or"):
    ds = gen_interchange_dataset("dlaw", alg, 10000, 32)
    p = Partition.contiguous(ds.nodes, 12, 24)
    print(f"{alg:11s} identity IIA {eval_iia(dnn, IdentityMap(24), p, ds, 2).iia:.4f}")
