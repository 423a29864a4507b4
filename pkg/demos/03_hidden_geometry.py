"""Are hidden states injective, and how close do they get?"""

from causalign.diagnostics import collision_probe, distance_csv, min_distance_table
from causalign.mlp import Mlp, MlpConfig, train
from causalign.tasks import gen_base_dataset

cfg = MlpConfig(16, (16, 16, 16), seed=0)
dnn = Mlp.init(cfg)
train(dnn, gen_base_dataset("heq", 262144, 1), cfg, gen_base_dataset("heq", 10000, 2))

print("collisions", collision_probe(dnn, 100000, 0))

# exact minima over all x reference pairs, split by task label and by the
# values of the two equality variables
reports = [min_distance_table(dnn, 20000, 1000, seed) for seed in (0, 1, 2)]
print(distance_csv(reports))
