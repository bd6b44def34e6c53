"""
A single stance: what the pipeline finds when there is nothing to find
=====================================================================
"""
import numpy as np

from stance.cluster import cosine_distances, hdbscan, percentile_filter
from stance.compose import compose, run_sample
from stance.ingest import to_epoch
from stance.synth import PlantedConfig, generate, standardized_mean_difference

cfg = PlantedConfig(seed=0, k_stances=1)
events, truth = generate(cfg)
res = [run_sample(s["sample_id"], events[s["sample_id"]], to_epoch(s["start"]), to_epoch(s["end"]))
       for s in cfg.samples]
common = compose(res).common
X = common.scores.scores
print("matched", X.shape[0], "common PCs", X.shape[1])

# no PC should separate an arbitrary half of the users
half = np.random.default_rng(0).permutation(X.shape[0]) % 2
print("SMD per PC over a random split:", [round(float(standardized_mean_difference(X[:, c], half)), 3) for c in range(X.shape[1])])

# at the default cut nothing clusters; a looser cut picks up low-activity
# users whose binary scores share a handful of directions
for pct in (90, 75, 50):
    a = hdbscan(cosine_distances(percentile_filter(common.scores, pct)), 20)
    print(f"percentile {pct}: clusters {a.n_clusters} sizes {a.sizes.tolist()}")
