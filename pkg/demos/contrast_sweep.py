"""
Recovery as a function of block contrast
========================================

Fix in-block affinity at 0.3 and raise the out-block affinity.
"""
import time

import numpy as np

from stance.cluster import cosine_distances, hdbscan, percentile_filter
from stance.compose import compose, run_sample
from stance.ingest import to_epoch
from stance.synth import PlantedConfig, adjusted_rand_index, generate, standardized_mean_difference


def one(seed, out, consistency=1.0, pct=50):
    cfg = PlantedConfig(seed=seed, n_users=1000, out_affinity=out, stance_consistency=consistency)
    events, truth = generate(cfg)
    res = [run_sample(s["sample_id"], events[s["sample_id"]], to_epoch(s["start"]), to_epoch(s["end"]), seed=seed)
           for s in cfg.samples]
    common = compose(res, seed=seed).common
    st = np.array([truth.stances[u] for u in common.user_ids])
    smd = standardized_mean_difference(common.scores.scores[:, 0], st)
    f = percentile_filter(common.scores, pct)
    a = hdbscan(cosine_distances(f), 20)
    keep = a.labels >= 0
    t = np.array([truth.stances[u] for u in f.user_ids])
    ari = adjusted_rand_index(a.labels[keep], t[keep]) if keep.any() else 0.0
    return ari, smd


t0 = time.time()
print("out_aff  mean_ARI  mean_SMD")
for out in (0.005, 0.05, 0.1, 0.15, 0.3):
    r = np.array([one(s, out) for s in range(5)])
    print(f"{out:7.3f}  {r[:, 0].mean():8.3f}  {r[:, 1].mean():8.2f}")

# users who switch sides between samples blur the common axis
for c in (1.0, 0.75, 0.5):
    r = np.array([one(s, 0.005, consistency=c) for s in range(3)])
    print(f"stance_consistency {c}: PC1 SMD {r[:, 1].mean():.2f}")
print("%.1fs" % (time.time() - t0))
