"""
Synthetic longitudinal records
==============================

Generate a small cohort, look at which label slots are observed, then fill
the expert scores and derive per-day change labels.
"""
import numpy as np

from mtmetric.data_model import prepare
from mtmetric.synthgen import SynthConfig, generate_with_truth

config = SynthConfig(individuals=6, steps=30, seed=4)
ds, truth = generate_with_truth(config)
print(len(ds), "records,", ds.d, "features,", ds.n_tasks, "label slots")

# Expert scores are only read every 21 days, so most slots start out empty.
for t, task in enumerate(ds.schema):
    print(f"{task.name:14s} {task.kind:18s} observed {ds.present[:, t].mean():.2f}")

# Nearest-observation filling, then forward/backward differences per day.
filled = prepare(ds)
cols = [t for t, task in enumerate(ds.schema) if task.name.startswith("expert_0")]
# pick an individual whose day-21 reading differs from the day-0 one
first = next(idx for idx in filled.groups()
             if filled.labels[idx[0], cols[0]] != filled.labels[idx[21], cols[0]])
# days 10 and 11 straddle the switch from the day-0 reading to the day-21 one
print("\nindividual", filled.individual_ids[first[0]])
print("day  expert_0  fwd      bwd")
for i in first[8:14]:
    y = filled.labels[i, cols]
    print(f"{filled.timestamps[i]:3d}  {y[0]:7.2f}  {y[1]:+.4f}  {y[2]:+.4f}")

# Without noise the observed score is the quantised true score.
obs = ds.present[:, cols[0]]
gap = np.abs(ds.labels[obs, cols[0]] - truth.true_score[obs, 0])
print("\nmax |observed - true| =", gap.max().round(3), "(at most half a 0.25 step)")
