"""
Learning a multi-task metric
============================

Train a 4-dimensional embedding of 16 features on synthetic data and check
what it learned: neighbourhoods that share labels, a score read off one
coordinate, and the direction of change between visits.
"""
import numpy as np

from mtmetric.data_model import prepare, split_by_individual
from mtmetric.evaluation import (change_eval, evaluate, knn_precision, shuffled_precision)
from mtmetric.metric import LossConfig
from mtmetric.miner import MinerConfig
from mtmetric.synthgen import SynthConfig, generate_with_truth
from mtmetric.trainer import TrainConfig, resolved_loss_config, train

ds, truth = generate_with_truth(SynthConfig(seed=0, gradients_in_match=False))
ds = prepare(ds)

config = TrainConfig(epochs=30, lr=0.05, l=4, seed=0,
                     loss=LossConfig(lambda_mse=1.0), miner=MinerConfig(n=3))
result = train(ds, config)
losses = result.history.losses()
print("epoch loss:", " ".join(f"{v:.3f}" for v in losses[::5]), "...", f"{losses[-1]:.3f}")

_, test = split_by_individual(ds, config.train_fraction, config.seed)
test_truth = truth.align(test)

# Retrieval: how often are the 5 nearest neighbours positives at n = 3?
E = result.params.transform(test.features)
p = knn_precision(E, test, 5, 3)
chance = shuffled_precision(E, test, 5, 3, seed=0)
print(f"precision@5 {p:.3f} vs shuffled labels {chance:.3f}")

# Full report, with head errors measured against the noiseless scores.
report = evaluate(result, test, truth=test_truth)
for name, stats in report.heads.items():
    print(f"head {name:14s} mse {stats['mse']:.4f}")

# Change between consecutive visits, predicted from the expert_0 head.
head = resolved_loss_config(config, ds.schema).heads(config.l)[3]
ce = change_eval(result.params, test, 3, head, test_truth.true_score[:, 0])
print(f"test change mse {ce.mse:.2e} over {len(ce.pairs)} pairs")

# Few test individuals drift, so count drifting pairs over the whole cohort.
ce_all = change_eval(result.params, ds, 3, head, truth.true_score[:, 0])
drift = truth.drift_sign[ce_all.pairs[:, 0]]
moving = drift != 0
agree = np.mean(np.sign(ce_all.predicted[moving]) == drift[moving])
print(f"drift direction recovered on {agree:.0%} of {moving.sum()} drifting pairs")
