"""
Sensitivity to the match count and the angle
============================================

Sweep the number of label slots two records must share (n) and the angle of
the angular constraint. A larger n leaves fewer anchor-positive pairs; past
the number of matchable slots no pair survives and the cell is marked.
"""
from mtmetric.data_model import prepare
from mtmetric.evaluation import sweep
from mtmetric.miner import MinerConfig
from mtmetric.synthgen import SynthConfig, generate
from mtmetric.trainer import TrainConfig

ds = prepare(generate(SynthConfig(individuals=20, steps=15, seed=2, gradients_in_match=False)))
base = TrainConfig(epochs=5, l=4, seed=0, miner=MinerConfig(n=3))

result = sweep(ds, base, table2_n=3)
print(result.table1_csv())
print(result.table2_csv())
print(result.table1_csv("precision_at_5"))
