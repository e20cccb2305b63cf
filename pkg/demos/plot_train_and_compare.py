"""
Training on synthetic pairs
===========================

Fit a narrow model on a handful of synthetic pairs, then score it and the
early-fusion baseline with the same parameter budget.
"""

import tempfile
from pathlib import Path

from hpcfnet import (EarlyFusionNet, HPCFNet, ModelConfig, TrainConfig, evaluate, load_split,
                     matched_baseline_config, synth_dataset, train)

root = Path(tempfile.mkdtemp())
manifest = synth_dataset(root / "data", seed=11, count=16, size=(32, 32))
pairs = load_split(manifest, "train")

full = ModelConfig(width_scale=1 / 16, input_size=(32, 32), seed=0)
base = matched_baseline_config(full)
print("parameters:", HPCFNet(full).num_parameters(), "vs", EarlyFusionNet(base).num_parameters())

###############################################################################
# Every fifth epoch prints the mean weighted loss and the training-set F-score.

config = TrainConfig(epochs=30, seed=0, eval_every=5)
result = train(config, full, manifest, root / "run",
               echo=lambda rec: "f_score" in rec and print(
                   f"epoch {rec['epoch']:2d}  loss {rec['loss']:.4f}  F {rec['f_score']:.3f}"))

###############################################################################
# The per-image report lists precision, recall and F-score, then the pooled row.

print("\n".join(evaluate(result.model, pairs).table().splitlines()[-4:]))
baseline = train(TrainConfig(epochs=30, seed=0, eval_every=0), base, manifest).model
print("baseline F", round(evaluate(baseline, pairs).f_score, 3))
