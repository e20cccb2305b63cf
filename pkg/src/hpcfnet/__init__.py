"""Siamese change-detection network with hierarchical paired channel fusion, on a numpy autodiff core."""
from .data import ImagePair, SynthKnobs, augment, load_split, read_manifest, sliding_crop, synth_dataset
from .metrics import aggregate, confusion, evaluate, f_score
from .model import EarlyFusionNet, HPCFNet, ModelConfig, build_model, matched_baseline_config, predict_change_map
from .tensor import Tensor
from .training import TrainConfig, train

__all__ = [
    "EarlyFusionNet", "HPCFNet", "ImagePair", "ModelConfig", "SynthKnobs", "Tensor", "TrainConfig",
    "aggregate", "augment", "build_model", "confusion", "evaluate", "f_score", "load_split",
    "matched_baseline_config", "predict_change_map", "read_manifest", "sliding_crop", "synth_dataset", "train",
]
