from .cnn import CnnSmall
from .core import (
    ModelHandle,
    TrainHyper,
    build_model,
    build_victim,
    capture_activations,
    evaluate,
    get_layer,
    load_checkpoint,
    logits,
    predict,
    save_checkpoint,
    set_determinism,
    to_nchw,
    train_clean,
    train_supervised,
)
from .ran import AttentionModule, RanLite
from .vit import Mhsa, PatchOps, VitLite, mhsa_forward

__all__ = [
    "AttentionModule", "CnnSmall", "Mhsa", "ModelHandle", "PatchOps", "RanLite",
    "TrainHyper", "VitLite", "build_model", "build_victim", "capture_activations",
    "evaluate", "get_layer", "load_checkpoint", "logits", "mhsa_forward", "predict",
    "save_checkpoint", "set_determinism", "to_nchw", "train_clean", "train_supervised",
]
