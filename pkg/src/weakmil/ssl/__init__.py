"""MoCo-v2 contrastive learning of patch features."""

from .augment import AugmentationConfig, augment, augment_pair
from .encoder import EncoderArch, encode, encode_numpy, init_encoder, prepare_input
from .moco import (
    EncoderState,
    MoCoEncoder,
    MoCoHyper,
    NegativeQueue,
    PatchRef,
    info_nce,
    load_encoder,
    momentum_update,
    per_slide_quota,
    sample_ssl_dataset,
    save_encoder,
    train_ssl,
)

__all__ = [
    "AugmentationConfig",
    "EncoderArch",
    "EncoderState",
    "MoCoEncoder",
    "MoCoHyper",
    "NegativeQueue",
    "PatchRef",
    "augment",
    "augment_pair",
    "encode",
    "encode_numpy",
    "info_nce",
    "init_encoder",
    "load_encoder",
    "momentum_update",
    "per_slide_quota",
    "prepare_input",
    "sample_ssl_dataset",
    "save_encoder",
    "train_ssl",
]
