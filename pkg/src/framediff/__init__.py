"""Desk-scale frame-autoregressive video diffusion transformer.

Clean context frames condition the denoising of one noisy frame at a
time under two causal attention variants ("of" keeps clean-to-clean
cross-frame attention, "of2" removes it), with parameter-free rotation
time conditioning, KV-cache incremental inference, linear probing of
frozen features, and exact attention-complexity accounting.
"""

from .data import BounceParams, LatentVideo, gen_bounce, gen_dataset, read_dataset, write_dataset
from .frame_attention import (
    AttentionMask,
    FlopCounter,
    FrameLayout,
    KVCache,
    MaskVariant,
    attention,
    build_mask,
    frame_pair_count,
)
from .model import FrameDiT, ModelConfig, param_count, patchify, rotate_condition, unpatchify
from .probe import ProbeReport, extract_features, probe_sweep, train_probe
from .sampler import SamplerConfig, cfg_combine, denoise_frame, rollout
from .schedule import (
    DiffusionPair,
    NoiseSchedule,
    Parameterization,
    companion_of,
    convert_prediction,
    denoise_step,
    forward_diffuse,
    recover,
    theta_of,
)
from .tensor import Tensor, grad_check
from .trainer import TrainConfig, TrainState, adam_update, fit, fit_paired, train_step

__version__ = "0.1.0"

__all__ = [
    "AttentionMask", "BounceParams", "DiffusionPair", "FlopCounter", "FrameDiT",
    "FrameLayout", "KVCache", "LatentVideo", "MaskVariant", "ModelConfig",
    "NoiseSchedule", "Parameterization", "ProbeReport", "SamplerConfig",
    "Tensor", "TrainConfig", "TrainState", "adam_update", "attention",
    "build_mask", "cfg_combine", "companion_of", "convert_prediction",
    "denoise_frame", "denoise_step", "extract_features", "fit",
    "forward_diffuse", "frame_pair_count", "gen_bounce", "gen_dataset",
    "grad_check", "param_count", "patchify", "probe_sweep", "read_dataset",
    "recover", "rollout", "rotate_condition", "theta_of", "train_probe", "train_step", "fit_paired",
    "unpatchify", "write_dataset",
]
