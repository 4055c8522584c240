"""Affordance heatmap toolkit: a fully gradient-checked toy stack for
text-prompted affordance grounding — tensor core, surrogate backbone,
learnable-query adaption head, staged trainer, cascade map filter and
KLD/SIM/NSS evaluation."""

__version__ = "0.1.0"

from .adaption import AdaptionConfig, AdaptionModule
from .backbone import BackboneConfig, tokenize
from .config import RunConfig, default_run_config
from .dataset import SampleRecord, build_prompt, generate_synthetic_dataset
from .losses import LossConfig, bce_loss, combined_mask_loss, dice_loss, weighted_focal_loss
from .metrics import evaluate_split, kld, nss, sim
from .model import AffordanceModel
from .postproc import PostprocConfig, postprocess
from .tensor import Tensor, grad_check
from .trainer import StageConfig, adamw_step, clip_gradients, lr_at, run_pipeline, run_stage

__all__ = [
    "AdaptionConfig", "AdaptionModule", "AffordanceModel", "BackboneConfig",
    "LossConfig", "PostprocConfig", "RunConfig", "SampleRecord", "StageConfig",
    "Tensor", "adamw_step", "bce_loss", "build_prompt", "clip_gradients",
    "combined_mask_loss", "default_run_config", "dice_loss", "evaluate_split",
    "generate_synthetic_dataset", "grad_check", "kld", "lr_at", "nss",
    "postprocess", "run_pipeline", "run_stage", "sim", "tokenize",
    "weighted_focal_loss",
]
