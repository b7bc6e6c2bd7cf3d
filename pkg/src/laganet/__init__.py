"""Local-aware global attention network for re-identification, at desk scale."""

from .attention import CAM, SamRpe, build_reindex, cam_forward, rel_pos_term
from .config import AugConfig, Config, EvalConfig, LossConfig, ModelConfig, SynthSpec, TrainConfig, load_config
from .estimator import LAGAEmbedder, check_images
from .evaluation import cmc_at_k, cosine_distance, evaluate, mean_ap, rank_all
from .losses import batch_hard_triplet, smoothed_targets, total_loss, xent_loss
from .model import LAGANet
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "AugConfig", "CAM", "Config", "EvalConfig", "LAGAEmbedder", "LAGANet", "LossConfig", "ModelConfig",
    "SamRpe", "SynthSpec", "Tensor", "TrainConfig", "batch_hard_triplet", "build_reindex", "cam_forward",
    "check_images", "cmc_at_k", "cosine_distance", "evaluate", "grad_check", "load_config", "mean_ap",
    "no_grad", "rank_all", "rel_pos_term", "smoothed_targets", "total_loss", "xent_loss",
]
