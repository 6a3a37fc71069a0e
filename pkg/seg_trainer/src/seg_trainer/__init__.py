"""Semi-supervised U-Net trainer for gene-expression segmentation."""

from .data import BlobPatchDataset, augmentation_pipeline, two_views
from .export import export_feature_batch, export_masks
from .losses import nt_xent
from .model import ProjectionHead, UNet, UNetConfig, build_model
from .train import (
    TrainConfig,
    TrainResult,
    contrastive_step,
    dice_score,
    load_checkpoint,
    pretrain_then_finetune,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
