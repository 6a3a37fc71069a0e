"""Training loop: supervised BCE, joint BCE + NT-Xent, or contrastive pretraining.

Training is deterministic given the seed (CPU, workers=0): dataset
construction, the 7:3 split, loader shuffling, and the augmentation draws all
derive from it. Every epoch appends one JSON-serializable log row; pretraining
rows carry supervised_loss=None, which is how the "supervised loss never
computed" contract is asserted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Subset

from .data import augmentation_pipeline, two_views
from .losses import nt_xent
from .model import ProjectionHead, UNet, UNetConfig, build_model

MODES = ("supervised", "joint", "pretrain")


@dataclass
class TrainConfig:
    mode: str = "joint"
    epochs: int = 20
    batch_size: int = 16              # pairs per contrastive batch
    lr: float = 2e-3
    temperature: float = 0.5
    supervised_weight: float = 1.0
    contrastive_weight: float = 0.25
    val_fraction: float = 0.3         # 7:3 train/validation split
    seed: int = 0
    augment_strength: float = 1.0
    device: str = "cpu"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode != "supervised" and self.batch_size < 2:
            raise ValueError("contrastive training needs batch size >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class TrainResult:
    model: UNet
    projection: ProjectionHead
    log: list
    best_val_dice: float


def dice_score(pred: torch.Tensor, target: torch.Tensor, threshold: float = 0.5) -> float:
    a = pred > threshold
    b = target > 0.5
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def contrastive_step(
    patches: torch.Tensor,
    model: UNet,
    projection: ProjectionHead,
    temperature: float,
    augment=None,
) -> torch.Tensor:
    """One NT-Xent evaluation: two augmented views per patch, bottleneck
    features through the projection head, pair-adjacent loss over 2N samples.
    """
    if patches.shape[0] < 2:
        raise ValueError("contrastive step needs a batch of at least 2 patches")
    if augment is None:
        augment = augmentation_pipeline(patches.shape[-1])
    v1, v2 = two_views(patches, augment)
    z1 = projection(model.bottleneck(v1))
    z2 = projection(model.bottleneck(v2))
    z = torch.stack([z1, z2], dim=1).reshape(-1, z1.shape[1])
    return nt_xent(z, temperature)


def _split(dataset, val_fraction: float, seed: int):
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return Subset(dataset, order[n_val:].tolist()), Subset(dataset, order[:n_val].tolist())


def train(
    dataset,
    cfg: TrainConfig,
    unet_cfg: UNetConfig | None = None,
    model: UNet | None = None,
    projection: ProjectionHead | None = None,
    log_path: Path | str | None = None,
) -> TrainResult:
    """Train in the configured mode; pass model/projection to continue training."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    unet_cfg = unet_cfg or UNetConfig()
    if unet_cfg.skip_connections and cfg.mode != "supervised":
        raise ValueError("skip connections leak past the bottleneck in contrastive modes")
    torch.manual_seed(cfg.seed)
    if model is None or projection is None:
        model, projection = build_model(unet_cfg)
    device = torch.device(cfg.device)
    model.to(device)
    projection.to(device)

    train_set, val_set = _split(dataset, cfg.val_fraction, cfg.seed)
    loader_gen = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(
        train_set,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=loader_gen,
        num_workers=0,
        drop_last=cfg.mode != "supervised",
    )
    val_loader = DataLoader(val_set, batch_size=cfg.batch_size, num_workers=0)
    augment = augmentation_pipeline(unet_cfg.patch_size, cfg.augment_strength)
    params = list(model.parameters()) + list(projection.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    bce = torch.nn.BCELoss()

    log: list = []
    best_val = 0.0
    for epoch in range(cfg.epochs):
        model.train()
        projection.train()
        sup_sum, con_sum, batches = 0.0, 0.0, 0
        for images, masks in loader:
            images, masks = images.to(device), masks.to(device)
            optimizer.zero_grad()
            loss = images.new_zeros(())
            sup_val = None
            con_val = None
            if cfg.mode == "supervised":
                sup = bce(model(images), masks)
                loss = cfg.supervised_weight * sup
                sup_val = float(sup.detach())
            else:
                v1, v2 = two_views(images, augment)
                z1 = projection(model.bottleneck(v1))
                z2 = projection(model.bottleneck(v2))
                z = torch.stack([z1, z2], dim=1).reshape(-1, z1.shape[1])
                con = nt_xent(z, cfg.temperature)
                con_val = float(con.detach())
                loss = cfg.contrastive_weight * con
                if cfg.mode == "joint":
                    # both views share the patch's mask: photometric augments only
                    sup = 0.5 * (bce(model(v1), masks) + bce(model(v2), masks))
                    loss = loss + cfg.supervised_weight * sup
                    sup_val = float(sup.detach())
            loss.backward()
            optimizer.step()
            sup_sum += sup_val or 0.0
            con_sum += con_val or 0.0
            batches += 1

        model.eval()
        with torch.no_grad():
            scores = [
                dice_score(model(img.to(device)), m.to(device))
                for img, m in val_loader
            ]
        val_dice = float(np.mean(scores)) if scores else float("nan")
        best_val = max(best_val, val_dice) if np.isfinite(val_dice) else best_val
        log.append(
            {
                "epoch": epoch,
                "mode": cfg.mode,
                "supervised_loss": None if cfg.mode == "pretrain" else sup_sum / max(batches, 1),
                "contrastive_loss": None if cfg.mode == "supervised" else con_sum / max(batches, 1),
                "val_dice": val_dice,
            }
        )

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with log_path.open("w") as fh:
            for row in log:
                fh.write(json.dumps(row) + "\n")
    return TrainResult(model, projection, log, best_val)


def pretrain_then_finetune(
    dataset,
    pretrain_epochs: int,
    finetune_cfg: TrainConfig,
    unet_cfg: UNetConfig | None = None,
    unlabelled=None,
    log_path: Path | str | None = None,
) -> TrainResult:
    """Contrastive-only pretraining on the unlabelled pool, then supervised tuning."""
    unet_cfg = unet_cfg or UNetConfig()
    pre_cfg = TrainConfig(
        mode="pretrain",
        epochs=pretrain_epochs,
        batch_size=finetune_cfg.batch_size,
        lr=finetune_cfg.lr,
        temperature=finetune_cfg.temperature,
        seed=finetune_cfg.seed,
        augment_strength=finetune_cfg.augment_strength,
        device=finetune_cfg.device,
    )
    pre = train(unlabelled if unlabelled is not None else dataset, pre_cfg, unet_cfg)
    result = train(
        dataset, finetune_cfg, unet_cfg, model=pre.model, projection=pre.projection, log_path=log_path
    )
    return TrainResult(result.model, result.projection, pre.log + result.log, result.best_val_dice)


def save_checkpoint(result: TrainResult, unet_cfg: UNetConfig, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model": result.model.state_dict(),
            "projection": result.projection.state_dict(),
            "config": unet_cfg.__dict__,
        },
        path,
    )


def load_checkpoint(path: Path | str) -> tuple[UNet, ProjectionHead, UNetConfig]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = UNetConfig(**blob["config"])
    model, projection = build_model(cfg)
    model.load_state_dict(blob["model"])
    projection.load_state_dict(blob["projection"])
    model.eval()
    projection.eval()
    return model, projection, cfg
