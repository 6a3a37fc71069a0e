"""Synthetic expression patches and the SimCLR-style augmentation pair.

Patches mimic the hard part of real ISH sections: expression blobs over
textured tissue with strong per-patch contrast and brightness variation. The
augmentations (ColorJitter, RandomGrayscale, GaussianBlur) are photometric
only, so both views of a patch share its label mask.
"""

from __future__ import annotations

import numpy as np
import torch
from torch.utils.data import Dataset
from torchvision import transforms


class BlobPatchDataset(Dataset):
    """Deterministic synthetic patches: (image (1,P,P), mask (1,P,P)) float32."""

    def __init__(self, n_patches: int, patch_size: int = 64, seed: int = 0):
        if n_patches < 1:
            raise ValueError("empty dataset")
        self.patch_size = patch_size
        rng = np.random.default_rng(seed)
        self.images = []
        self.masks = []
        p = patch_size
        ys, xs = np.mgrid[0:p, 0:p].astype(np.float32)
        for _ in range(n_patches):
            img = np.zeros((p, p), np.float32)
            # tissue texture: a few broad dim blobs
            for _ in range(rng.integers(2, 5)):
                cy, cx = rng.uniform(0, p, 2)
                s = rng.uniform(p / 4, p / 2)
                img += rng.uniform(0.1, 0.25) * np.exp(
                    -(((ys - cy) / s) ** 2 + ((xs - cx) / s) ** 2)
                )
            # expression: compact bright blobs define the mask
            expr = np.zeros((p, p), np.float32)
            for _ in range(rng.integers(1, 4)):
                cy, cx = rng.uniform(0.2 * p, 0.8 * p, 2)
                sy, sx = rng.uniform(p / 16, p / 6, 2)
                expr += np.exp(-(((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2))
            mask = expr > 0.45
            contrast = rng.uniform(0.6, 1.4)
            brightness = rng.uniform(-0.08, 0.12)
            img = np.clip((img + 0.8 * expr) * contrast + brightness, 0.0, 1.0)
            img += rng.normal(0.0, 0.01, (p, p)).astype(np.float32)
            self.images.append(np.clip(img, 0.0, 1.0))
            self.masks.append(mask.astype(np.float32))

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, idx: int):
        img = torch.from_numpy(self.images[idx]).unsqueeze(0)
        mask = torch.from_numpy(self.masks[idx]).unsqueeze(0)
        return img, mask


def augmentation_pipeline(patch_size: int, strength: float = 1.0):
    """ColorJitter + RandomGrayscale + GaussianBlur, applied in 3-channel space."""
    kernel = max(3, int(0.1 * patch_size) // 2 * 2 + 1)
    return transforms.Compose(
        [
            transforms.ColorJitter(
                brightness=0.4 * strength,
                contrast=0.4 * strength,
                saturation=0.2 * strength,
                hue=0.05 * strength,
            ),
            transforms.RandomGrayscale(p=0.2),
            transforms.GaussianBlur(kernel_size=kernel, sigma=(0.1, 1.5)),
        ]
    )


def two_views(batch: torch.Tensor, augment) -> tuple[torch.Tensor, torch.Tensor]:
    """Two independently augmented views of a (B,1,P,P) batch, back in 1 channel."""
    rgb = batch.repeat(1, 3, 1, 1)
    v1 = augment(rgb).mean(dim=1, keepdim=True).clamp(0.0, 1.0)
    v2 = augment(rgb).mean(dim=1, keepdim=True).clamp(0.0, 1.0)
    return v1, v2
