"""Exports crossing the component boundary: binary masks and feature batches.

Masks go out as 8-bit PNGs plus a manifest JSON in the reconstruction
pipeline's format (consumable by its segment-import command). Feature batches
go out as a CSV of unit vectors in pair-adjacent order with a sidecar JSON
carrying the NT-Xent loss this trainer computed, so the reconstruction side
can verify loss parity without importing any of this code.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .data import augmentation_pipeline, two_views
from .losses import nt_xent
from .model import ProjectionHead, UNet


def _load_gray(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode in ("RGB", "RGBA"):
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        elif im.mode == "L":
            arr = np.asarray(im, dtype=np.float32) / 255.0
        else:
            arr = np.asarray(im, dtype=np.float32) / 65535.0
    return np.clip(arr, 0.0, 1.0)


def _predict_full(model: UNet, arr: np.ndarray, multiple: int = 4) -> np.ndarray:
    """Run one full section through the net, padding to the stride multiple."""
    h, w = arr.shape
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    padded = np.pad(arr, ((0, ph), (0, pw)), mode="edge")
    with torch.no_grad():
        x = torch.from_numpy(padded).float()[None, None]
        prob = model(x)[0, 0].numpy()
    return prob[:h, :w]


def export_masks(
    model: UNet,
    section_manifest: Path | str,
    out_dir: Path | str,
    threshold: float = 0.5,
) -> Path:
    """Segment every ISH section in the manifest; returns the mask manifest path."""
    section_manifest = Path(section_manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = json.loads(section_manifest.read_text())
    model.eval()
    entries = []
    for sec in doc["sections"]:
        if sec["modality"] != "ish":
            continue
        arr = _load_gray(section_manifest.parent / sec["path"])
        prob = _predict_full(model, arr)
        bits = (prob > threshold).astype(np.uint8) * 255
        name = f"mask_{sec['index']:04d}.png"
        PILImage.fromarray(bits, mode="L").save(out_dir / name)
        entries.append({"index": sec["index"], "modality": "mask", "path": name})
    if not entries:
        raise ValueError(f"{section_manifest}: no ISH sections to segment")
    mask_doc = {
        "sections": entries,
        "spacing_um": doc["spacing_um"],
        "slice_thickness_um": doc["slice_thickness_um"],
    }
    if "gene" in doc:
        mask_doc["gene"] = doc["gene"]
    out_path = out_dir / "masks.manifest.json"
    out_path.write_text(json.dumps(mask_doc, indent=2) + "\n")
    return out_path


def export_feature_batch(
    model: UNet,
    projection: ProjectionHead,
    patches: torch.Tensor,
    temperature: float,
    csv_path: Path | str,
    seed: int = 0,
) -> float:
    """Write a pair-adjacent unit-vector CSV plus a JSON with the NT-Xent loss.

    ``patches`` is (N, 1, P, P); each patch contributes two augmented views,
    so the CSV holds 2N rows.
    """
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    augment = augmentation_pipeline(patches.shape[-1])
    model.eval()
    projection.eval()
    with torch.no_grad():
        v1, v2 = two_views(patches, augment)
        z1 = projection(model.bottleneck(v1))
        z2 = projection(model.bottleneck(v2))
        z = torch.stack([z1, z2], dim=1).reshape(-1, z1.shape[1])
        loss = float(nt_xent(z, temperature))
    vectors = z.numpy().astype(np.float64)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in vectors:
            writer.writerow([repr(float(v)) for v in row])
    meta = {"ntxent_loss": loss, "temperature": temperature, "num_pairs": len(patches)}
    csv_path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    return loss
