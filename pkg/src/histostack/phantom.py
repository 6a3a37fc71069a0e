"""Synthetic ground-truth generator for pipeline testing.

Builds a smooth 3D "brain" (ellipsoidal shell plus anisotropic blobs, enough
texture for NMI to be well peaked), slices it into blockface / backlit / ISH
stacks with known per-slice perturbations, and emits landmarks, expression
masks, and the inverse (re-aligning) transforms. Everything is a pure function
of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_image import (
    Image2D,
    Image3D,
    ManifestEntry,
    SegmentationMask2D,
    StackManifest,
    save_mask,
    save_section,
    save_volume,
)
from .landmark_eval import LandmarkSet, save_landmarks_csv
from .transforms import (
    Affine,
    DisplacementField,
    TransformChain,
    compose,
    invert_chain,
    save_chain,
    warp_image,
)

_EXPR_THRESHOLD = 0.4


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple = (64, 64, 32)            # (w, h, d), every axis >= 32
    n_blobs: int = 30
    max_translation_px: float = 8.0
    max_rotation_deg: float = 6.0
    max_shear: float = 0.0
    warp_amplitude_px: float = 0.0        # smooth sinusoidal warp, 0 = rigid only
    warp_period_px: float = 32.0
    ish_extra_fraction: float = 0.5       # ISH jitter relative to the BL ranges
    ish_gamma: float = 1.4
    contrast_jitter: float = 0.25
    expression_blobs: int = 3
    n_landmarks: int = 10
    genes: tuple = ("gene0",)
    spacing_um: tuple = (10.0, 10.0)
    slice_thickness_um: float = 20.0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 32:
            raise ValueError("phantom dims must be >= 32 per axis")
        for name in (
            "max_translation_px",
            "max_rotation_deg",
            "max_shear",
            "warp_amplitude_px",
            "contrast_jitter",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.warp_period_px <= 0:
            raise ValueError("warp period must be > 0")
        if self.n_landmarks < 1 or not self.genes:
            raise ValueError("need at least one landmark and one gene")


@dataclass(frozen=True)
class PhantomManifests:
    blockface: StackManifest
    backlit: StackManifest
    ish: dict
    masks: dict


@dataclass(frozen=True)
class PhantomTruth:
    volume: Image3D
    bl_truth_chains: list           # re-align BL_j onto the true slice
    ish_truth_chains: dict          # gene -> list of chains for ISH_j
    landmarks: LandmarkSet
    masks: dict                     # gene -> list[SegmentationMask2D]


def _make_volume(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    w, h, d = spec.dims
    z = (np.arange(d) - (d - 1) / 2) / (d / 2)
    y = (np.arange(h) - (h - 1) / 2) / (h / 2)
    x = (np.arange(w) - (w - 1) / 2) / (w / 2)
    Z, Y, X = np.meshgrid(z, y, x, indexing="ij")
    # tissue clear of x/y borders (room for perturbations) but spanning all
    # slices; the long z radius keeps adjacent sections similar, like real
    # serial sections cut at 10-100 um
    radii = (0.72, 0.68, 2.0)
    r = np.sqrt((X / radii[0]) ** 2 + (Y / radii[1]) ** 2 + (Z / radii[2]) ** 2)
    vol = 0.45 * np.exp(-(((r - 0.75) / 0.12) ** 2))
    # elongated structures running the length of the stack anchor in-plane
    # rotation the way tracts and ventricles do in real sections
    for _ in range(4):
        c = rng.uniform(-0.4, 0.4, size=2) * (radii[0], radii[1])
        th = rng.uniform(0, np.pi)
        ca, sa = np.cos(th), np.sin(th)
        uu = (X - c[0]) * ca + (Y - c[1]) * sa
        vv = -(X - c[0]) * sa + (Y - c[1]) * ca
        sig_u, sig_v = rng.uniform(0.18, 0.35), rng.uniform(0.03, 0.07)
        vol += rng.uniform(0.35, 0.6) * np.exp(-0.5 * ((uu / sig_u) ** 2 + (vv / sig_v) ** 2))
    for _ in range(spec.n_blobs):
        c = rng.uniform(-0.45, 0.45, size=3) * (radii[0], radii[1], 1.0)
        sig_xy = rng.uniform(0.08, 0.2, size=2)
        sig_z = rng.uniform(0.3, 0.6)
        amp = rng.uniform(0.25, 0.7)
        vol += amp * np.exp(
            -0.5 * (((X - c[0]) / sig_xy[0]) ** 2 + ((Y - c[1]) / sig_xy[1]) ** 2 + ((Z - c[2]) / sig_z) ** 2)
        )
    vol *= r <= 1.0
    vol = np.clip(vol / max(vol.max(), 1e-9) * 0.92, 0.0, 1.0)
    return vol


def _expression_volume(spec: PhantomSpec, rng: np.random.Generator, support: np.ndarray) -> np.ndarray:
    w, h, d = spec.dims
    z = (np.arange(d) - (d - 1) / 2) / (d / 2)
    y = (np.arange(h) - (h - 1) / 2) / (h / 2)
    x = (np.arange(w) - (w - 1) / 2) / (w / 2)
    Z, Y, X = np.meshgrid(z, y, x, indexing="ij")
    expr = np.zeros((d, h, w))
    for _ in range(spec.expression_blobs):
        c = rng.uniform(-0.4, 0.4, size=3) * (0.72, 0.68, 0.9)
        sig = rng.uniform(0.08, 0.16, size=2)
        sig_z = rng.uniform(0.2, 0.4)
        expr += np.exp(
            -0.5 * (((X - c[0]) / sig[0]) ** 2 + ((Y - c[1]) / sig[1]) ** 2 + ((Z - c[2]) / sig_z) ** 2)
        )
    expr = np.clip(expr, 0.0, 1.0) * support
    return expr


def _rand_affine(spec: PhantomSpec, rng: np.random.Generator, center: np.ndarray, fraction: float) -> Affine:
    theta = np.deg2rad(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg)) * fraction
    shear = rng.uniform(-spec.max_shear, spec.max_shear) * fraction
    t_px = rng.uniform(-spec.max_translation_px, spec.max_translation_px, size=2) * fraction
    t_um = t_px * np.asarray(spec.spacing_um)
    c, s = np.cos(theta), np.sin(theta)
    lin = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]])
    return Affine(lin, t_um, center)


def _rand_warp(spec: PhantomSpec, rng: np.random.Generator, shape: tuple) -> DisplacementField | None:
    if spec.warp_amplitude_px == 0:
        return None
    sx, sy = spec.spacing_um
    amp = spec.warp_amplitude_px * min(sx, sy)
    period = spec.warp_period_px * min(sx, sy)
    ph = rng.uniform(0, 2 * np.pi, size=4)
    h, w = shape
    ys, xs = np.meshgrid(np.arange(h) * sy, np.arange(w) * sx, indexing="ij")
    k = 2 * np.pi / period
    ux = amp * np.sin(k * xs + ph[0]) * np.sin(k * ys + ph[1])
    uy = amp * np.sin(k * xs + ph[2]) * np.sin(k * ys + ph[3])
    return DisplacementField(np.stack([ux, uy], axis=-1), (sx, sy))


def _pick_landmarks(
    spec: PhantomSpec, rng: np.random.Generator, vol: np.ndarray
) -> LandmarkSet:
    w, h, d = spec.dims
    mx = max(int(0.18 * min(w, h)), 4)
    interior = np.zeros_like(vol, dtype=bool)
    interior[2 : d - 2, mx : h - mx, mx : w - mx] = True
    zz, yy, xx = np.nonzero((vol > 0.45) & interior)
    if len(zz) < spec.n_landmarks:
        raise ValueError("degenerate spec: not enough bright tissue for landmarks")
    pick = rng.choice(len(zz), size=spec.n_landmarks, replace=False)
    sx, sy = spec.spacing_um
    entries = []
    for i, p in enumerate(sorted(pick)):
        pt = np.array([xx[p] * sx, yy[p] * sy, zz[p] * spec.slice_thickness_um])
        entries.append((f"lm{i:02d}", [pt]))
    return LandmarkSet("truth", tuple(entries))


def generate(spec: PhantomSpec, out_dir: Path | str) -> tuple[PhantomManifests, PhantomTruth]:
    """Build the phantom and write sections, manifests, truth transforms, and landmarks."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    w, h, d = spec.dims
    sx, sy = spec.spacing_um
    vol_arr = _make_volume(spec, rng)
    volume = Image3D(vol_arr, (sx, sy, spec.slice_thickness_um))
    expr_vols = {g: _expression_volume(spec, rng, vol_arr > 0.05) for g in spec.genes}
    landmarks = _pick_landmarks(spec, rng, vol_arr)

    center = np.array([(w - 1) / 2 * sx, (h - 1) / 2 * sy])
    bf_entries, bl_entries = [], []
    ish_entries = {g: [] for g in spec.genes}
    mask_entries = {g: [] for g in spec.genes}
    bl_truth, ish_truth = [], {g: [] for g in spec.genes}
    masks = {g: [] for g in spec.genes}

    for j in range(d):
        true_slice = Image2D(vol_arr[j], (sx, sy))
        bf_path = f"bf/sl_{j:04d}.png"
        save_section(true_slice, out_dir / bf_path)
        bf_entries.append(ManifestEntry(j, "blockface", bf_path))

        pieces = [_rand_affine(spec, rng, center, 1.0)]
        warp = _rand_warp(spec, rng, (h, w))
        if warp is not None:
            pieces.append(warp)
        bl_chain = TransformChain(tuple(pieces))
        bl_img = warp_image(true_slice, bl_chain)
        bl_path = f"bl/sl_{j:04d}.png"
        save_section(bl_img, out_dir / bl_path)
        bl_entries.append(ManifestEntry(j, "backlit", bl_path))
        bl_truth.append(invert_chain(bl_chain))

        for g in spec.genes:
            extra = _rand_affine(spec, rng, center, spec.ish_extra_fraction)
            ish_chain = compose(bl_chain, extra)
            base = warp_image(true_slice, ish_chain)
            tissue = base.pixels > 0.05
            jitter = 1.0 + rng.uniform(-spec.contrast_jitter, spec.contrast_jitter)
            body = np.where(tissue, (1.0 - base.pixels) ** spec.ish_gamma, 0.0)
            expr_slice = Image2D(expr_vols[g][j], (sx, sy))
            expr_w = warp_image(expr_slice, ish_chain).pixels * tissue
            ish_px = np.clip(0.55 * jitter * body + 0.9 * expr_w, 0.0, 1.0) * tissue
            ish_img = Image2D(ish_px, (sx, sy))
            ish_path = f"ish_{g}/sl_{j:04d}.png"
            save_section(ish_img, out_dir / ish_path)
            ish_entries[g].append(ManifestEntry(j, "ish", ish_path))
            # mask pixels are exactly where the rendered expression term is strong,
            # so every positive pixel carries intensity above the dark background
            mask = SegmentationMask2D(expr_w > _EXPR_THRESHOLD)
            masks[g].append(mask)
            mask_path = f"mask_{g}/sl_{j:04d}.png"
            save_mask(mask, out_dir / mask_path)
            mask_entries[g].append(ManifestEntry(j, "mask", mask_path))
            ish_truth[g].append(invert_chain(ish_chain))

    def manifest(entries, gene=None):
        return StackManifest(
            entries=tuple(entries),
            spacing=(sx, sy),
            slice_thickness=spec.slice_thickness_um,
            gene=gene,
            root=out_dir,
        )

    bf_man = manifest(bf_entries)
    bl_man = manifest(bl_entries)
    ish_mans = {g: manifest(ish_entries[g], g) for g in spec.genes}
    mask_mans = {g: manifest(mask_entries[g], g) for g in spec.genes}
    bf_man.to_json(out_dir / "bf.manifest.json")
    bl_man.to_json(out_dir / "bl.manifest.json")
    for g in spec.genes:
        ish_mans[g].to_json(out_dir / f"ish_{g}.manifest.json")
        mask_mans[g].to_json(out_dir / f"mask_{g}.manifest.json")

    save_volume(volume, out_dir / "volume.json")
    save_landmarks_csv([landmarks], out_dir / "landmarks.csv")
    for j, chain in enumerate(bl_truth):
        save_chain(chain, out_dir / "truth" / "bl" / f"sl_{j:04d}.chain.json")
    for g in spec.genes:
        for j, chain in enumerate(ish_truth[g]):
            save_chain(chain, out_dir / "truth" / f"ish_{g}" / f"sl_{j:04d}.chain.json")

    manifests = PhantomManifests(bf_man, bl_man, ish_mans, mask_mans)
    truth = PhantomTruth(volume, bl_truth, ish_truth, landmarks, masks)
    return manifests, truth
