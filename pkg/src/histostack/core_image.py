"""Image containers, interpolation, filtering, pyramids, and section preprocessing.

All images are single-channel float64 arrays with intensities in [0, 1] and a
physical spacing in micrometres per pixel. 2D arrays are indexed [y, x] and 3D
arrays [z, y, x]; coordinate tuples passed around the package are always
(x, y) / (x, y, z) ordered, matching the on-disk formats (x-fastest raw files).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage
from scipy import ndimage

GAUSS_TRUNCATE = 4.0  # Gaussian kernels are cut at 4 sigma

MODALITIES = ("blockface", "backlit", "ish", "mask")


def _check_intensities(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{what}: non-finite intensities")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{what}: intensities outside [0, 1]")


@dataclass(frozen=True)
class Image2D:
    """Grayscale section image. ``pixels`` is (height, width), spacing is (x, y) um/px."""

    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("Image2D needs a non-empty 2D pixel array")
        _check_intensities(px, "Image2D")
        if len(self.spacing) != 2 or any(s <= 0 for s in self.spacing):
            raise ValueError("Image2D spacing must be two positive values")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class Image3D:
    """Grayscale volume. ``voxels`` is (depth, height, width), spacing (x, y, z) um."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vx = np.asarray(self.voxels, dtype=np.float64)
        if vx.ndim != 3 or min(vx.shape) < 1:
            raise ValueError("Image3D needs a non-empty 3D voxel array")
        _check_intensities(vx, "Image3D")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError("Image3D spacing must be three positive values")
        vx.setflags(write=False)
        object.__setattr__(self, "voxels", vx)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    def slice2d(self, j: int) -> Image2D:
        return Image2D(self.voxels[j], self.spacing[:2])


@dataclass(frozen=True)
class SegmentationMask2D:
    """Binary mask paired with a section image of the same dimensions."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ValueError("SegmentationMask2D needs a 2D array")
        if b.dtype != bool:
            vals = np.unique(b)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError("mask values must be 0/1")
            b = b.astype(bool)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class ManifestEntry:
    index: int
    modality: str
    path: str


@dataclass(frozen=True)
class StackManifest:
    """Ordered section list binding modalities to slice indices.

    ``root`` anchors the (relative) entry paths; it is not serialized.
    """

    entries: tuple[ManifestEntry, ...]
    spacing: tuple[float, float]
    slice_thickness: float
    gene: str | None = None
    bit_depth: int = 16
    root: Path = field(default_factory=Path, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "root", Path(self.root))
        if any(s <= 0 for s in self.spacing) or self.slice_thickness <= 0:
            raise ValueError("manifest spacing and slice thickness must be positive")
        per_mod: dict[str, list[int]] = {}
        for e in self.entries:
            if e.modality not in MODALITIES:
                raise ValueError(f"unknown modality {e.modality!r}")
            per_mod.setdefault(e.modality, []).append(e.index)
        for mod, idx in per_mod.items():
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError(f"{mod} slice indices must be strictly increasing")
        # every ISH section needs a backlit partner when both modalities are present
        if "ish" in per_mod and "backlit" in per_mod:
            missing = sorted(set(per_mod["ish"]) - set(per_mod["backlit"]))
            if missing:
                raise ValueError(f"ISH sections without backlit counterpart: {missing}")

    def indices(self, modality: str) -> list[int]:
        return [e.index for e in self.entries if e.modality == modality]

    def entry(self, index: int, modality: str) -> ManifestEntry:
        for e in self.entries:
            if e.index == index and e.modality == modality:
                return e
        raise KeyError(f"no {modality} entry for slice {index}")

    def load_image(self, index: int, modality: str, invert: bool = False) -> Image2D:
        e = self.entry(index, modality)
        return load_section(self.root / e.path, spacing=self.spacing, invert=invert)

    def load_mask(self, index: int) -> SegmentationMask2D:
        e = self.entry(index, "mask")
        img = load_section(self.root / e.path, spacing=self.spacing)
        return SegmentationMask2D(img.pixels > 0.5)

    def to_json(self, path: Path | str) -> None:
        path = Path(path)
        doc = {
            "sections": [
                {"index": e.index, "modality": e.modality, "path": e.path}
                for e in self.entries
            ],
            "spacing_um": list(self.spacing),
            "slice_thickness_um": self.slice_thickness,
            "bit_depth": self.bit_depth,
        }
        if self.gene is not None:
            doc["gene"] = self.gene
        path.write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def from_json(cls, path: Path | str) -> "StackManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        entries = tuple(
            ManifestEntry(int(s["index"]), s["modality"], s["path"])
            for s in doc["sections"]
        )
        return cls(
            entries=entries,
            spacing=tuple(doc["spacing_um"]),
            slice_thickness=float(doc["slice_thickness_um"]),
            gene=doc.get("gene"),
            bit_depth=int(doc.get("bit_depth", 16)),
            root=path.parent,
        )


# ---------------------------------------------------------------------------
# sampling


def sample_linear(arr: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``arr`` at continuous pixel coordinates.

    ``pts[..., k]`` addresses array axis ``arr.ndim - 1 - k`` (x first, so a 2D
    point is (x, y) against an array indexed [y, x]). Samples whose footprint
    leaves the grid blend with the background value 0; fully outside gives 0.
    """
    nd = arr.ndim
    pts = np.asarray(pts, dtype=np.float64)
    base = np.floor(pts).astype(np.int64)
    frac = pts - base
    out = np.zeros(pts.shape[:-1], dtype=np.float64)
    for corner in range(1 << nd):
        w = np.ones(pts.shape[:-1], dtype=np.float64)
        inside = np.ones(pts.shape[:-1], dtype=bool)
        idx = []
        for k in range(nd):
            bit = (corner >> k) & 1
            ik = base[..., k] + bit
            w = w * (frac[..., k] if bit else 1.0 - frac[..., k])
            n = arr.shape[nd - 1 - k]
            inside &= (ik >= 0) & (ik < n)
            idx.append(np.clip(ik, 0, n - 1))
        vals = arr[tuple(idx[::-1])]
        out += w * np.where(inside, vals, 0.0)
    return out


def sample_bilinear(img: Image2D, xy) -> np.ndarray | float:
    """Bilinear intensity lookup at continuous pixel coordinates (x, y)."""
    xy = np.asarray(xy, dtype=np.float64)
    single = xy.ndim == 1
    vals = sample_linear(img.pixels, xy.reshape(-1, 2) if single else xy)
    return float(vals[0]) if single else vals


def sample_trilinear(vol: Image3D, xyz) -> np.ndarray | float:
    """Trilinear intensity lookup at continuous voxel coordinates (x, y, z)."""
    xyz = np.asarray(xyz, dtype=np.float64)
    single = xyz.ndim == 1
    vals = sample_linear(vol.voxels, xyz.reshape(-1, 3) if single else xyz)
    return float(vals[0]) if single else vals


# ---------------------------------------------------------------------------
# filtering


def gaussian_smooth_3d(vol: Image3D, sigma: float) -> Image3D:
    """Separable 3D Gaussian smoothing, sigma in voxels, clamp-to-edge borders."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return vol
    sm = ndimage.gaussian_filter(vol.voxels, sigma, mode="nearest", truncate=GAUSS_TRUNCATE)
    return Image3D(np.clip(sm, 0.0, 1.0), vol.spacing)


def _smooth_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(arr, sigma, mode="nearest", truncate=GAUSS_TRUNCATE)


def pyramid(img: Image2D | Image3D, levels: int) -> list:
    """Multi-resolution pyramid: level 0 is the input, each next level is
    smoothed (sigma=1) and decimated by 2. Spacing doubles per level."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    arr = img.pixels if isinstance(img, Image2D) else img.voxels
    coarsest = [n // 2 ** (levels - 1) for n in arr.shape]
    if min(coarsest) < 8:
        raise ValueError(f"{levels} levels leave fewer than 8 px per axis")
    out = [img]
    for _ in range(levels - 1):
        prev = out[-1]
        arr = prev.pixels if isinstance(prev, Image2D) else prev.voxels
        dec = _smooth_array(arr, 1.0)
        dec = dec[tuple(slice(None, None, 2) for _ in range(arr.ndim))]
        dec = np.clip(dec, 0.0, 1.0)
        sp = tuple(2.0 * s for s in prev.spacing)
        out.append(Image2D(dec, sp) if isinstance(prev, Image2D) else Image3D(dec, sp))
    return out


# ---------------------------------------------------------------------------
# preprocessing (downscale -> median -> speck removal)


@dataclass(frozen=True)
class PreprocessParams:
    """Section preprocessing knobs.

    downscale: integer area-averaging factor (1 = keep resolution).
    median_radius: half-width of the median window (0 disables).
    morph_radius: disk radius for the open/close artifact cleaning (0 disables).
    """

    downscale: int = 1
    median_radius: int = 1
    morph_radius: int = 2

    def __post_init__(self):
        if self.downscale < 1:
            raise ValueError("downscale factor must be >= 1")
        if self.median_radius < 0 or self.morph_radius < 0:
            raise ValueError("radii must be >= 0")


def _otsu_threshold(arr: np.ndarray, bins: int = 256) -> float | None:
    """Otsu threshold on [0,1] data; None when the histogram is degenerate."""
    counts, edges = np.histogram(arr, bins=bins, range=(0.0, 1.0))
    total = counts.sum()
    if total == 0:
        return None
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(counts)
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return None
    sum0 = np.cumsum(counts * centers)
    mu0 = np.where(w0 > 0, sum0 / np.maximum(w0, 1), 0.0)
    mu1 = np.where(w1 > 0, (sum0[-1] - sum0) / np.maximum(w1, 1), 0.0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    between[~valid] = -1.0
    return float(centers[int(np.argmax(between))])


def _disk(radius: int) -> np.ndarray:
    if radius == 0:
        return np.ones((1, 1), dtype=bool)
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return xx * xx + yy * yy <= radius * radius


def _remove_specks(px: np.ndarray, radius: int) -> np.ndarray:
    """Zero bright pixels that vanish from the Otsu mask under open-then-close."""
    thr = _otsu_threshold(px)
    if thr is None or px.min() == px.max():
        return px
    mask = px > thr
    selem = _disk(radius)
    cleaned = ndimage.binary_closing(ndimage.binary_opening(mask, selem), selem)
    specks = mask & ~cleaned
    return np.where(specks, 0.0, px)


_MAX_FILTER_PASSES = 10


def preprocess_section(img: Image2D, cfg: PreprocessParams) -> Image2D:
    """Downscale (area average), median-filter, then remove thresholded specks.

    The median/morphology pair is iterated to a fixed point (capped at
    _MAX_FILTER_PASSES), so for downscale factor 1 the op is idempotent on its
    own output: filtering a stable image is a no-op.
    """
    f = cfg.downscale
    h, w = img.pixels.shape
    if f > min(h, w):
        raise ValueError(f"downscale factor {f} larger than image {w}x{h}")
    px = img.pixels
    if f > 1:
        px = px[: (h // f) * f, : (w // f) * f]
        px = px.reshape(h // f, f, w // f, f).mean(axis=(1, 3))
    for _ in range(_MAX_FILTER_PASSES):
        nxt = px
        if cfg.median_radius > 0:
            nxt = ndimage.median_filter(nxt, size=2 * cfg.median_radius + 1, mode="nearest")
        if cfg.morph_radius > 0:
            nxt = _remove_specks(nxt, cfg.morph_radius)
        if np.array_equal(nxt, px):
            break
        px = nxt
    spacing = (img.spacing[0] * f, img.spacing[1] * f)
    return Image2D(np.clip(px, 0.0, 1.0), spacing)


# ---------------------------------------------------------------------------
# file I/O


def load_section(path: Path | str, spacing=(1.0, 1.0), invert: bool = False) -> Image2D:
    """Load an 8/16-bit grayscale PNG/TIFF section, normalized to [0, 1].

    RGB inputs are collapsed to a single optical-density channel (dark stain
    becomes bright signal). ``invert`` flips grayscale slides so tissue is
    bright on a dark background.
    """
    with _PILImage.open(Path(path)) as im:
        if im.mode in ("RGB", "RGBA"):
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
            lum = arr @ np.array([0.299, 0.587, 0.114]) / 255.0
            od = -np.log10(np.clip(lum, 1e-3, 1.0)) / 3.0
            px = np.clip(od, 0.0, 1.0)
            return Image2D(px, spacing)
        if im.mode == "1":
            arr = np.asarray(im, dtype=np.float64)
            maxval = 1.0
        elif im.mode == "L":
            arr = np.asarray(im, dtype=np.float64)
            maxval = 255.0
        elif im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            maxval = 65535.0
        elif im.mode == "F":
            arr = np.asarray(im, dtype=np.float64)
            maxval = max(arr.max(), 1.0)
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            maxval = 255.0
    px = np.clip(arr / maxval, 0.0, 1.0)
    if invert:
        px = 1.0 - px
    return Image2D(px, spacing)


def save_section(img: Image2D, path: Path | str, bit_depth: int = 16) -> None:
    """Write a section as 8- or 16-bit grayscale PNG/TIFF."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bit_depth == 8:
        arr = np.round(img.pixels * 255.0).astype(np.uint8)
        _PILImage.fromarray(arr, mode="L").save(path)
    elif bit_depth == 16:
        arr = np.round(img.pixels * 65535.0).astype(np.uint16)
        _PILImage.fromarray(arr).save(path)
    else:
        raise ValueError("bit_depth must be 8 or 16")


def save_mask(mask: SegmentationMask2D, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _PILImage.fromarray(mask.bits.astype(np.uint8) * 255, mode="L").save(path)


def _raw_path(json_path: Path) -> Path:
    return json_path.with_suffix(".raw")


def save_volume(vol: Image3D, json_path: Path | str) -> None:
    """Write a volume as a JSON header plus x-fastest little-endian float32 raw file."""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": [vol.width, vol.height, vol.depth],
        "spacing_um": list(vol.spacing),
    }
    json_path.write_text(json.dumps(header, indent=2) + "\n")
    _raw_path(json_path).write_bytes(vol.voxels.astype("<f4").tobytes())


def load_volume(json_path: Path | str) -> Image3D:
    json_path = Path(json_path)
    header = json.loads(json_path.read_text())
    w, h, d = (int(v) for v in header["dims"])
    raw = np.frombuffer(_raw_path(json_path).read_bytes(), dtype="<f4")
    if raw.size != w * h * d:
        raise ValueError(f"raw volume size {raw.size} != {w}x{h}x{d}")
    voxels = np.clip(raw.reshape(d, h, w).astype(np.float64), 0.0, 1.0)
    return Image3D(voxels, tuple(header["spacing_um"]))
