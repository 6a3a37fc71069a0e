"""Affine and dense-displacement spatial transforms, composition, and warping.

Transforms act on physical micrometre coordinates. A transform used for
resampling is a backward map: it takes points on the output (fixed) grid to
points in the input (moving) image, so warping never leaves holes.

A :class:`TransformChain` stores its elements outermost-first, i.e. the chain
``[t0, t1]`` is the composition ``t0 after t1``: points pass through the last
element first. ``compose(a, b)`` therefore concatenates element lists and
matches the usual ``a ∘ b`` reading.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_image import Image2D, Image3D, sample_linear

_DET_EPS = 1e-12


@dataclass(frozen=True)
class Affine:
    """Affine map p -> linear @ (p - center) + center + translation, units um."""

    linear: np.ndarray
    translation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64)
        d = lin.shape[0]
        if lin.shape != (d, d) or d not in (2, 3):
            raise ValueError("linear part must be 2x2 or 3x3")
        t = np.asarray(self.translation, dtype=np.float64).reshape(d)
        c = np.asarray(self.center, dtype=np.float64).reshape(d)
        if not (np.isfinite(lin).all() and np.isfinite(t).all() and np.isfinite(c).all()):
            raise ValueError("affine entries must be finite")
        if abs(np.linalg.det(lin)) < _DET_EPS:
            raise ValueError("affine linear part is singular")
        for name, arr in (("linear", lin), ("translation", t), ("center", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dimension(self) -> int:
        return self.linear.shape[0]

    @staticmethod
    def identity(dim: int) -> "Affine":
        return Affine(np.eye(dim), np.zeros(dim), np.zeros(dim))

    @staticmethod
    def translate(offset) -> "Affine":
        offset = np.asarray(offset, dtype=np.float64)
        d = offset.shape[0]
        return Affine(np.eye(d), offset, np.zeros(d))


@dataclass(frozen=True)
class DisplacementField:
    """Dense displacement u on a regular grid; maps p -> p + u(p).

    ``vectors`` is (h, w, 2) for 2D or (d, h, w, 3) for 3D with (x, y[, z])
    components in physical um; ``spacing`` is the grid step in um per axis.
    Outside the grid the displacement fades to zero with the interpolation.
    """

    vectors: np.ndarray
    spacing: tuple

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim == 3 and v.shape[-1] == 2:
            dim = 2
        elif v.ndim == 4 and v.shape[-1] == 3:
            dim = 3
        else:
            raise ValueError("vectors must be (h,w,2) or (d,h,w,3)")
        if not np.isfinite(v).all():
            raise ValueError("displacement vectors must be finite")
        if len(self.spacing) != dim or any(s <= 0 for s in self.spacing):
            raise ValueError("field spacing must be positive, one value per axis")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dimension(self) -> int:
        return self.vectors.shape[-1]

    @property
    def grid_shape(self) -> tuple:
        return self.vectors.shape[:-1]

    @staticmethod
    def zeros(grid_shape: tuple, spacing: tuple) -> "DisplacementField":
        dim = len(grid_shape)
        return DisplacementField(np.zeros(grid_shape + (dim,)), spacing)


Transform = Affine | DisplacementField


@dataclass(frozen=True)
class TransformChain:
    """Ordered composition; elements[0] is the outermost map (applied last)."""

    elements: tuple

    def __post_init__(self):
        elems = tuple(self.elements)
        dims = [e.dimension for e in elems]
        if any(a != b for a, b in zip(dims, dims[1:])):
            raise ValueError("chain elements must share a dimension")
        object.__setattr__(self, "elements", elems)

    @property
    def dimension(self) -> int:
        if not self.elements:
            raise ValueError("empty chain has no dimension")
        return self.elements[0].dimension


def as_chain(t: Transform | TransformChain | None, dim: int | None = None) -> TransformChain:
    if t is None:
        if dim is None:
            raise ValueError("need a dimension for the identity chain")
        return TransformChain((Affine.identity(dim),))
    if isinstance(t, TransformChain):
        return t
    return TransformChain((t,))


# ---------------------------------------------------------------------------
# application and composition


def _apply_affine(a: Affine, pts: np.ndarray) -> np.ndarray:
    return (pts - a.center) @ a.linear.T + a.center + a.translation


def _field_at(f: DisplacementField, pts: np.ndarray) -> np.ndarray:
    px = pts / np.asarray(f.spacing)
    comps = [sample_linear(f.vectors[..., k], px) for k in range(f.dimension)]
    return np.stack(comps, axis=-1)


def apply(t: Transform | TransformChain, p) -> np.ndarray:
    """Map physical point(s) through a transform. Accepts (d,) or (..., d)."""
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if isinstance(t, TransformChain):
        for e in reversed(t.elements):
            pts = apply(e, pts)
    elif isinstance(t, Affine):
        if pts.shape[-1] != t.dimension:
            raise ValueError("point dimension does not match transform")
        pts = _apply_affine(t, pts)
    elif isinstance(t, DisplacementField):
        if pts.shape[-1] != t.dimension:
            raise ValueError("point dimension does not match transform")
        pts = pts + _field_at(t, pts)
    else:
        raise TypeError(f"not a transform: {t!r}")
    return pts[0] if single else pts


def _mul_affine(outer: Affine, inner: Affine) -> Affine:
    """Single affine equal to outer(inner(p)), expressed with center 0."""
    lin = outer.linear @ inner.linear
    trans = (
        outer.linear @ (inner.center + inner.translation - outer.center - inner.linear @ inner.center)
        + outer.center
        + outer.translation
    )
    return Affine(lin, trans, np.zeros(outer.dimension))


def compose(a, b) -> TransformChain:
    """Chain ``a ∘ b`` (b applied first). Adjacent affines are collapsed."""
    ca, cb = as_chain(a), as_chain(b)
    if ca.dimension != cb.dimension:
        raise ValueError("cannot compose transforms of different dimension")
    merged: list = []
    for e in ca.elements + cb.elements:
        if merged and isinstance(merged[-1], Affine) and isinstance(e, Affine):
            merged[-1] = _mul_affine(merged[-1], e)
        else:
            merged.append(e)
    return TransformChain(tuple(merged))


def invert_affine(a: Affine) -> Affine:
    """Exact inverse; keeps the rotation center."""
    if abs(np.linalg.det(a.linear)) < _DET_EPS:
        raise ValueError("affine is numerically singular")
    li = np.linalg.inv(a.linear)
    return Affine(li, -li @ a.translation, a.center)


def invert_field(
    f: DisplacementField, iterations: int = 20, tol_voxels: float = 0.01
) -> DisplacementField:
    """Fixed-point field inversion: g solves g(y) = -u(y + g(y)).

    Runs up to ``iterations`` passes, stopping when the largest per-axis update
    drops below ``tol_voxels`` grid steps.
    """
    spacing = np.asarray(f.spacing)
    pts = _grid_points(f.grid_shape, f.spacing)
    g = np.zeros_like(f.vectors)
    for _ in range(iterations):
        new = -_field_at(f, pts + g)
        delta = np.abs(new - g) / spacing
        g = new
        if delta.max() < tol_voxels:
            break
    return DisplacementField(g, f.spacing)


def invert_chain(chain: TransformChain) -> TransformChain:
    """Inverse chain; affines inverted exactly, fields by fixed-point iteration."""
    inv = []
    for e in chain.elements[::-1]:
        inv.append(invert_affine(e) if isinstance(e, Affine) else invert_field(e))
    return TransformChain(tuple(inv))


# ---------------------------------------------------------------------------
# warping and diagnostics


def _grid_points(shape: tuple, spacing) -> np.ndarray:
    """Physical coordinates of every grid point, (..., d) with (x, y[, z]) order."""
    spacing = np.asarray(spacing, dtype=np.float64)
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack(mesh[::-1], axis=-1)  # x component first
    return pts * spacing


def warp_array(
    arr: np.ndarray,
    arr_spacing,
    chain: Transform | TransformChain,
    out_shape: tuple | None = None,
    out_spacing=None,
) -> np.ndarray:
    """Backward-warp a raw array; out-of-bounds samples fade to 0."""
    out_shape = arr.shape if out_shape is None else tuple(out_shape)
    out_spacing = arr_spacing if out_spacing is None else out_spacing
    pts = _grid_points(out_shape, out_spacing)
    src = apply(as_chain(chain), pts.reshape(-1, arr.ndim))
    src_px = src / np.asarray(arr_spacing, dtype=np.float64)
    vals = sample_linear(arr, src_px)
    return vals.reshape(out_shape)


def warp_image(
    img: Image2D | Image3D,
    chain: Transform | TransformChain,
    out_shape: tuple | None = None,
    out_spacing=None,
):
    """Resample an image through a backward transform chain.

    ``out_shape`` is array-shaped ((h, w) or (d, h, w)); default keeps the
    input grid. Each output grid point x receives img(chain(x)).
    """
    arr = img.pixels if isinstance(img, Image2D) else img.voxels
    out_spacing = img.spacing if out_spacing is None else tuple(out_spacing)
    warped = warp_array(arr, img.spacing, chain, out_shape, out_spacing)
    warped = np.clip(warped, 0.0, 1.0)
    if isinstance(img, Image2D):
        return Image2D(warped, out_spacing)
    return Image3D(warped, out_spacing)


def jacobian_min_det(f: DisplacementField) -> float:
    """Minimum over the grid of det(I + grad u); > 0 means diffeomorphic."""
    if min(f.grid_shape) < 2:
        raise ValueError("need at least 2 grid points per axis")
    dim = f.dimension
    spacing = f.spacing
    # vectors[..., k] is the x_k displacement; array axis a varies x_{dim-1-a}
    jac = np.zeros(f.grid_shape + (dim, dim))
    for k in range(dim):
        comp = f.vectors[..., k]
        for axis in range(dim):
            coord = dim - 1 - axis  # spatial coordinate along this array axis
            d = np.gradient(comp, spacing[coord], axis=axis)
            jac[..., k, coord] = d
    jac += np.eye(dim)
    return float(np.linalg.det(jac).min())


# ---------------------------------------------------------------------------
# serialization


def _fmt(vals) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(vals).ravel())


def save_affine(a: Affine, path: Path | str) -> None:
    """Text format: 'dim d', then matrix (row-major), translation, center lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"dim {a.dimension}", _fmt(a.linear), _fmt(a.translation), _fmt(a.center)]
    path.write_text("\n".join(lines) + "\n")


def load_affine(path: Path | str) -> Affine:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("dim "):
        raise ValueError(f"{path}: not an affine transform file")
    d = int(lines[0].split()[1])
    lin = np.array([float(v) for v in lines[1].split()]).reshape(d, d)
    trans = np.array([float(v) for v in lines[2].split()])
    center = np.array([float(v) for v in lines[3].split()])
    return Affine(lin, trans, center)


def save_field(f: DisplacementField, json_path: Path | str) -> None:
    """JSON header plus raw little-endian float32 vectors, x-fastest."""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    shape = f.grid_shape
    header = {
        "dims": list(shape[::-1]),  # (w, h[, d])
        "spacing_um": list(f.spacing),
        "components": "xy" if f.dimension == 2 else "xyz",
    }
    json_path.write_text(json.dumps(header, indent=2) + "\n")
    json_path.with_suffix(".raw").write_bytes(f.vectors.astype("<f4").tobytes())


def load_field(json_path: Path | str) -> DisplacementField:
    json_path = Path(json_path)
    header = json.loads(json_path.read_text())
    dims = [int(v) for v in header["dims"]]
    dim = len(dims)
    shape = tuple(dims[::-1]) + (dim,)
    raw = np.frombuffer(json_path.with_suffix(".raw").read_bytes(), dtype="<f4")
    if raw.size != np.prod(shape):
        raise ValueError(f"{json_path}: raw size {raw.size} does not match header")
    return DisplacementField(raw.reshape(shape).astype(np.float64), tuple(header["spacing_um"]))


def save_chain(chain: TransformChain, json_path: Path | str) -> None:
    """Chain index file; element files are written next to it."""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    stem = json_path.name.removesuffix(".json")
    entries = []
    for i, e in enumerate(chain.elements):
        if isinstance(e, Affine):
            name = f"{stem}.e{i}.affine.txt"
            save_affine(e, json_path.parent / name)
            entries.append({"kind": "affine", "file": name})
        else:
            name = f"{stem}.e{i}.field.json"
            save_field(e, json_path.parent / name)
            entries.append({"kind": "field", "file": name})
    json_path.write_text(json.dumps({"elements": entries}, indent=2) + "\n")


def load_chain(json_path: Path | str) -> TransformChain:
    json_path = Path(json_path)
    doc = json.loads(json_path.read_text())
    elems = []
    for entry in doc["elements"]:
        p = json_path.parent / entry["file"]
        elems.append(load_affine(p) if entry["kind"] == "affine" else load_field(p))
    return TransformChain(tuple(elems))
