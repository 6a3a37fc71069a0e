"""Affine registration by NMI maximization, single-target and multi-term.

The optimizer is gradient-free: a translation grid search seeds the coarsest
pyramid level, then Nelder-Mead refines scaled pose parameters level by level.
Rigid parameters are used at the coarsest level and the requested degrees of
freedom at finer levels, which keeps torn or noisy sections from collapsing
the scale estimate early.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .core_image import Image2D, pyramid, sample_linear
from .metrics import nmi
from .transforms import Affine, _grid_points, apply, as_chain, compose

DOF_CHOICES = ("rigid", "similarity", "affine")
_MIN_OVERLAP = 32  # samples needed before NMI is trusted


class RegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AffineRegParams:
    levels: int = 3
    max_iters: int = 200          # Nelder-Mead iteration cap per level
    tol: float = 1e-5             # objective-change convergence threshold
    dof: str = "affine"
    bins: int = 32
    rot_scale: float = 0.1        # radians per optimizer unit
    log_scale_scale: float = 0.1
    shear_scale: float = 0.1
    trans_scale: float | None = None  # um per unit; None = 5% of fixed extent
    grid_search: bool = True
    grid_span: float = 0.25       # translation search span, fraction of extent
    grid_steps: int = 5

    def __post_init__(self):
        if self.levels < 1 or self.max_iters <= 0 or self.tol <= 0:
            raise ValueError("levels >= 1, max_iters > 0, tol > 0 required")
        if self.dof not in DOF_CHOICES:
            raise ValueError(f"dof must be one of {DOF_CHOICES}")


@dataclass(frozen=True)
class WeightedTargets:
    """Target images with Eq.-style weights; zero-weight entries are never read."""

    entries: tuple

    def __post_init__(self):
        entries = tuple((img, float(w)) for img, w in self.entries)
        if not entries:
            raise ValueError("need at least one target")
        if any(w < 0 for _, w in entries):
            raise ValueError("weights must be >= 0")
        if all(w == 0 for _, w in entries):
            raise ValueError("all target weights are zero")
        for img, w in entries:
            if w > 0 and img is None:
                raise ValueError("positive-weight target missing an image")
        object.__setattr__(self, "entries", entries)

    def active(self) -> list:
        return [(img, w) for img, w in self.entries if w > 0]


@dataclass(frozen=True)
class AffineResult:
    transform: Affine
    objective: float      # minimization form (negated NMI or weighted sum)
    converged: bool


# ---------------------------------------------------------------------------
# pose parametrization


def _dof_layout(dof: str, dim: int) -> tuple[int, int, int]:
    """(n_rot, n_logscale, n_shear) for the pose vector."""
    n_rot = 1 if dim == 2 else 3
    if dof == "rigid":
        return n_rot, 0, 0
    if dof == "similarity":
        return n_rot, 1, 0
    return n_rot, dim, 1 if dim == 2 else 3


def _rotation(dim: int, angles: np.ndarray) -> np.ndarray:
    if dim == 2:
        c, s = np.cos(angles[0]), np.sin(angles[0])
        return np.array([[c, -s], [s, c]])
    rx, ry, rz = angles
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _pose_to_affine(x: np.ndarray, dof: str, dim: int, center: np.ndarray) -> Affine:
    n_rot, n_ls, n_sh = _dof_layout(dof, dim)
    rot = _rotation(dim, x[:n_rot])
    if n_ls == 0:
        scales = np.ones(dim)
    elif n_ls == 1:
        scales = np.full(dim, np.exp(x[n_rot]))
    else:
        scales = np.exp(x[n_rot : n_rot + n_ls])
    shear = np.eye(dim)
    sh = x[n_rot + n_ls : n_rot + n_ls + n_sh]
    if n_sh == 1:
        shear[0, 1] = sh[0]
    elif n_sh == 3:
        shear[0, 1], shear[0, 2], shear[1, 2] = sh
    lin = rot @ shear @ np.diag(scales)
    trans = x[n_rot + n_ls + n_sh :]
    return Affine(lin, trans, center)


def _pose_scales(params: AffineRegParams, dof: str, dim: int, trans_scale: float) -> np.ndarray:
    n_rot, n_ls, n_sh = _dof_layout(dof, dim)
    return np.array(
        [params.rot_scale] * n_rot
        + [params.log_scale_scale] * n_ls
        + [params.shear_scale] * n_sh
        + [trans_scale] * dim
    )


# ---------------------------------------------------------------------------
# objective plumbing


def _image_arr(img):
    return img.pixels if isinstance(img, Image2D) else img.voxels


def _phys_center(img) -> np.ndarray:
    arr = _image_arr(img)
    dims_xy = np.array(arr.shape[::-1], dtype=np.float64)
    return (dims_xy - 1) / 2.0 * np.asarray(img.spacing)


def _extent(img) -> float:
    arr = _image_arr(img)
    return float(max((n - 1) * s for n, s in zip(arr.shape[::-1], img.spacing)))


def com_align(moving, fixed) -> Affine:
    """Translation-only init mapping the fixed centroid onto the moving centroid."""
    dim = 2 if isinstance(moving, Image2D) else 3

    def com(img):
        arr = _image_arr(img)
        total = arr.sum()
        if total == 0:
            return _phys_center(img)
        pts = _grid_points(arr.shape, img.spacing)
        return (pts.reshape(-1, dim) * arr.reshape(-1, 1)).sum(axis=0) / total

    return Affine.translate(com(moving) - com(fixed))


class _LevelEval:
    """Warp-and-score helper bound to one pyramid level's fixed grid."""

    def __init__(self, moving, targets_with_weights, bins: int):
        self.moving_arr = _image_arr(moving)
        self.moving_spacing = np.asarray(moving.spacing)
        first = targets_with_weights[0][0]
        self.dim = 2 if isinstance(first, Image2D) else 3
        self.grid_shape = _image_arr(first).shape
        self.pts = _grid_points(self.grid_shape, first.spacing).reshape(-1, self.dim)
        self.targets = [(_image_arr(t), w) for t, w in targets_with_weights]
        self.bins = bins

    def warp(self, chain) -> np.ndarray:
        src = apply(chain, self.pts)
        return sample_linear(self.moving_arr, src / self.moving_spacing).reshape(self.grid_shape)

    def objective(self, chain) -> float:
        warped = self.warp(chain)
        mask = warped > 0
        if mask.sum() < _MIN_OVERLAP:
            return np.inf
        total = 0.0
        try:
            for tgt, w in self.targets:
                total += w * -nmi(warped, tgt, self.bins, mask)
        except ValueError:
            return np.inf
        return total


def _pyramid_levels(images, requested: int) -> int:
    feasible = requested
    for img in images:
        arr = _image_arr(img)
        while feasible > 1 and min(n // 2 ** (feasible - 1) for n in arr.shape) < 8:
            feasible -= 1
    return feasible


def _grid_offsets(extent: float, span: float, steps: int, dim: int):
    axis = np.linspace(-span * extent, span * extent, steps)
    return [np.array(v) for v in itertools.product(axis, repeat=dim)]


def _optimize(
    moving,
    targets: WeightedTargets,
    params: AffineRegParams,
    init,
    return_increment: bool = False,
) -> AffineResult:
    """Shared engine: minimize the (multi-term) negated-NMI objective over a pose."""
    active = targets.active()
    dim = 2 if isinstance(moving, Image2D) else 3
    init_chain = as_chain(init, dim)
    levels = _pyramid_levels([moving] + [t for t, _ in active], params.levels)
    mov_pyr = pyramid(moving, levels)
    tgt_pyrs = [[(lvl, w) for lvl in pyramid(t, levels)] for t, w in active]

    trans_scale = params.trans_scale
    if trans_scale is None:
        trans_scale = 0.05 * max(_extent(active[0][0]), 1e-9)
    center = _phys_center(moving)

    total = Affine.identity(dim)
    converged = True
    for li in range(levels - 1, -1, -1):  # coarse -> fine
        level_targets = [(pyr[li][0], pyr[li][1]) for pyr in tgt_pyrs]
        ev = _LevelEval(mov_pyr[li], level_targets, params.bins)
        dof = "rigid" if (li == levels - 1 and levels > 1) else params.dof
        n_rot, n_ls, n_sh = _dof_layout(dof, dim)
        scales = _pose_scales(params, dof, dim, trans_scale)
        npar = n_rot + n_ls + n_sh + dim

        def fun(xs, _ev=ev, _dof=dof, _scales=scales):
            inc = _pose_to_affine(xs * _scales, _dof, dim, center)
            return _ev.objective(compose(compose(inc, total), init_chain))

        x0 = np.zeros(npar)
        if params.grid_search and li == levels - 1:
            ext = _extent(active[0][0])
            best = (fun(x0), x0)
            for off in _grid_offsets(ext, params.grid_span, params.grid_steps, dim):
                x = np.zeros(npar)
                x[-dim:] = off / trans_scale
                val = fun(x)
                if val < best[0]:
                    best = (val, x)
            x0 = best[1]

        simplex = np.vstack([x0] + [x0 + 0.5 * np.eye(npar)[k] for k in range(npar)])
        res = optimize.minimize(
            fun,
            x0,
            method="Nelder-Mead",
            options={
                "maxiter": params.max_iters,
                "xatol": 1e-3,
                "fatol": params.tol,
                "initial_simplex": simplex,
            },
        )
        best_x = res.x if res.fun <= fun(x0) else x0
        converged = converged and bool(res.success)
        inc = _pose_to_affine(best_x * scales, dof, dim, center)
        total = _collapse(inc, total)

    # never return something worse than the init it was given
    ev_full = _LevelEval(mov_pyr[0], [(t, w) for t, w in active], params.bins)
    obj_init = ev_full.objective(init_chain)
    obj_final = ev_full.objective(compose(total, init_chain))
    if obj_final > obj_init:
        total = Affine.identity(dim)
        obj_final = obj_init
        converged = False

    if return_increment:
        return AffineResult(total, float(obj_final), converged)
    collapsed = compose(total, init_chain)
    if len(collapsed.elements) == 1 and isinstance(collapsed.elements[0], Affine):
        return AffineResult(collapsed.elements[0], float(obj_final), converged)
    return AffineResult(total, float(obj_final), converged)


def _collapse(outer: Affine, inner: Affine) -> Affine:
    return compose(outer, inner).elements[0]


# ---------------------------------------------------------------------------
# public API


def register_affine(moving, fixed, params: AffineRegParams | None = None, init: Affine | None = None) -> AffineResult:
    """Find the affine T maximizing nmi(warp(moving, T), fixed).

    Returns the full transform (init composed in), the final minimization-form
    objective (-NMI), and a convergence flag; a solution is never worse than
    ``init``.
    """
    params = params or AffineRegParams()
    _require_nonconstant(moving, "moving")
    _require_nonconstant(fixed, "fixed")
    targets = WeightedTargets(((fixed, 1.0),))
    return _optimize(moving, targets, params, init)


def eval_multiterm(moving_section, T, Tk, targets: WeightedTargets, bins: int = 32) -> float:
    """Weighted sum over targets of -nmi(warp(moving, T∘Tk), target); lower is better.

    Zero-weight terms are skipped without touching their images.
    """
    active = targets.active()
    dim = 2 if isinstance(moving_section, Image2D) else 3
    chain = compose(as_chain(T, dim), as_chain(Tk, dim))
    ev = _LevelEval(moving_section, active, bins)
    val = ev.objective(chain)
    if not np.isfinite(val):
        raise ValueError("degenerate entropy: no usable overlap for multi-term objective")
    return float(val)


def register_affine_multiterm(
    moving_section,
    Tk,
    targets: WeightedTargets,
    params: AffineRegParams | None = None,
) -> AffineResult:
    """Minimize the multi-term objective over an affine increment T (Tk held fixed).

    The returned transform is the increment T alone; callers compose it with Tk.
    """
    params = params or AffineRegParams()
    _require_nonconstant(moving_section, "moving")
    return _optimize(moving_section, targets, params, Tk, return_increment=True)


def _require_nonconstant(img, name: str) -> None:
    arr = _image_arr(img)
    if arr.min() == arr.max():
        raise RegistrationError(f"degenerate entropy: {name} image is constant")
