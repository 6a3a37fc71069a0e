"""Diffusion-regularized demons registration with Jacobian guarding.

Stands in for symmetric-normalization deformable registration: forces are
local mean-squares demons forces, the update field is fluid-smoothed, composed
onto the running total, and the total is diffusion-smoothed. Any step that
would break diffeomorphism (minimum Jacobian determinant <= 0) is halved and
retried; persistent violations raise. The intensity energy against the
weighted target blend never increases over accepted iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core_image import GAUSS_TRUNCATE, Image2D, pyramid, sample_linear
from .transforms import DisplacementField, TransformChain, _grid_points, as_chain, warp_image
from .affine_reg import WeightedTargets, _image_arr

_DENOM_EPS = 1e-12
_MAX_HALVINGS = 5


@dataclass(frozen=True)
class DeformableRegParams:
    levels: int = 3
    iters_per_level: int = 50
    sigma_fluid: float = 2.0      # update-field smoothing, voxels
    sigma_diffusion: float = 1.0  # total-field smoothing, voxels
    max_step: float = 0.5         # per-iteration step cap, voxels
    conv_mean_update: float = 0.01  # stop when mean |update| drops below, voxels

    def __post_init__(self):
        if self.levels < 1 or self.iters_per_level < 0:
            raise ValueError("levels >= 1 and iters_per_level >= 0 required")
        if self.sigma_fluid < 0 or self.sigma_diffusion < 0:
            raise ValueError("smoothing sigmas must be >= 0")
        if self.max_step <= 0:
            raise ValueError("max_step must be > 0")


def _smooth_vectors(vec: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return vec
    out = np.empty_like(vec)
    dim = vec.shape[-1]
    for k in range(dim):
        out[..., k] = ndimage.gaussian_filter(
            vec[..., k], sigma, mode="nearest", truncate=GAUSS_TRUNCATE
        )
    return out


def _warp_by_field(arr: np.ndarray, spacing: np.ndarray, pts: np.ndarray, u: np.ndarray) -> np.ndarray:
    dim = u.shape[-1]
    src = (pts + u).reshape(-1, dim) / spacing
    return sample_linear(arr, src).reshape(arr.shape)


def _sample_field_at(u: np.ndarray, spacing: np.ndarray, pts: np.ndarray) -> np.ndarray:
    dim = u.shape[-1]
    px = pts.reshape(-1, dim) / spacing
    comps = [sample_linear(u[..., k], px) for k in range(dim)]
    return np.stack(comps, axis=-1).reshape(u.shape)


def _min_jacobian(u: np.ndarray, spacing) -> float:
    return _jac_dets(u, spacing).min()


def _jac_dets(u: np.ndarray, spacing) -> np.ndarray:
    dim = u.shape[-1]
    jac = np.zeros(u.shape[:-1] + (dim, dim))
    for k in range(dim):
        for axis in range(dim):
            coord = dim - 1 - axis
            jac[..., k, coord] = np.gradient(u[..., k], spacing[coord], axis=axis)
    jac += np.eye(dim)
    return np.linalg.det(jac)


def _upsample_field(u: np.ndarray, fine_shape: tuple, coarse_spacing, fine_spacing) -> np.ndarray:
    dim = u.shape[-1]
    pts = _grid_points(fine_shape, fine_spacing).reshape(-1, dim)
    px = pts / np.asarray(coarse_spacing)
    # clamp so upsampling never blends with background zeros
    for k in range(dim):
        n = u.shape[:-1][dim - 1 - k]
        px[:, k] = np.clip(px[:, k], 0.0, n - 1)
    comps = [sample_linear(u[..., k], px) for k in range(dim)]
    return np.stack(comps, axis=-1).reshape(fine_shape + (dim,))


def _demons(moving, targets_with_weights, params: DeformableRegParams, trace=None) -> DisplacementField:
    """Multi-resolution demons on images already sharing the fixed grid."""
    dim = 2 if isinstance(moving, Image2D) else 3
    levels = params.levels
    for img in [moving] + [t for t, _ in targets_with_weights]:
        arr = _image_arr(img)
        while levels > 1 and min(n // 2 ** (levels - 1) for n in arr.shape) < 8:
            levels -= 1
    mov_pyr = pyramid(moving, levels)
    tgt_pyrs = [(pyramid(t, levels), w) for t, w in targets_with_weights]
    wsum = sum(w for _, w in targets_with_weights)

    u = None
    prev_spacing = None
    for li in range(levels - 1, -1, -1):
        mov = mov_pyr[li]
        arr = _image_arr(mov)
        spacing = np.asarray(mov.spacing, dtype=np.float64)
        shape = arr.shape
        tgts = [(_image_arr(pyr[li]), w) for pyr, w in tgt_pyrs]
        blend = sum(t * w for t, w in tgts) / wsum
        if u is None:
            u = np.zeros(shape + (dim,))
        else:
            u = _upsample_field(u, shape, prev_spacing, spacing)
        prev_spacing = spacing
        pts = _grid_points(shape, spacing)
        kappa = 1.0 / float(np.mean(spacing**2))
        vox = spacing  # per-component voxel size for magnitude normalization
        max_step_um = params.max_step * float(spacing.min())

        warped = _warp_by_field(arr, spacing, pts, u)
        cur_mse = float(np.mean((warped - blend) ** 2))
        if trace is not None:
            trace.append({"level": li, "iteration": -1, "mse": cur_mse})
        for it in range(params.iters_per_level):
            grad = np.stack(
                [np.gradient(warped, spacing[k], axis=dim - 1 - k) for k in range(dim)],
                axis=-1,
            )
            gnorm2 = (grad**2).sum(axis=-1)
            force = np.zeros_like(u)
            for tgt, w in tgts:
                diff = tgt - warped
                denom = gnorm2 + diff**2 * kappa
                scale = np.where(denom > _DENOM_EPS, diff / np.maximum(denom, _DENOM_EPS), 0.0)
                force += (w / wsum) * scale[..., None] * grad
            force = _smooth_vectors(force, params.sigma_fluid)
            mag_vox = np.sqrt(((force / vox) ** 2).sum(axis=-1))
            peak = float(mag_vox.max())
            if peak * spacing.min() > max_step_um and peak > 0:
                force *= params.max_step / peak
                mag_vox *= params.max_step / peak
            if float(mag_vox.mean()) < params.conv_mean_update:
                break

            step = force
            accepted = False
            jac_failed = False
            for _ in range(_MAX_HALVINGS + 1):
                cand = step + _sample_field_at(u, spacing, pts + step)
                cand = _smooth_vectors(cand, params.sigma_diffusion)
                jac_failed = _min_jacobian(cand, spacing) <= 0
                if not jac_failed:
                    cand_warped = _warp_by_field(arr, spacing, pts, cand)
                    cand_mse = float(np.mean((cand_warped - blend) ** 2))
                    if cand_mse <= cur_mse + 1e-12:
                        u, warped, cur_mse = cand, cand_warped, cand_mse
                        accepted = True
                        break
                step = step * 0.5
            if not accepted:
                if jac_failed:
                    raise RuntimeError("diffeomorphism violated: Jacobian stayed <= 0 after 5 halvings")
                break  # energy plateau at this level
            if trace is not None:
                trace.append({"level": li, "iteration": it, "mse": cur_mse})

    field = DisplacementField(u, tuple(float(s) for s in mov_pyr[0].spacing))
    return field


def register_deformable(
    moving,
    fixed,
    params: DeformableRegParams | None = None,
    init: TransformChain | None = None,
    trace=None,
) -> DisplacementField:
    """Demons registration of moving onto fixed; returns the residual field.

    ``init`` pre-warps the moving image onto the fixed grid; the full backward
    map is then compose(init, field). Without ``init`` the images must already
    share a grid.
    """
    params = params or DeformableRegParams()
    return register_deformable_multiterm(
        moving, init, WeightedTargets(((fixed, 1.0),)), params, trace=trace
    )


def register_deformable_multiterm(
    moving_section,
    Tk,
    targets: WeightedTargets,
    params: DeformableRegParams | None = None,
    trace=None,
) -> DisplacementField:
    """Demons with per-target forces combined as the weighted average.

    Zero-weight targets contribute no force and are never evaluated. The
    returned field lives on the targets' grid; the full backward map is
    compose(Tk, field).
    """
    params = params or DeformableRegParams()
    active = targets.active()
    ref = active[0][0]
    dim = 2 if isinstance(ref, Image2D) else 3
    ref_arr = _image_arr(ref)
    for t, _ in active[1:]:
        if _image_arr(t).shape != ref_arr.shape or t.spacing != ref.spacing:
            raise ValueError("targets must share one grid")
    if Tk is not None:
        moving_w = warp_image(moving_section, as_chain(Tk, dim), ref_arr.shape, ref.spacing)
    else:
        arr = _image_arr(moving_section)
        if arr.shape != ref_arr.shape or moving_section.spacing != ref.spacing:
            raise ValueError("moving and targets must share a grid when no init is given")
        moving_w = moving_section
    _require_nonconstant(moving_w)
    field = _demons(moving_w, active, params, trace=trace)
    if min(field.grid_shape) >= 2 and _min_jacobian(field.vectors, field.spacing) <= 0:
        raise RuntimeError("diffeomorphism violated in returned field")
    return field


def _require_nonconstant(img) -> None:
    arr = _image_arr(img)
    if arr.min() == arr.max():
        raise RuntimeError("degenerate image: constant intensities after pre-warp")
