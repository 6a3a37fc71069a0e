"""Iterative slice-to-volume reconstruction and template mapping.

Stage 1 rebuilds the backlit stack against the blockface reference: iteration
0 registers each section to its blockface counterpart, later iterations
optimize the weighted multi-term objective against the previous iteration's
(smoothed) stack and its slice neighbors, switching from affine to deformable
increments per the iteration schedule. Stage 2 reuses the backlit chains to
reconstruct each gene's ISH stack. Stage 3 maps the reconstructed volume onto
a reference template with a 3D affine followed by a 3D deformable step.

Within an iteration, slices are independent (targets come from the previous
iteration's frozen stack), so they may be fanned out over a process pool;
results are gathered in slice order to keep outputs byte-identical for any
worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .affine_reg import (
    AffineRegParams,
    RegistrationError,
    WeightedTargets,
    com_align,
    eval_multiterm,
    register_affine,
    register_affine_multiterm,
)
from .core_image import Image3D, StackManifest, gaussian_smooth_3d
from .deformable_reg import DeformableRegParams, register_deformable, register_deformable_multiterm
from .metrics import nmi
from .transforms import Affine, TransformChain, as_chain, compose, warp_image

log = logging.getLogger(__name__)

DEFAULT_SIGMA = 3.0  # stack smoothing width, voxels


@dataclass(frozen=True)
class Phase:
    start: int
    end: int
    kind: str                 # "affine" | "deformable"
    weights: tuple            # (a, b, c); c applies to both neighbors
    tk_policy: object = "previous"  # "previous" or a frozen iteration index

    def __post_init__(self):
        if self.kind not in ("affine", "deformable"):
            raise ValueError(f"unknown phase kind {self.kind!r}")
        if self.start > self.end:
            raise ValueError("phase range is empty")
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise ValueError("weights must be three values >= 0")
        if not (self.tk_policy == "previous" or isinstance(self.tk_policy, int)):
            raise ValueError("tk_policy must be 'previous' or an iteration index")


@dataclass(frozen=True)
class IterationSchedule:
    phases: tuple

    def __post_init__(self):
        phases = tuple(self.phases)
        if not phases or phases[0].start != 0:
            raise ValueError("schedule must start at iteration 0")
        for a, b in zip(phases, phases[1:]):
            if b.start != a.end + 1:
                raise ValueError("phase iteration ranges must be contiguous")
        object.__setattr__(self, "phases", phases)

    @property
    def total_iterations(self) -> int:
        return self.phases[-1].end + 1

    def phase_for(self, iteration: int) -> Phase:
        for p in self.phases:
            if p.start <= iteration <= p.end:
                return p
        raise ValueError(f"iteration {iteration} outside schedule")

    def frozen_iterations(self) -> set:
        return {p.tk_policy for p in self.phases if isinstance(p.tk_policy, int)}

    @staticmethod
    def default() -> "IterationSchedule":
        return IterationSchedule(
            (
                Phase(0, 0, "affine", (1.0, 0.0, 0.0), "previous"),
                Phase(1, 2, "affine", (1.0, 0.5, 0.5), "previous"),
                Phase(3, 6, "deformable", (0.0, 1.0, 0.25), 2),
            )
        )


@dataclass
class ReconstructionState:
    iteration: int
    indices: list
    chains: list                  # one TransformChain per slice
    stack: Image3D
    smoothed: Image3D | None
    history: list                 # {iteration, slice, phase, objective_before, objective_after}
    sections: list                # raw moving sections (backlit)
    warnings: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# per-slice worker tasks (top-level so a process pool can pickle them)


def _affine_task(args):
    moving, tk, targets, params, iteration, j = args
    try:
        before = eval_multiterm(moving, Affine.identity(2), tk, targets, params.bins)
        res = register_affine_multiterm(moving, tk, targets, params)
        return {
            "slice": j,
            "iteration": iteration,
            "kind": "affine",
            "increment": res.transform,
            "before": before,
            "after": res.objective,
        }
    except (RegistrationError, ValueError, RuntimeError) as exc:
        return {"slice": j, "iteration": iteration, "kind": "affine", "error": str(exc)}


def _blend_mse(moving, chain, targets: WeightedTargets) -> float:
    active = targets.active()
    ref = active[0][0]
    wsum = sum(w for _, w in active)
    blend = sum(t.pixels * w for t, w in active) / wsum
    warped = warp_image(moving, chain, ref.pixels.shape, ref.spacing)
    return float(np.mean((warped.pixels - blend) ** 2))


def _deformable_task(args):
    moving, tk, targets, params, iteration, j = args
    try:
        before = _blend_mse(moving, tk, targets)
        fld = register_deformable_multiterm(moving, tk, targets, params)
        after = _blend_mse(moving, compose(tk, fld), targets)
        if after > before:  # demons descends per level; never regress the full-res energy
            return {
                "slice": j,
                "iteration": iteration,
                "kind": "deformable",
                "increment": None,
                "before": before,
                "after": before,
            }
        return {
            "slice": j,
            "iteration": iteration,
            "kind": "deformable",
            "increment": fld,
            "before": before,
            "after": after,
        }
    except (RegistrationError, ValueError, RuntimeError) as exc:
        return {"slice": j, "iteration": iteration, "kind": "deformable", "error": str(exc)}


def _iter0_task(args):
    moving, fixed, params, j = args
    try:
        init = com_align(moving, fixed)
        targets = WeightedTargets(((fixed, 1.0),))
        before = eval_multiterm(moving, Affine.identity(2), init, targets, params.bins)
        res = register_affine(moving, fixed, params, init)
        return {
            "slice": j,
            "iteration": 0,
            "kind": "affine",
            "chain": as_chain(res.transform),
            "before": before,
            "after": res.objective,
        }
    except (RegistrationError, ValueError, RuntimeError) as exc:
        return {"slice": j, "iteration": 0, "kind": "affine", "error": str(exc)}


def _run_tasks(task_fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [task_fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        chunk = max(1, len(tasks) // (workers * 4))
        return list(ex.map(task_fn, tasks, chunksize=chunk))


# ---------------------------------------------------------------------------
# target assembly


def _multiterm_targets(prev: Image3D, smoothed: Image3D | None, j: int, weights: tuple) -> WeightedTargets:
    a, b, c = weights
    n = prev.depth
    raw = [
        (smoothed.slice2d(j) if a > 0 else None, a),
        (prev.slice2d(j), b),
        (prev.slice2d(j - 1) if j - 1 >= 0 else None, c),
        (prev.slice2d(j + 1) if j + 1 < n else None, c),
    ]
    present = [(img, w) for img, w in raw if w > 0 and img is not None]
    missing = sum(w for img, w in raw if w > 0 and img is None)
    if not present:
        raise ValueError("all multi-term targets are missing")
    factor = (sum(w for _, w in present) + missing) / sum(w for _, w in present)
    return WeightedTargets(tuple((img, w * factor) for img, w in present))


def render_stack(sections, chains, out_shape: tuple, out_spacing: tuple, slice_thickness: float) -> Image3D:
    """Warp every section onto the common 2D grid and stack along z."""
    if isinstance(sections, StackManifest):
        man = sections
        mods = {e.modality for e in man.entries}
        mod = "backlit" if "backlit" in mods else next(iter(mods))
        sections = [man.load_image(i, mod) for i in man.indices(mod)]
    if len(sections) != len(chains):
        raise ValueError("need exactly one chain per slice")
    planes = [
        warp_image(sec, as_chain(ch, 2), out_shape, out_spacing).pixels
        for sec, ch in zip(sections, chains)
    ]
    voxels = np.stack(planes, axis=0)
    return Image3D(voxels, (out_spacing[0], out_spacing[1], slice_thickness))


# ---------------------------------------------------------------------------
# stage 1: backlit reconstruction


def reconstruct_backlit(
    bl: StackManifest,
    bf: StackManifest,
    schedule: IterationSchedule | None = None,
    sigma: float = DEFAULT_SIGMA,
    affine_params: AffineRegParams | None = None,
    deformable_params: DeformableRegParams | None = None,
    workers: int = 1,
) -> ReconstructionState:
    """Run the full iterative stack alignment of backlit sections to blockface."""
    schedule = schedule or IterationSchedule.default()
    affine_params = affine_params or AffineRegParams()
    deformable_params = deformable_params or DeformableRegParams()
    if sigma < 0:
        raise ValueError("sigma must be >= 0")

    bl_idx = bl.indices("backlit")
    bf_idx = bf.indices("blockface")
    if bl_idx != bf_idx:
        missing = sorted(set(bl_idx) ^ set(bf_idx))
        raise ValueError(f"backlit/blockface slice indices differ: {missing}")
    if not bl_idx:
        raise ValueError("empty manifests")

    sections = [bl.load_image(i, "backlit") for i in bl_idx]
    fixed = [bf.load_image(i, "blockface") for i in bf_idx]
    shape = fixed[0].pixels.shape
    for f in fixed:
        if f.pixels.shape != shape:
            raise ValueError("blockface sections must share one grid")
    spacing = fixed[0].spacing
    n = len(sections)

    history: list = []
    warnings: list = []
    chains: list = [as_chain(Affine.identity(2)) for _ in range(n)]
    frozen: dict = {}
    needed_frozen = schedule.frozen_iterations()

    # iteration 0: per-slice affine against the blockface counterpart
    phase0 = schedule.phase_for(0)
    if phase0.kind != "affine":
        raise ValueError("iteration 0 must be an affine phase")
    results = _run_tasks(_iter0_task, [(sections[j], fixed[j], affine_params, j) for j in range(n)], workers)
    for r in results:
        j = r["slice"]
        if "error" in r:
            warnings.append(f"slice {j} iteration 0: {r['error']}")
            log.warning("slice %d iteration 0 failed, keeping identity: %s", j, r["error"])
            history.append(_row(0, j, "affine", np.nan, np.nan))
            continue
        chains[j] = r["chain"]
        history.append(_row(0, j, "affine", r["before"], r["after"]))
    stack = render_stack(sections, chains, shape, spacing, bl.slice_thickness)
    smoothed = None
    if 0 in needed_frozen:
        frozen[0] = list(chains)

    for i in range(1, schedule.total_iterations):
        phase = schedule.phase_for(i)
        a = phase.weights[0]
        smoothed = gaussian_smooth_3d(stack, sigma) if a > 0 else None
        tasks = []
        for j in range(n):
            tk = chains[j] if phase.tk_policy == "previous" else frozen[phase.tk_policy][j]
            targets = _multiterm_targets(stack, smoothed, j, phase.weights)
            params = affine_params if phase.kind == "affine" else deformable_params
            tasks.append((sections[j], tk, targets, params, i, j))
        task_fn = _affine_task if phase.kind == "affine" else _deformable_task
        results = _run_tasks(task_fn, tasks, workers)
        for r in results:
            j = r["slice"]
            if "error" in r:
                warnings.append(f"slice {j} iteration {i}: {r['error']}")
                log.warning("slice %d iteration %d failed, keeping previous chain: %s", j, i, r["error"])
                history.append(_row(i, j, phase.kind, np.nan, np.nan))
                continue
            tk = chains[j] if phase.tk_policy == "previous" else frozen[phase.tk_policy][j]
            if phase.kind == "affine":
                chains[j] = compose(r["increment"], tk)
            elif r["increment"] is not None:
                chains[j] = compose(tk, r["increment"])
            else:
                chains[j] = as_chain(tk)
            history.append(_row(i, j, phase.kind, r["before"], r["after"]))
        stack = render_stack(sections, chains, shape, spacing, bl.slice_thickness)
        if i in needed_frozen:
            frozen[i] = list(chains)

    return ReconstructionState(
        iteration=schedule.total_iterations - 1,
        indices=bl_idx,
        chains=chains,
        stack=stack,
        smoothed=smoothed,
        history=history,
        sections=sections,
        warnings=warnings,
    )


def _row(iteration, j, phase, before, after) -> dict:
    return {
        "iteration": int(iteration),
        "slice": int(j),
        "phase": phase,
        "objective_before": float(before),
        "objective_after": float(after),
    }


# ---------------------------------------------------------------------------
# stage 2: ISH reconstruction


def reconstruct_ish(
    ish: StackManifest,
    recon: ReconstructionState,
    affine_params: AffineRegParams | None = None,
    deformable_params: DeformableRegParams | None = None,
    weights: tuple = (0.0, 1.0, 0.25),
    sigma: float = DEFAULT_SIGMA,
    workers: int = 1,
) -> tuple[Image3D, list, list]:
    """Per-slice affine ISH -> backlit pre-alignment, then exactly two
    deformable multi-term iterations against the ISH stack itself.

    Returns (volume, per-slice chains, history rows).
    """
    affine_params = affine_params or AffineRegParams()
    deformable_params = deformable_params or DeformableRegParams()
    ish_idx = ish.indices("ish")
    missing = sorted(set(ish_idx) - set(recon.indices))
    if missing:
        raise ValueError(f"ISH sections without backlit counterpart: {missing}")
    pos = {idx: k for k, idx in enumerate(recon.indices)}
    ish_secs = [ish.load_image(i, "ish") for i in ish_idx]
    # stage 1: pre-align each ISH section to its raw backlit counterpart,
    # then ride on that slice's reconstruction chain
    tasks = []
    for k, idx in enumerate(ish_idx):
        bl_sec = recon.sections[pos[idx]]
        tasks.append((ish_secs[k], bl_sec, affine_params, k))
    results = _run_tasks(_iter0_task, tasks, workers)
    history: list = []
    chains: list = []
    for r in sorted(results, key=lambda r: r["slice"]):
        k = r["slice"]
        if "error" in r:
            raise RegistrationError(f"ISH pre-alignment failed for slice {ish_idx[k]}: {r['error']}")
        pre = r["chain"]  # backlit-section grid -> ISH section
        chains.append(compose(pre, recon.chains[pos[ish_idx[k]]]))
        history.append(_row(0, ish_idx[k], "ish-affine", r["before"], r["after"]))

    shape = recon.stack.voxels.shape[1:]
    spacing = recon.stack.spacing[:2]
    frozen = list(chains)
    stack = render_stack(ish_secs, chains, shape, spacing, ish.slice_thickness)
    for it in (1, 2):
        smoothed = gaussian_smooth_3d(stack, sigma) if weights[0] > 0 else None
        tasks = []
        for k in range(len(ish_secs)):
            targets = _multiterm_targets(stack, smoothed, k, weights)
            tasks.append((ish_secs[k], frozen[k], targets, deformable_params, it, k))
        results = _run_tasks(_deformable_task, tasks, workers)
        for r in results:
            k = r["slice"]
            if "error" in r:
                raise RegistrationError(
                    f"ISH deformable iteration {it} failed for slice {ish_idx[k]}: {r['error']}"
                )
            if r["increment"] is not None:
                chains[k] = compose(frozen[k], r["increment"])
            else:
                chains[k] = as_chain(frozen[k])
            history.append(_row(it, ish_idx[k], "ish-deformable", r["before"], r["after"]))
        stack = render_stack(ish_secs, chains, shape, spacing, ish.slice_thickness)
    return stack, chains, history


# ---------------------------------------------------------------------------
# stage 3: template mapping


def map_to_template(
    recon_volume: Image3D,
    template: Image3D,
    affine_params: AffineRegParams | None = None,
    deformable_params: DeformableRegParams | None = None,
) -> TransformChain:
    """3D affine followed by 3D deformable registration onto the template.

    The returned chain is [affine, field]: the field lives on the template
    grid and is applied to template points first.
    """
    affine_params = affine_params or AffineRegParams()
    deformable_params = deformable_params or DeformableRegParams()
    for name, vol in (("reconstruction", recon_volume), ("template", template)):
        if vol.voxels.min() == vol.voxels.max():
            raise RegistrationError(f"{name} volume is constant")
    init = com_align(recon_volume, template)
    ares = register_affine(recon_volume, template, affine_params, init)
    affine = ares.transform
    fld = register_deformable(recon_volume, template, deformable_params, as_chain(affine))
    chain = TransformChain((affine, fld))
    shape, sp = template.voxels.shape, template.spacing
    nmi_affine = nmi(template, warp_image(recon_volume, as_chain(affine), shape, sp))
    nmi_full = nmi(template, warp_image(recon_volume, chain, shape, sp))
    # the deformable stage must improve on the affine unless the affine already
    # matched perfectly and left it nothing to do
    if nmi_full < nmi_affine and not np.allclose(fld.vectors, 0.0):
        raise RegistrationError(
            f"deformable stage did not improve NMI ({nmi_full:.6f} < {nmi_affine:.6f})"
        )
    return chain
