"""Command-line pipeline: reconstruct, map-template, evaluate, phantom, segment-import.

Configuration comes from a YAML file plus flag overrides (flags win); every run
writes a resolved-config snapshot with the seed and thread count explicit so it
can be reproduced bit-exactly. Exit codes: 0 success, 1 hard error, 2 success
with per-item warnings.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .affine_reg import AffineRegParams
from .core_image import Image2D, Image3D, StackManifest, load_volume, save_volume
from .deformable_reg import DeformableRegParams
from .landmark_eval import agreement_report, load_landmarks_csv
from .metrics import dice, dice_report_row
from .phantom import PhantomSpec, generate
from .stack_recon import (
    IterationSchedule,
    Phase,
    map_to_template,
    reconstruct_backlit,
    reconstruct_ish,
)
from .transforms import load_chain, save_chain, warp_image

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_WARNINGS = 2


@dataclasses.dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 0  # 0 = use all available cores
    output_dir: str = "out"
    sigma: float = 3.0
    invert_on_load: bool = False
    schedule: IterationSchedule = dataclasses.field(default_factory=IterationSchedule.default)
    affine: AffineRegParams = dataclasses.field(default_factory=AffineRegParams)
    deformable: DeformableRegParams = dataclasses.field(default_factory=DeformableRegParams)
    paths: dict = dataclasses.field(default_factory=dict)
    phantom: dict = dataclasses.field(default_factory=dict)
    evaluate: dict = dataclasses.field(default_factory=dict)
    segment_import: dict = dataclasses.field(default_factory=dict)

    @property
    def workers(self) -> int:
        if self.threads > 0:
            return self.threads
        env = os.environ.get("HISTOSTACK_THREADS")
        if env and int(env) > 0:
            return int(env)
        return os.cpu_count() or 1


def _schedule_from_dict(doc) -> IterationSchedule:
    if doc in (None, "default"):
        return IterationSchedule.default()
    phases = []
    for p in doc["phases"]:
        tk = p.get("tk", "previous")
        phases.append(
            Phase(int(p["start"]), int(p["end"]), p["kind"], tuple(p["weights"]), tk)
        )
    return IterationSchedule(tuple(phases))


def _schedule_to_dict(s: IterationSchedule) -> dict:
    return {
        "phases": [
            {
                "start": p.start,
                "end": p.end,
                "kind": p.kind,
                "weights": list(p.weights),
                "tk": p.tk_policy,
            }
            for p in s.phases
        ]
    }


def load_config(path: Path | str | None, overrides: dict | None = None) -> PipelineConfig:
    doc = {}
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    doc.update(overrides)
    cfg = PipelineConfig()
    cfg.seed = int(doc.get("seed", cfg.seed))
    cfg.threads = int(doc.get("threads", cfg.threads))
    cfg.output_dir = str(doc.get("output_dir", cfg.output_dir))
    cfg.sigma = float(doc.get("sigma", cfg.sigma))
    cfg.invert_on_load = bool(doc.get("invert_on_load", cfg.invert_on_load))
    cfg.schedule = _schedule_from_dict(doc.get("schedule"))
    cfg.affine = AffineRegParams(**doc.get("affine", {}))
    cfg.deformable = DeformableRegParams(**doc.get("deformable", {}))
    cfg.paths = dict(doc.get("paths", {}))
    cfg.phantom = dict(doc.get("phantom", {}))
    cfg.evaluate = dict(doc.get("evaluate", {}))
    cfg.segment_import = dict(doc.get("segment_import", {}))
    return cfg


def write_snapshot(cfg: PipelineConfig, out_dir: Path) -> None:
    doc = {
        "seed": cfg.seed,
        "threads": cfg.workers,
        "output_dir": cfg.output_dir,
        "sigma": cfg.sigma,
        "invert_on_load": cfg.invert_on_load,
        "schedule": _schedule_to_dict(cfg.schedule),
        "affine": dataclasses.asdict(cfg.affine),
        "deformable": dataclasses.asdict(cfg.deformable),
        "paths": cfg.paths,
        "phantom": cfg.phantom,
        "evaluate": cfg.evaluate,
        "segment_import": cfg.segment_import,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


def _require_path(cfg_paths: dict, key: str) -> Path:
    if key not in cfg_paths:
        raise FileNotFoundError(f"config paths.{key} is not set")
    p = Path(cfg_paths[key])
    if not p.exists():
        raise FileNotFoundError(f"config paths.{key}: no such file: {p}")
    return p


def _write_history(rows: list, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=lambda r: (r["iteration"], r["slice"], r["phase"]))
    with path.open("w") as fh:
        for r in ordered:
            fh.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_reconstruct(cfg: PipelineConfig, dry_run: bool = False) -> int:
    out = Path(cfg.output_dir)
    bf_path = _require_path(cfg.paths, "blockface_manifest")
    bl_path = _require_path(cfg.paths, "backlit_manifest")
    ish_paths = {
        gene: _require_path({"m": p}, "m")
        for gene, p in (cfg.paths.get("ish_manifests") or {}).items()
    }
    if dry_run:
        log.info("dry run: config valid, nothing written")
        return EXIT_OK
    write_snapshot(cfg, out)
    bf = StackManifest.from_json(bf_path)
    bl = StackManifest.from_json(bl_path)
    state = reconstruct_backlit(
        bl,
        bf,
        schedule=cfg.schedule,
        sigma=cfg.sigma,
        affine_params=cfg.affine,
        deformable_params=cfg.deformable,
        workers=cfg.workers,
    )
    recon_dir = out / "recon"
    save_volume(state.stack, recon_dir / "backlit_volume.json")
    for j, chain in zip(state.indices, state.chains):
        save_chain(chain, recon_dir / "chains_backlit" / f"sl_{j:04d}.chain.json")
    history = list(state.history)
    for gene, mpath in ish_paths.items():
        ish = StackManifest.from_json(mpath)
        vol, chains, hist = reconstruct_ish(
            ish,
            state,
            affine_params=cfg.affine,
            deformable_params=cfg.deformable,
            sigma=cfg.sigma,
            workers=cfg.workers,
        )
        save_volume(vol, recon_dir / f"ish_{gene}_volume.json")
        for j, chain in zip(ish.indices("ish"), chains):
            save_chain(chain, recon_dir / f"chains_ish_{gene}" / f"sl_{j:04d}.chain.json")
        for r in hist:
            r["phase"] = f"{r['phase']}:{gene}"
        history.extend(hist)
    _write_history(history, recon_dir / "iteration_log.jsonl")
    if state.warnings:
        for w in state.warnings:
            log.warning("%s", w)
        return EXIT_WARNINGS
    return EXIT_OK


def cmd_map_template(cfg: PipelineConfig, dry_run: bool = False) -> int:
    out = Path(cfg.output_dir)
    template_path = _require_path(cfg.paths, "template_volume")
    recon_vol_path = out / "recon" / "backlit_volume.json"
    if not recon_vol_path.exists():
        raise FileNotFoundError(f"reconstruction output missing: {recon_vol_path}")
    if dry_run:
        return EXIT_OK
    write_snapshot(cfg, out)
    template = load_volume(template_path)
    recon = load_volume(recon_vol_path)
    chain = map_to_template(recon, template, cfg.affine, cfg.deformable)
    tdir = out / "template"
    save_chain(chain, tdir / "template_chain.json")
    save_volume(
        warp_image(recon, chain, template.voxels.shape, template.spacing),
        tdir / "backlit_in_template.json",
    )
    for gene in (cfg.paths.get("ish_manifests") or {}):
        vpath = out / "recon" / f"ish_{gene}_volume.json"
        if not vpath.exists():
            raise FileNotFoundError(f"reconstruction output missing: {vpath}")
        vol = load_volume(vpath)
        save_volume(
            warp_image(vol, chain, template.voxels.shape, template.spacing),
            tdir / f"ish_{gene}_in_template.json",
        )
    return EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, dry_run: bool = False) -> int:
    out = Path(cfg.output_dir)
    rows_cfg = cfg.evaluate.get("dice_rows", [])
    lm_cfg = cfg.evaluate.get("landmarks", {})
    if not rows_cfg and not lm_cfg:
        raise ValueError("evaluate: neither dice_rows nor landmarks configured")
    if dry_run:
        return EXIT_OK
    write_snapshot(cfg, out)
    edir = out / "evaluate"
    edir.mkdir(parents=True, exist_ok=True)
    warned = False

    if rows_cfg:
        report = []
        text_rows = []
        for row in rows_cfg:
            a_man = StackManifest.from_json(_require_path(row, "a_manifest"))
            b_man = StackManifest.from_json(_require_path(row, "b_manifest"))
            idx = sorted(set(a_man.indices("mask")) & set(b_man.indices("mask")))
            scores = []
            for j in idx:
                ma, mb = a_man.load_mask(j), b_man.load_mask(j)
                if ma.bits.shape != mb.bits.shape:
                    log.warning(
                        "%s: slice %d mask dims differ (%s vs %s), excluded",
                        row["name"], j, ma.bits.shape, mb.bits.shape,
                    )
                    warned = True
                    continue
                scores.append(dice(ma, mb))
            if not scores:
                log.warning("%s: no comparable mask pairs", row["name"])
                warned = True
                continue
            mean, sd = float(np.mean(scores)), float(np.std(scores))
            report.append({"name": row["name"], "mean": mean, "sd": sd})
            text_rows.append(dice_report_row(row["name"], mean, sd))
        (edir / "dice_report.json").write_text(json.dumps(report, indent=2) + "\n")
        (edir / "dice_report.txt").write_text("\n".join(text_rows) + "\n")

    if lm_cfg:
        manual_sets = load_landmarks_csv(_require_path(lm_cfg, "manual_csv"))
        auto_sets = load_landmarks_csv(_require_path(lm_cfg, "auto_csv"))
        rep = agreement_report(manual_sets, auto_sets[0])
        rep.to_json(edir / "landmark_report.json")
        (edir / "landmark_report.txt").write_text(rep.text_table() + "\n")

    return EXIT_WARNINGS if warned else EXIT_OK


def cmd_phantom(cfg: PipelineConfig, dry_run: bool = False) -> int:
    out = Path(cfg.output_dir)
    spec_kwargs = dict(cfg.phantom)
    spec_kwargs.setdefault("seed", cfg.seed)
    for key in ("dims", "genes", "spacing_um"):
        if key in spec_kwargs and isinstance(spec_kwargs[key], list):
            spec_kwargs[key] = tuple(spec_kwargs[key])
    spec = PhantomSpec(**spec_kwargs)
    if dry_run:
        return EXIT_OK
    write_snapshot(cfg, out)
    generate(spec, out / "phantom")
    return EXIT_OK


def cmd_segment_import(cfg: PipelineConfig, dry_run: bool = False) -> int:
    out = Path(cfg.output_dir)
    si = cfg.segment_import
    mask_path = _require_path(si, "mask_manifest")
    gene = si.get("gene")
    if not gene:
        raise ValueError("segment_import.gene is not set")
    ish_path = _require_path(cfg.paths.get("ish_manifests", {}), gene)
    chain_dir = out / "recon" / f"chains_ish_{gene}"
    template_chain_path = out / "template" / "template_chain.json"
    for p in (chain_dir, template_chain_path):
        if not p.exists():
            raise FileNotFoundError(f"pipeline output missing: {p}")
    if dry_run:
        return EXIT_OK
    write_snapshot(cfg, out)

    masks = StackManifest.from_json(mask_path)
    ish = StackManifest.from_json(ish_path)
    recon_header = json.loads((out / "recon" / "backlit_volume.json").read_text())
    w, h, d = recon_header["dims"]
    sx, sy, sz = recon_header["spacing_um"]

    bad = []
    mask_imgs = {}
    for j in ish.indices("ish"):
        try:
            m = masks.load_mask(j)
        except KeyError:
            bad.append(j)
            continue
        sec = ish.load_image(j, "ish")
        if m.bits.shape != sec.pixels.shape:
            bad.append(j)
            continue
        mask_imgs[j] = m
    if bad:
        raise ValueError(f"segment-import: missing or mismatched masks for slices {bad}")

    planes = []
    for j in ish.indices("ish"):
        chain = load_chain(chain_dir / f"sl_{j:04d}.chain.json")
        mimg = Image2D(mask_imgs[j].bits.astype(np.float64), masks.spacing)
        planes.append(warp_image(mimg, chain, (h, w), (sx, sy)).pixels)
    recon_mask = Image3D(np.stack(planes, axis=0), (sx, sy, sz))

    template = load_volume(_require_path(cfg.paths, "template_volume"))
    tchain = load_chain(template_chain_path)
    in_template = warp_image(recon_mask, tchain, template.voxels.shape, template.spacing)
    binary = Image3D((in_template.voxels > 0.5).astype(np.float64), template.spacing)
    save_volume(binary, out / "segment" / f"mask_{gene}_template.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histostack", description=__doc__)
    parser.add_argument("--config", help="YAML pipeline configuration")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--threads", type=int, help="override worker count (0 = all cores)")
    parser.add_argument("--output-dir", help="override output directory")
    parser.add_argument("--dry-run", action="store_true", help="validate config, write nothing")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("reconstruct", "map-template", "evaluate", "phantom", "segment-import"):
        sub.add_parser(name)
    return parser


_COMMANDS = {
    "reconstruct": cmd_reconstruct,
    "map-template": cmd_map_template,
    "evaluate": cmd_evaluate,
    "phantom": cmd_phantom,
    "segment-import": cmd_segment_import,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(
            args.config,
            {"seed": args.seed, "threads": args.threads, "output_dir": args.output_dir},
        )
        return _COMMANDS[args.command](cfg, dry_run=args.dry_run)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
