"""Landmark sets, mapping through transform chains, and displacement reports.

Landmarks are named physical-space points (one or two 3-vectors in um per
name). Agreement between annotators and the automated mapping is reported in
units of 100 um, sorted by displacement.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .transforms import TransformChain, apply

log = logging.getLogger(__name__)

# canonical template set: 7 landmarks, 10 points in total
CANONICAL_LANDMARKS = (
    ("anterior_commissure", 1),
    ("anterior_thalamus", 1),
    ("midline", 1),
    ("cc", 1),
    ("mb", 2),
    ("stn", 2),
    ("alic_ac", 2),
)

MODE_MANUAL_BEST = "manual-vs-manual best"
MODE_AUTO_MEDIAN = "manual-vs-auto median"


@dataclass(frozen=True)
class LandmarkSet:
    annotator: str
    entries: tuple  # ((name, (point, ...)), ...) with 3-vector um points

    def __post_init__(self):
        norm = []
        seen = set()
        for name, pts in self.entries:
            if name in seen:
                raise ValueError(f"duplicate landmark name {name!r}")
            seen.add(name)
            pts = tuple(np.asarray(p, dtype=np.float64).reshape(3) for p in pts)
            if not 1 <= len(pts) <= 2:
                raise ValueError(f"landmark {name!r} needs 1 or 2 points")
            for p in pts:
                p.setflags(write=False)
            norm.append((name, pts))
        object.__setattr__(self, "entries", tuple(norm))

    def names(self) -> list:
        return [name for name, _ in self.entries]

    def points(self, name: str) -> tuple:
        for n, pts in self.entries:
            if n == name:
                return pts
        raise KeyError(name)

    @property
    def total_points(self) -> int:
        return sum(len(pts) for _, pts in self.entries)


def is_canonical(lm: LandmarkSet) -> bool:
    """True when the set matches the template landmark names and point counts."""
    got = {name: len(pts) for name, pts in lm.entries}
    return got == dict(CANONICAL_LANDMARKS)


def map_landmarks(lm: LandmarkSet, chain: TransformChain, bounds=None) -> LandmarkSet:
    """Push every point through the chain; two-point landmarks map pointwise.

    ``bounds`` is an optional ((w, h, d), (sx, sy, sz)) pair; mapped points
    falling outside are logged and retained.
    """
    if chain.dimension != 3:
        raise ValueError("landmark mapping needs a 3D chain")
    out = []
    for name, pts in lm.entries:
        mapped = tuple(apply(chain, p) for p in pts)
        if bounds is not None:
            dims, spacing = bounds
            hi = [(n - 1) * s for n, s in zip(dims, spacing)]
            for p in mapped:
                if (p < 0).any() or (p > hi).any():
                    log.warning("landmark %s mapped outside volume bounds: %s", name, p)
        out.append((name, mapped))
    return LandmarkSet(lm.annotator, tuple(out))


def pairwise_displacement(a: LandmarkSet, b: LandmarkSet) -> dict:
    """Per-landmark displacement in 100 um units (mean over two-point landmarks)."""
    if a.names() != b.names():
        raise ValueError("landmark names differ between sets")
    out = {}
    for name, pts_a in a.entries:
        pts_b = b.points(name)
        if len(pts_a) != len(pts_b):
            raise ValueError(f"landmark {name!r} point counts differ")
        dists = [float(np.linalg.norm(pa - pb)) for pa, pb in zip(pts_a, pts_b)]
        out[name] = float(np.mean(dists)) / 100.0
    return out


@dataclass(frozen=True)
class DisplacementReport:
    """Sorted per-landmark scores for both comparison modes, 100 um units."""

    manual_best: tuple   # ((landmark, displacement), ...) ascending
    auto_median: tuple

    def rows(self) -> list:
        rows = [
            {"landmark": n, "mode": MODE_MANUAL_BEST, "displacement_100um": v}
            for n, v in self.manual_best
        ]
        rows += [
            {"landmark": n, "mode": MODE_AUTO_MEDIAN, "displacement_100um": v}
            for n, v in self.auto_median
        ]
        return rows

    def to_json(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.rows(), indent=2) + "\n")

    def text_table(self) -> str:
        lines = ["landmark displacements (100 um units, sorted)"]
        for mode, pairs in ((MODE_MANUAL_BEST, self.manual_best), (MODE_AUTO_MEDIAN, self.auto_median)):
            lines.append(f"[{mode}]")
            for name, val in pairs:
                lines.append(f"  {name}: {val:.4f}")
        return "\n".join(lines)


def agreement_report(manual: list, auto: LandmarkSet) -> DisplacementReport:
    """Best human-pair agreement vs median human-to-automation displacement.

    Per landmark: the manual score is the minimum over annotator pairs, the
    automation score the median over annotators of the distance to ``auto``.
    """
    if len(manual) < 2:
        raise ValueError("need at least 2 manual landmark sets")
    names = manual[0].names()
    pair_tables = {}
    for i in range(len(manual)):
        for j in range(i + 1, len(manual)):
            pair_tables[(i, j)] = pairwise_displacement(manual[i], manual[j])
    auto_tables = [pairwise_displacement(m, auto) for m in manual]

    manual_best = []
    auto_median = []
    for name in names:
        manual_best.append((name, min(t[name] for t in pair_tables.values())))
        auto_median.append((name, float(np.median([t[name] for t in auto_tables]))))
    manual_best.sort(key=lambda kv: (kv[1], kv[0]))
    auto_median.sort(key=lambda kv: (kv[1], kv[0]))
    return DisplacementReport(tuple(manual_best), tuple(auto_median))


# ---------------------------------------------------------------------------
# CSV I/O: header "name,point_index,x_um,y_um,z_um,annotator"


def save_landmarks_csv(sets: list, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "point_index", "x_um", "y_um", "z_um", "annotator"])
        for lm in sets:
            for name, pts in lm.entries:
                for k, p in enumerate(pts):
                    writer.writerow(
                        [name, k, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), lm.annotator]
                    )


def load_landmarks_csv(path: Path | str) -> list:
    """Read landmark sets grouped by annotator (order of first appearance)."""
    by_annotator: dict = {}
    order = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            ann = row["annotator"]
            if ann not in by_annotator:
                by_annotator[ann] = {}
                order.append(ann)
            pts = by_annotator[ann].setdefault(row["name"], {})
            pts[int(row["point_index"])] = np.array(
                [float(row["x_um"]), float(row["y_um"]), float(row["z_um"])]
            )
    sets = []
    for ann in order:
        entries = []
        for name, pts in by_annotator[ann].items():
            entries.append((name, tuple(pts[k] for k in sorted(pts))))
        sets.append(LandmarkSet(ann, tuple(entries)))
    return sets
