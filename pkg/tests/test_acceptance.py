"""Acceptance suite: one test per acceptance criterion, at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one [ACCEPTANCE] line
per criterion. The stack-recovery run uses the full default iteration schedule
on the 128x128x60 phantom and is the slow part of the suite.
"""

import csv
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

import histostack as hs
from histostack.cli import main
from histostack.transforms import as_chain

from conftest import blob_image, corner_error_px
from test_cli import tree_bytes, write_config
from test_landmark_eval import brute_force_report, make_set
from test_metrics import info_nce_oracle, nmi_oracle

WORKERS = min(4, os.cpu_count() or 1)
FIXTURES = Path(__file__).parent / "fixtures"


def report(name: str, detail: str) -> None:
    print(f"[ACCEPTANCE] {name}: PASS ({detail})")


@pytest.fixture(scope="module")
def big_phantom(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom_accept")
    spec = hs.PhantomSpec(
        seed=2024,
        dims=(128, 128, 60),
        max_translation_px=15.0,
        max_rotation_deg=10.0,
    )
    manifests, truth = hs.generate(spec, out)
    return spec, manifests, truth


@pytest.fixture(scope="module")
def big_run(big_phantom):
    _, manifests, _ = big_phantom
    t0 = time.perf_counter()
    state = hs.reconstruct_backlit(
        manifests.backlit,
        manifests.blockface,
        schedule=hs.IterationSchedule.default(),
        sigma=3.0,
        workers=WORKERS,
    )
    elapsed = time.perf_counter() - t0
    return state, elapsed


def test_phantom_stack_recovery(big_phantom, big_run):
    spec, _, truth = big_phantom
    state, elapsed = big_run
    assert not state.warnings
    sx, sy = spec.spacing_um
    shape = (spec.dims[1], spec.dims[0])
    before, after = [], []
    identity = as_chain(hs.Affine.identity(2))
    for j, chain in enumerate(state.chains):
        t = truth.bl_truth_chains[j]
        before.append(corner_error_px(identity, t, shape, (sx, sy)))
        after.append(corner_error_px(chain, t, shape, (sx, sy)))
    mean_before, mean_after = float(np.mean(before)), float(np.mean(after))
    assert mean_before >= 10.0
    assert mean_after <= 2.0
    assert elapsed <= 600.0
    report(
        "phantom-stack-recovery",
        f"corner displacement {mean_before:.1f} px -> {mean_after:.2f} px in {elapsed:.0f}s "
        f"on {WORKERS} workers",
    )


def test_ish_stage_recovery(big_phantom, big_run):
    spec, manifests, truth = big_phantom
    state, _ = big_run
    gene = "gene0"
    vol, chains, hist = hs.reconstruct_ish(manifests.ish[gene], state, workers=WORKERS)
    # exactly 1 affine + 2 deformable iterations per slice
    counts = {}
    for row in hist:
        counts.setdefault(row["phase"], {}).setdefault(row["slice"], 0)
        counts[row["phase"]][row["slice"]] += 1
    assert set(counts["ish-affine"].values()) == {1}
    assert set(counts["ish-deformable"].values()) == {2}

    sx, sy = spec.spacing_um
    errs = []
    for _, pts in truth.landmarks.entries:
        for p in pts:
            j = int(round(p[2] / spec.slice_thickness_um))
            xy = p[:2]
            est = hs.apply(chains[j], xy)
            tru = hs.apply(truth.ish_truth_chains[gene][j], xy)
            errs.append(float(np.linalg.norm(est - tru)) / sx)
    mean_err = float(np.mean(errs))
    assert mean_err <= 2.5
    report(
        "ish-stage-recovery",
        f"mean landmark error {mean_err:.2f} px over {len(errs)} points, "
        "1 affine + 2 deformable iterations",
    )
    test_ish_stage_recovery.fields = [
        e for c in chains for e in c.elements if isinstance(e, hs.DisplacementField)
    ]


def similarity_3d(scale, angle_deg, center, translation):
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return hs.Affine(rot * scale, translation, center)


@pytest.fixture(scope="module")
def template_case():
    from conftest import blob_volume

    vol = blob_volume((32, 64, 64), n=24, seed=77)
    center = np.array([31.5, 31.5, 15.5])
    aff = similarity_3d(1.1, 5.0, center, np.array([1.5, -1.0, 0.5]))
    zs, ys, xs = np.mgrid[0:32.0, 0:64.0, 0:64.0]
    k = 2 * np.pi / 24.0
    warp = np.stack(
        [
            1.2 * np.sin(k * xs + 0.4) * np.sin(k * ys + 1.0),
            1.2 * np.sin(k * ys + 2.2) * np.sin(k * zs + 0.7),
            0.8 * np.sin(k * zs + 1.4) * np.sin(k * xs + 0.2),
        ],
        axis=-1,
    )
    truth_chain = hs.TransformChain((aff, hs.DisplacementField(warp, (1.0, 1.0, 1.0))))
    template = hs.warp_image(vol, truth_chain)
    return vol, template, truth_chain


def test_template_mapping(template_case):
    vol, template, truth_chain = template_case
    chain = hs.map_to_template(vol, template)
    assert isinstance(chain.elements[0], hs.Affine)
    assert isinstance(chain.elements[1], hs.DisplacementField)

    rng = np.random.default_rng(5)
    cand = np.argwhere(template.voxels > 0.35)
    cand = cand[(cand[:, 1] > 8) & (cand[:, 1] < 56) & (cand[:, 2] > 8) & (cand[:, 2] < 56)]
    probes = cand[rng.choice(len(cand), size=10, replace=False)][:, ::-1].astype(float)
    err = np.linalg.norm(hs.apply(chain, probes) - hs.apply(truth_chain, probes), axis=1)
    assert err.max() <= 1.5

    shape, sp = template.voxels.shape, template.spacing
    nmi_affine = hs.nmi(template, hs.warp_image(vol, as_chain(chain.elements[0]), shape, sp))
    nmi_full = hs.nmi(template, hs.warp_image(vol, chain, shape, sp))
    assert nmi_full > nmi_affine
    report(
        "template-mapping",
        f"max probe error {err.max():.2f} voxels; NMI affine {nmi_affine:.4f} -> full {nmi_full:.4f}",
    )
    test_template_mapping.field = chain.elements[1]


def test_metric_oracles():
    rng = np.random.default_rng(99)
    # Dice == brute force on 100 random pairs
    for _ in range(100):
        a = rng.random((12, 12)) > rng.uniform(0.3, 0.8)
        b = rng.random((12, 12)) > rng.uniform(0.3, 0.8)
        inter = int((a & b).sum())
        total = int(a.sum()) + int(b.sum())
        expect = 1.0 if total == 0 else 2.0 * inter / total
        assert hs.dice(a, b) == expect

    a, b = rng.random((32, 32)), rng.random((32, 32))
    assert abs(hs.nmi(a, b) - hs.nmi(b, a)) < 1e-12
    assert abs(hs.nmi(a, a) - 2.0) < 1e-12
    assert abs(hs.nmi(a, b, 16) - nmi_oracle(a, b, 16)) < 1e-10
    bins = 8
    labels = rng.integers(0, bins, 400)
    vals = (labels + 0.5) / bins
    perm = rng.permutation(bins)
    relabeled = (perm[labels] + 0.5) / bins
    other = rng.random(400)
    assert abs(hs.nmi(vals, other, bins) - hs.nmi(relabeled, other, bins)) < 1e-12

    v = rng.normal(size=(32, 64))
    loss, _ = hs.info_nce(hs.FeatureBatch(v, temperature=0.5))
    oracle, negatives = info_nce_oracle(v, 0.5)
    assert abs(loss - oracle) < 1e-10
    assert negatives == 30
    loss1, _ = hs.info_nce(hs.FeatureBatch(rng.normal(size=(2, 8)), temperature=1.0))
    assert loss1 == 0.0
    report(
        "metric-oracles",
        "dice==bruteforce x100, nmi symmetric/self=2/relabel-invariant, "
        "info_nce==oracle @1e-10, 30 negatives, N=1 loss 0",
    )


def test_diffeomorphism_guarantee(big_run, template_case):
    state, _ = big_run
    fields = []
    for chain in state.chains:
        fields += [e for e in chain.elements if isinstance(e, hs.DisplacementField)]
    fields += getattr(test_ish_stage_recovery, "fields", [])
    f = getattr(test_template_mapping, "field", None)
    if f is not None:
        fields.append(f)
    assert fields, "expected deformable fields from the phantom runs"
    min_dets = [hs.jacobian_min_det(f) for f in fields]
    assert min(min_dets) > 0

    img = blob_image((128, 128), n=14, seed=2)
    ys, xs = np.mgrid[0:128.0, 0:128.0]
    k = 2 * np.pi / 32
    truth = hs.DisplacementField(
        np.stack(
            [3.0 * np.sin(k * xs + 0.5) * np.sin(k * ys + 1.1),
             3.0 * np.sin(k * xs + 2.0) * np.sin(k * ys + 0.3)],
            -1,
        ),
        (1.0, 1.0),
    )
    fixed = hs.warp_image(img, truth)
    pre = float(np.mean((img.pixels - fixed.pixels) ** 2))
    fld = hs.register_deformable(img, fixed)
    post = float(np.mean((hs.warp_image(img, fld).pixels - fixed.pixels) ** 2))
    assert post <= 0.2 * pre
    assert hs.jacobian_min_det(fld) > 0
    report(
        "diffeomorphism-guarantee",
        f"{len(fields)} fields all min|J| > 0 (min {min(min_dets):.3f}); "
        f"sinusoidal MSE reduced {100 * (1 - post / pre):.1f}%",
    )


def test_landmark_protocol():
    lm = make_set("a1")
    assert hs.is_canonical(lm)
    assert len(lm.entries) == 7 and lm.total_points == 10

    sets = [make_set(f"a{k}", rng=np.random.default_rng(100 + k)) for k in range(3)]
    auto = make_set("auto", rng=np.random.default_rng(200))
    rep = hs.agreement_report(sets, auto)
    best, med = brute_force_report(sets, auto)
    assert dict(rep.manual_best) == pytest.approx(best, abs=1e-12)
    assert dict(rep.auto_median) == pytest.approx(med, abs=1e-12)

    a = hs.LandmarkSet("a", (("p", ((0.0, 0.0, 0.0),)),))
    b = hs.LandmarkSet("b", (("p", ((30.0, 40.0, 0.0),)),))
    assert hs.pairwise_displacement(a, b)["p"] == pytest.approx(0.5)
    report("landmark-protocol", "7 landmarks / 10 points; report == brute force; 30-40-0 um -> 0.5")


def test_end_to_end_determinism(tmp_path_factory):
    base = tmp_path_factory.mktemp("determinism")
    spec = hs.PhantomSpec(seed=31, dims=(48, 48, 32), max_translation_px=4.0, max_rotation_deg=4.0)
    manifests, truth = hs.generate(spec, base / "phantom")
    phantom_dir = manifests.backlit.root
    hs.save_landmarks_csv(
        [make_set(f"a{k}", rng=np.random.default_rng(k)) for k in range(3)],
        phantom_dir / "manual.csv",
    )
    hs.save_landmarks_csv([make_set("auto", rng=np.random.default_rng(9))], phantom_dir / "auto.csv")

    trees = []
    for threads in (1, 2):
        out_dir = base / f"out_t{threads}"
        cfg_path = base / f"cfg_t{threads}.yaml"
        cfg = write_config(cfg_path, phantom_dir, out_dir, threads=threads)
        cfg["evaluate"] = {
            "dice_rows": [
                {
                    "name": "truth vs truth",
                    "a_manifest": str(phantom_dir / "mask_gene0.manifest.json"),
                    "b_manifest": str(phantom_dir / "mask_gene0.manifest.json"),
                }
            ],
            "landmarks": {
                "manual_csv": str(phantom_dir / "manual.csv"),
                "auto_csv": str(phantom_dir / "auto.csv"),
            },
        }
        cfg_path.write_text(yaml.safe_dump(cfg))
        assert main(["--config", str(cfg_path), "reconstruct"]) == 0
        assert main(["--config", str(cfg_path), "evaluate"]) == 0
        trees.append(tree_bytes(out_dir))
    assert trees[0].keys() == trees[1].keys()
    for name in trees[0]:
        assert trees[0][name] == trees[1][name], f"differs across thread counts: {name}"
    report(
        "end-to-end-determinism",
        f"{len(trees[0])} transform/report files byte-identical for 1 vs 2 workers",
    )


def test_ntxent_parity_with_exported_features():
    csv_path = FIXTURES / "feature_batch_16.csv"
    meta_path = FIXTURES / "feature_batch_16.json"
    assert csv_path.exists(), "committed feature-batch fixture missing"
    with csv_path.open(newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh)]
    vectors = np.array(rows)
    meta = json.loads(meta_path.read_text())
    batch = hs.FeatureBatch(vectors, temperature=float(meta["temperature"]))
    loss, _ = hs.info_nce(batch)
    assert vectors.shape[0] == 32
    assert np.allclose(np.linalg.norm(vectors, axis=1), 1.0, atol=1e-5)
    assert abs(loss - float(meta["ntxent_loss"])) < 1e-5
    report(
        "ntxent-parity",
        f"primary info_nce {loss:.6f} vs exported {float(meta['ntxent_loss']):.6f} (tol 1e-5)",
    )
