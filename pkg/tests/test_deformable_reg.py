import numpy as np
import pytest

import histostack as hs
from histostack.transforms import _grid_points, as_chain

from conftest import blob_image


def sinusoid_field(shape, amplitude, period, phases=(0.5, 1.1, 2.0, 0.3)) -> hs.DisplacementField:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    k = 2 * np.pi / period
    ux = amplitude * np.sin(k * xs + phases[0]) * np.sin(k * ys + phases[1])
    uy = amplitude * np.sin(k * xs + phases[2]) * np.sin(k * ys + phases[3])
    return hs.DisplacementField(np.stack([ux, uy], -1), (1.0, 1.0))


class TestRegisterDeformable:
    def test_self_registration_tiny_field(self):
        img = blob_image((64, 64), seed=1)
        fld = hs.register_deformable(img, img)
        assert np.linalg.norm(fld.vectors, axis=-1).max() < 0.05

    def test_sinusoidal_recovery(self):
        img = blob_image((128, 128), n=14, seed=2)
        truth = sinusoid_field((128, 128), amplitude=3.0, period=32.0)
        fixed = hs.warp_image(img, truth)
        pre = float(np.mean((img.pixels - fixed.pixels) ** 2))
        fld = hs.register_deformable(img, fixed)
        post = float(np.mean((hs.warp_image(img, fld).pixels - fixed.pixels) ** 2))
        assert post <= 0.2 * pre
        assert hs.jacobian_min_det(fld) > 0

    def test_zero_iterations_zero_field(self):
        img = blob_image((64, 64), seed=3)
        other = blob_image((64, 64), seed=4)
        fld = hs.register_deformable(img, other, hs.DeformableRegParams(iters_per_level=0))
        assert np.all(fld.vectors == 0.0)

    def test_energy_descent_per_level(self):
        img = blob_image((64, 64), seed=5)
        fixed = hs.warp_image(img, sinusoid_field((64, 64), 2.0, 24.0))
        trace = []
        hs.register_deformable(img, fixed, trace=trace)
        by_level = {}
        for row in trace:
            by_level.setdefault(row["level"], []).append(row["mse"])
        for level, series in by_level.items():
            diffs = np.diff(series)
            assert (diffs <= 1e-12).all(), f"level {level} energy increased"

    def test_weak_inverse_consistency(self):
        a = blob_image((64, 64), seed=6)
        b = hs.warp_image(a, sinusoid_field((64, 64), 2.0, 28.0))
        f_ab = hs.register_deformable(a, b)   # maps b-grid points into a
        f_ba = hs.register_deformable(b, a)
        pts = _grid_points((64, 64), (1.0, 1.0)).reshape(-1, 2)
        round_trip = hs.apply(as_chain(f_ab), hs.apply(as_chain(f_ba), pts))
        comp_mag = np.linalg.norm(round_trip - pts, axis=1)
        mag_ab = np.linalg.norm(f_ab.vectors, axis=-1)
        mag_ba = np.linalg.norm(f_ba.vectors, axis=-1)
        interior = np.s_[8:-8, 8:-8]
        assert comp_mag.reshape(64, 64)[interior].mean() < 0.2 * max(
            mag_ab[interior].mean(), mag_ba[interior].mean()
        )

    def test_field_on_fixed_grid_with_init(self):
        img = blob_image((64, 64), seed=7)
        init = hs.Affine.translate([4.0, 0.0])
        fixed = hs.warp_image(img, init)
        fld = hs.register_deformable(img, fixed, init=as_chain(init))
        assert fld.grid_shape == (64, 64)
        # init already solves it: residual field stays small
        assert np.linalg.norm(fld.vectors, axis=-1).max() < 0.5


class TestRegisterDeformableMultiterm:
    def test_single_positive_weight_equals_single_target(self):
        img = blob_image((64, 64), seed=8)
        t2 = hs.warp_image(img, sinusoid_field((64, 64), 1.5, 24.0))
        poisoned = (None, 0.0)
        wt = hs.WeightedTargets((poisoned, (t2, 1.0), (None, 0.0), (None, 0.0)))
        f_multi = hs.register_deformable_multiterm(img, None, wt)
        f_single = hs.register_deformable(img, t2)
        rms = np.sqrt(np.mean((f_multi.vectors - f_single.vectors) ** 2))
        assert rms < 1e-9

    def test_equal_targets_match_single_target(self):
        img = blob_image((64, 64), seed=9)
        tgt = hs.warp_image(img, sinusoid_field((64, 64), 1.5, 20.0))
        wt = hs.WeightedTargets(((tgt, 1.0), (tgt, 0.25), (tgt, 0.25)))
        f_multi = hs.register_deformable_multiterm(img, None, wt)
        f_single = hs.register_deformable(img, tgt)
        rms = np.sqrt(np.mean((f_multi.vectors - f_single.vectors) ** 2))
        assert rms < 1e-6

    def test_returned_fields_diffeomorphic(self):
        img = blob_image((64, 64), seed=10)
        tgt = hs.warp_image(img, sinusoid_field((64, 64), 2.5, 24.0))
        wt = hs.WeightedTargets(((tgt, 1.0),))
        fld = hs.register_deformable_multiterm(img, None, wt)
        assert hs.jacobian_min_det(fld) > 0

    def test_targets_must_share_grid(self):
        img = blob_image((64, 64))
        t1 = blob_image((64, 64), seed=11)
        t2 = blob_image((32, 32), seed=12)
        with pytest.raises(ValueError, match="share"):
            hs.register_deformable_multiterm(img, None, hs.WeightedTargets(((t1, 1.0), (t2, 0.5))))

    def test_determinism(self):
        img = blob_image((64, 64), seed=13)
        tgt = hs.warp_image(img, sinusoid_field((64, 64), 2.0, 24.0))
        f1 = hs.register_deformable(img, tgt)
        f2 = hs.register_deformable(img, tgt)
        assert np.array_equal(f1.vectors, f2.vectors)


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            hs.DeformableRegParams(sigma_fluid=-1)
        with pytest.raises(ValueError):
            hs.DeformableRegParams(max_step=0.0)
        with pytest.raises(ValueError):
            hs.DeformableRegParams(levels=0)
