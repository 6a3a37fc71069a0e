import numpy as np
import pytest

import histostack as hs


def blob_image(shape=(64, 64), n=10, seed=1, spacing=(1.0, 1.0)) -> hs.Image2D:
    """Smooth textured test image: sum of random Gaussian blobs in [0, 0.9]."""
    rng = np.random.default_rng(seed)
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    img = np.zeros(shape)
    for _ in range(n):
        cy, cx = rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)
        sy, sx = rng.uniform(3, 10), rng.uniform(3, 10)
        img += rng.uniform(0.3, 0.9) * np.exp(-(((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2) / 2)
    return hs.Image2D(np.clip(img / img.max() * 0.9, 0, 1), spacing)


def blob_volume(shape=(24, 48, 48), n=14, seed=2, spacing=(1.0, 1.0, 1.0)) -> hs.Image3D:
    rng = np.random.default_rng(seed)
    d, h, w = shape
    zs, ys, xs = np.mgrid[0:d, 0:h, 0:w].astype(float)
    vol = np.zeros(shape)
    for _ in range(n):
        cz = rng.uniform(0.25 * d, 0.75 * d)
        cy = rng.uniform(0.25 * h, 0.75 * h)
        cx = rng.uniform(0.25 * w, 0.75 * w)
        sz, sy, sx = rng.uniform(2, 6), rng.uniform(3, 9), rng.uniform(3, 9)
        vol += rng.uniform(0.3, 0.9) * np.exp(
            -(((zs - cz) / sz) ** 2 + ((ys - cy) / sy) ** 2 + ((xs - cx) / sx) ** 2) / 2
        )
    return hs.Image3D(np.clip(vol / vol.max() * 0.9, 0, 1), spacing)


def corner_error_px(chain_a, chain_b, shape=(64, 64), spacing=(1.0, 1.0)) -> float:
    """Mean displacement (px) between two 2D chains at the grid corners."""
    h, w = shape
    sx, sy = spacing
    corners = np.array(
        [[0, 0], [(w - 1) * sx, 0], [0, (h - 1) * sy], [(w - 1) * sx, (h - 1) * sy]], float
    )
    d = np.linalg.norm(hs.apply(chain_a, corners) - hs.apply(chain_b, corners), axis=1)
    return float(d.mean()) / min(sx, sy)


@pytest.fixture(scope="session")
def small_phantom(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom_small")
    spec = hs.PhantomSpec(
        seed=11, dims=(48, 48, 32), max_translation_px=5.0, max_rotation_deg=5.0
    )
    manifests, truth = hs.generate(spec, out)
    return spec, manifests, truth


@pytest.fixture(scope="session")
def small_recon(small_phantom):
    _, manifests, _ = small_phantom
    return hs.reconstruct_backlit(manifests.backlit, manifests.blockface, workers=2)
