"""ROIAlign against a per-sample scalar bilinear oracle."""

import numpy as np
import pytest

from edgegraph.vision import roi_align


def oracle_bilinear(fm, y, x):
    h, w = fm.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    wy, wx = y - y0, x - x0
    return (
        float(fm[y0, x0]) * (1 - wy) * (1 - wx)
        + float(fm[y0, x1]) * (1 - wy) * wx
        + float(fm[y1, x0]) * wy * (1 - wx)
        + float(fm[y1, x1]) * wy * wx
    )


def oracle_roi_align(feats, rois, output_size, ratio):
    """Scalar loops over every roi, channel, cell and sample."""
    ph, pw = output_size
    r = len(rois)
    c = feats.shape[1]
    out = np.zeros((r, c, ph, pw), np.float64)
    for ri, (x1, y1, x2, y2) in enumerate(rois):
        bin_h = (y2 - y1) / ph
        bin_w = (x2 - x1) / pw
        for ci in range(c):
            fm = feats[0, ci].astype(np.float64)
            for py in range(ph):
                for px in range(pw):
                    total = 0.0
                    for iy in range(ratio):
                        for ix in range(ratio):
                            sy = y1 + (py + (iy + 0.5) / ratio) * bin_h - 0.5
                            sx = x1 + (px + (ix + 0.5) / ratio) * bin_w - 0.5
                            total += oracle_bilinear(fm, sy, sx)
                    out[ri, ci, py, px] = total / (ratio * ratio)
    return out.astype(np.float32)


def test_constant_feature_map_gives_constant_output():
    feats = np.full((1, 3, 6, 6), 2.75, np.float32)
    out = roi_align(feats, [[0.5, 0.5, 4.0, 5.0]], (3, 3), sampling_ratio=2)
    assert np.allclose(out, 2.75, atol=1e-6)


def test_integer_aligned_region_returns_underlying_values():
    feats = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = roi_align(feats, [[0.0, 0.0, 2.0, 2.0]], (2, 2), sampling_ratio=1)
    assert out.reshape(-1).tolist() == [0.0, 1.0, 4.0, 5.0]


def test_degenerate_roi_is_not_an_error():
    feats = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = roi_align(feats, [[1.5, 2.0, 1.5, 2.0]], (2, 2), sampling_ratio=2)
    want = oracle_roi_align(feats, [[1.5, 2.0, 1.5, 2.0]], (2, 2), 2)
    assert np.allclose(out, want, atol=1e-6)


def test_randomized_against_scalar_oracle():
    rng = np.random.default_rng(0)
    for trial in range(60):
        c = int(rng.integers(1, 5))
        h = int(rng.integers(3, 10))
        w = int(rng.integers(3, 10))
        feats = rng.standard_normal((1, c, h, w)).astype(np.float32)
        nroi = int(rng.integers(1, 5))
        x1 = rng.random(nroi) * (w - 1)
        y1 = rng.random(nroi) * (h - 1)
        rois = np.stack(
            [x1, y1, x1 + rng.random(nroi) * (w - x1), y1 + rng.random(nroi) * (h - y1)], axis=1
        ).astype(np.float32)
        size = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        ratio = int(rng.integers(1, 4))
        got = roi_align(feats, rois, size, sampling_ratio=ratio)
        want = oracle_roi_align(feats, rois.tolist(), size, ratio)
        assert np.allclose(got, want, atol=1e-6), f"trial {trial}"


def test_output_shape():
    feats = np.zeros((1, 5, 8, 8), np.float32)
    out = roi_align(feats, [[0, 0, 4, 4], [1, 1, 3, 3], [2, 2, 6, 7]], (3, 4), 2)
    assert out.shape == (3, 5, 3, 4)


def test_bad_arguments():
    feats = np.zeros((1, 2, 4, 4), np.float32)
    with pytest.raises(ValueError):
        roi_align(np.zeros((2, 2, 4, 4), np.float32), [[0, 0, 1, 1]], (2, 2))
    with pytest.raises(ValueError):
        roi_align(feats, [[0, 0, 1, 1]], (0, 2))
    with pytest.raises(ValueError):
        roi_align(feats, [[0, 0, 1, 1]], (2, 2), sampling_ratio=0)
