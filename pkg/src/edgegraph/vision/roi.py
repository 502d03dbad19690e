"""ROIAlign: average-pooled bilinear sampling over regions of interest.

Each output cell averages sampling_ratio**2 bilinear samples placed on a
regular grid inside the cell. Sample coordinates use the half-pixel
convention (pixel (i, j) sits at continuous coordinate (i, j), so an ROI
covering an integer-aligned region samples exactly on pixel centers) and
are clamped to the feature map. A zero-area ROI degenerates to repeated
sampling at its origin, which is well defined, not an error.
"""

from __future__ import annotations

import numpy as np

from ..simt import GPU, LaunchConfig, Session


def _cell_samples(features2d: np.ndarray, x1, y1, bin_w, bin_h, ph, pw, ratio) -> np.ndarray:
    """All bilinear samples for one (roi, channel): shape (ph, pw, ratio*ratio)."""
    h, w = features2d.shape
    py = np.arange(ph, dtype=np.float64)
    px = np.arange(pw, dtype=np.float64)
    sy = (np.arange(ratio, dtype=np.float64) + 0.5) / ratio
    sx = (np.arange(ratio, dtype=np.float64) + 0.5) / ratio
    # (ph, ratio) y coordinates and (pw, ratio) x coordinates, half-pixel aligned
    ys = y1 + (py[:, None] + sy[None, :]) * bin_h - 0.5
    xs = x1 + (px[:, None] + sx[None, :]) * bin_w - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1i = np.minimum(y0 + 1, h - 1)
    x1i = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    f = features2d.astype(np.float64)
    # broadcast to (ph, ry, pw, rx)
    yy0 = y0[:, :, None, None]
    yy1 = y1i[:, :, None, None]
    xx0 = x0[None, None, :, :]
    xx1 = x1i[None, None, :, :]
    wyy = wy[:, :, None, None]
    wxx = wx[None, None, :, :]
    v = (
        f[yy0, xx0] * (1 - wyy) * (1 - wxx)
        + f[yy0, xx1] * (1 - wyy) * wxx
        + f[yy1, xx0] * wyy * (1 - wxx)
        + f[yy1, xx1] * wyy * wxx
    )
    return v.transpose(0, 2, 1, 3).reshape(ph, pw, ratio * ratio)


def roi_align_one(features2d: np.ndarray, roi, output_size, sampling_ratio: int) -> np.ndarray:
    """Pooled (ph, pw) float32 map for one channel of one ROI."""
    ph, pw = output_size
    x1, y1, x2, y2 = (float(v) for v in roi)
    bin_h = (y2 - y1) / ph
    bin_w = (x2 - x1) / pw
    samples = _cell_samples(features2d, x1, y1, bin_w, bin_h, ph, pw, sampling_ratio)
    return samples.mean(axis=2).astype(np.float32)


def roi_align(features, rois, output_size, sampling_ratio: int = 2,
              session: Session | None = None) -> np.ndarray:
    """ROIAlign over a (1, C, H, W) feature map.

    ``rois`` is a sequence of (x1, y1, x2, y2) in feature coordinates;
    returns a (len(rois), C, ph, pw) float32 array. One block per ROI,
    channels spread across the block's threads.
    """
    feats = np.asarray(features, dtype=np.float32)
    if feats.ndim != 4 or feats.shape[0] != 1:
        raise ValueError(f"features must be (1, C, H, W), got {feats.shape}")
    rois = np.asarray(rois, dtype=np.float32).reshape(-1, 4)
    ph, pw = int(output_size[0]), int(output_size[1])
    if ph < 1 or pw < 1 or sampling_ratio < 1:
        raise ValueError("output size and sampling_ratio must be >= 1")
    r = rois.shape[0]
    c = feats.shape[1]
    if r == 0:
        return np.zeros((0, c, ph, pw), np.float32)
    sess = session if session is not None else Session()
    out = sess.alloc(r * c * ph * pw, "f32", device=GPU, name="roi_out")
    cell = ph * pw

    def kernel(ctx):
        ri = ctx.block_id
        roi = rois[ri]
        for ci in range(ctx.thread_id, c, ctx.block_dim):
            pooled = roi_align_one(feats[0, ci], roi, (ph, pw), sampling_ratio)
            base = (ri * c + ci) * cell
            out[base : base + cell] = pooled.reshape(-1)
            ctx.add_work(cell)

    sess.launch(kernel, LaunchConfig(grid=r, block=min(16, c)))
    return out.to_numpy().reshape(r, c, ph, pw)


def roi_align_sequential(features, rois, output_size, sampling_ratio: int = 2) -> np.ndarray:
    """Same pooling without the emulator (shared per-channel helper)."""
    feats = np.asarray(features, dtype=np.float32)
    rois = np.asarray(rois, dtype=np.float32).reshape(-1, 4)
    ph, pw = int(output_size[0]), int(output_size[1])
    r, c = rois.shape[0], feats.shape[1]
    out = np.zeros((r, c, ph, pw), np.float32)
    for ri in range(r):
        for ci in range(c):
            out[ri, ci] = roi_align_one(feats[0, ci], rois[ri], (ph, pw), sampling_ratio)
    return out
