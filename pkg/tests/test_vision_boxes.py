"""box_nms and multibox detection against straight-line oracles."""

import math

import numpy as np
import pytest

from edgegraph.vision import BoxSet, box_nms, multibox_detection

INVALID_ROW = [-1.0] * 6


def oracle_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return 0.0 if union <= 0 else inter / union


def oracle_nms(rows, iou_thr, score_thr, top_k=None, max_output=None):
    """Greedy NMS over (n, 6) rows, written as the plainest possible loop."""
    n = len(rows)
    order = sorted(
        range(n),
        key=lambda i: (math.isnan(rows[i][1]), -rows[i][1] if not math.isnan(rows[i][1]) else 0.0, i),
    )
    cands = []
    for i in order:
        if top_k is not None and len(cands) >= top_k:
            break
        if rows[i][0] < 0 or math.isnan(rows[i][1]) or rows[i][1] < score_thr:
            continue
        cands.append(i)
    cap = len(cands) if max_output is None else min(max_output, len(cands))
    kept = []
    for c in cands:
        if len(kept) >= cap:
            break
        if all(
            not (rows[k][0] == rows[c][0] and oracle_iou(rows[k][2:], rows[c][2:]) >= iou_thr)
            for k in kept
        ):
            kept.append(c)
    out = [INVALID_ROW[:] for _ in range(n)]
    for slot, i in enumerate(kept):
        out[slot] = list(rows[i])
    return np.array(out, np.float32)


def oracle_multibox(probs, locs, anchors, variances, score_thr, iou_thr):
    """Straight-line decode + greedy NMS for one batch element."""
    cl, a = probs.shape
    rows = []
    for i in range(a):
        fg = [float(probs[c, i]) for c in range(1, cl)]
        best = max(range(len(fg)), key=lambda j: (fg[j], -j)) if fg else -1
        score = fg[best] if fg else 0.0
        dx, dy, dw, dh = (float(locs[4 * i + q]) for q in range(4))
        x1, y1, x2, y2 = (float(v) for v in anchors[i])
        aw, ah = x2 - x1, y2 - y1
        ax, ay = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        cx = ax + dx * variances[0] * aw
        cy = ay + dy * variances[1] * ah
        w = aw * math.exp(dw * variances[2])
        h = ah * math.exp(dh * variances[3])
        box = [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]
        box = [min(max(v, 0.0), 1.0) for v in box]
        rows.append([float(best), score] + box)
    return oracle_nms(np.array(rows, np.float32), iou_thr, score_thr)


def rand_boxset(rng, n, classes=4):
    cls = rng.integers(0, classes, n).astype(np.int32)
    cls[rng.random(n) < 0.1] = -1
    sc = rng.random(n).astype(np.float32)
    sc[rng.random(n) < 0.05] = np.nan
    x1 = rng.random(n).astype(np.float32)
    y1 = rng.random(n).astype(np.float32)
    wid = rng.random(n).astype(np.float32) * 0.5
    hei = rng.random(n).astype(np.float32) * 0.5
    corners = np.stack([x1, y1, x1 + wid, y1 + hei], axis=1)
    return BoxSet(class_ids=cls, scores=sc, corners=corners)


def test_single_valid_box_kept_in_row_zero():
    b = BoxSet(class_ids=[2], scores=[0.9], corners=[[0.1, 0.2, 0.4, 0.5]])
    out = box_nms(b, iou_threshold=0.5)
    assert out.class_ids[0] == 2
    assert out.scores[0] == np.float32(0.9)


def test_identical_pair_suppresses_lower_score():
    b = BoxSet(
        class_ids=[0, 0],
        scores=[0.9, 0.8],
        corners=[[0.1, 0.1, 0.5, 0.5], [0.1, 0.1, 0.5, 0.5]],
    )
    out = box_nms(b, iou_threshold=0.5)
    assert out.class_ids.tolist() == [0, -1]
    assert out.to_array()[1].tolist() == INVALID_ROW


def test_different_classes_do_not_suppress():
    b = BoxSet(
        class_ids=[0, 1],
        scores=[0.9, 0.8],
        corners=[[0.1, 0.1, 0.5, 0.5], [0.1, 0.1, 0.5, 0.5]],
    )
    out = box_nms(b, iou_threshold=0.5)
    assert out.class_ids.tolist() == [0, 1]


def test_invalid_iou_threshold():
    b = BoxSet(class_ids=[0], scores=[0.5], corners=[[0, 0, 1, 1]])
    for bad in (0.0, -0.5, 1.5):
        with pytest.raises(ValueError):
            box_nms(b, iou_threshold=bad)


def test_output_rows_are_kept_inputs_or_invalid_marker():
    rng = np.random.default_rng(0)
    b = rand_boxset(rng, 40)
    out = box_nms(b, 0.5, 0.2).to_array()
    inputs = {tuple(r) for r in b.to_array().tolist()}
    for row in out.tolist():
        assert row == INVALID_ROW or tuple(row) in inputs


def test_nms_randomized_against_oracle():
    rng = np.random.default_rng(1)
    for trial in range(120):
        n = int(rng.integers(1, 80))
        b = rand_boxset(rng, n)
        thr = float(rng.uniform(0.2, 1.0))
        st = float(rng.uniform(0.0, 0.4))
        top_k = None if rng.random() < 0.5 else int(rng.integers(1, n + 1))
        mo = None if rng.random() < 0.5 else int(rng.integers(1, n + 1))
        got = box_nms(b, thr, st, top_k=top_k, max_output=mo).to_array()
        want = oracle_nms(b.to_array(), thr, st, top_k=top_k, max_output=mo)
        assert np.array_equal(got, want), f"trial {trial}"


def test_all_rows_invalid_or_below_threshold():
    b = BoxSet(
        class_ids=[-1, 0, 0],
        scores=[0.9, 0.05, np.nan],
        corners=[[0, 0, 0.2, 0.2], [0.4, 0.4, 0.6, 0.6], [0.1, 0.1, 0.3, 0.3]],
    )
    out = box_nms(b, 0.5, score_threshold=0.1)
    assert (out.class_ids == -1).all()
    assert np.array_equal(out.to_array(), np.full((3, 6), -1.0, np.float32))


def test_empty_boxset():
    out = box_nms(BoxSet(class_ids=[], scores=[], corners=np.zeros((0, 4))), 0.5)
    assert len(out) == 0


def test_top_k_truncates_before_suppression():
    b = BoxSet(
        class_ids=[0, 0, 0],
        scores=[0.9, 0.8, 0.7],
        corners=[[0.0, 0.0, 0.2, 0.2], [0.5, 0.5, 0.7, 0.7], [0.1, 0.8, 0.3, 0.9]],
    )
    out = box_nms(b, 0.5, top_k=2)
    assert (out.class_ids >= 0).sum() == 2


def test_top_k_and_max_output_zero_keep_nothing():
    b = BoxSet(class_ids=[0, 1], scores=[0.9, 0.8],
               corners=[[0, 0, 0.2, 0.2], [0.5, 0.5, 0.7, 0.7]])
    for kwargs in ({"top_k": 0}, {"max_output": 0}):
        out = box_nms(b, 0.5, **kwargs)
        assert (out.class_ids == -1).all()


def test_multibox_zero_offsets_decode_to_anchors():
    rng = np.random.default_rng(2)
    a = 12
    x1 = rng.random(a, dtype=np.float32) * 0.5
    y1 = rng.random(a, dtype=np.float32) * 0.5
    anchors = np.stack([x1, y1, x1 + 0.3, y1 + 0.3], axis=1)[None]
    probs = np.zeros((1, 3, a), np.float32)
    probs[0, 1] = np.linspace(0.9, 0.3, a)
    locs = np.zeros((1, 4 * a), np.float32)
    out = multibox_detection(probs, locs, anchors, score_threshold=0.0, iou_threshold=1.0)[0]
    kept = out.class_ids >= 0
    assert kept.sum() == a
    order = np.argsort(-out.scores[kept], kind="stable")
    assert np.allclose(np.asarray(out.corners[kept])[order][np.argsort(np.argsort(-probs[0, 1]))], anchors[0], atol=1e-6)


def test_multibox_all_background_yields_nothing():
    a = 6
    probs = np.zeros((1, 2, a), np.float32)
    probs[0, 0] = 1.0
    anchors = np.tile(np.array([0.1, 0.1, 0.4, 0.4], np.float32), (a, 1))[None]
    out = multibox_detection(probs, np.zeros((1, 4 * a), np.float32), anchors, score_threshold=0.01)[0]
    assert (out.class_ids >= 0).sum() == 0


def test_multibox_randomized_against_oracle():
    rng = np.random.default_rng(3)
    for trial in range(60):
        cl = int(rng.integers(2, 5))
        a = int(rng.integers(2, 40))
        probs = rng.random((1, cl, a)).astype(np.float32)
        locs = (rng.standard_normal((1, 4 * a)) * 0.6).astype(np.float32)
        x1 = rng.random(a).astype(np.float32) * 0.5
        y1 = rng.random(a).astype(np.float32) * 0.5
        anchors = np.stack(
            [x1, y1, x1 + 0.05 + rng.random(a).astype(np.float32) * 0.4,
             y1 + 0.05 + rng.random(a).astype(np.float32) * 0.4], axis=1
        )[None]
        got = multibox_detection(probs, locs, anchors, score_threshold=0.1, iou_threshold=0.45)[0]
        want = oracle_multibox(probs[0], locs[0], anchors[0], (0.1, 0.1, 0.2, 0.2), 0.1, 0.45)
        got_rows = got.to_array()
        assert np.array_equal(got_rows[:, 0], want[:, 0]), f"trial {trial}"
        assert np.allclose(got_rows[:, 1:], want[:, 1:], atol=1e-6), f"trial {trial}"


def test_multibox_shape_mismatch():
    with pytest.raises(ValueError):
        multibox_detection(
            np.zeros((1, 3, 8), np.float32),
            np.zeros((1, 30), np.float32),
            np.zeros((1, 8, 4), np.float32),
        )


def test_multibox_batched():
    rng = np.random.default_rng(4)
    a = 10
    probs = rng.random((3, 3, a)).astype(np.float32)
    locs = (rng.standard_normal((3, 4 * a)) * 0.3).astype(np.float32)
    x1 = rng.random(a).astype(np.float32) * 0.4
    y1 = rng.random(a).astype(np.float32) * 0.4
    anchors = np.stack([x1, y1, x1 + 0.3, y1 + 0.3], axis=1)[None]
    outs = multibox_detection(probs, locs, anchors, score_threshold=0.2, iou_threshold=0.5)
    assert len(outs) == 3
    for bi, out in enumerate(outs):
        want = oracle_multibox(probs[bi], locs[bi], anchors[0], (0.1, 0.1, 0.2, 0.2), 0.2, 0.5)
        assert np.array_equal(out.to_array()[:, 0], want[:, 0])
        assert np.allclose(out.to_array()[:, 1:], want[:, 1:], atol=1e-6)
