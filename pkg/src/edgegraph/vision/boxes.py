"""Box-level detection operators: greedy NMS and SSD-style decoding.

box_nms keeps the standard sequential-greedy semantics while running the
GPU-unfriendly parts the GPU way: scores go through the segmented
argsort, the output buffer is pre-initialized to all-invalid rows so no
thread ever branches on "is this slot mine", and the inner IoU loop of
each greedy step is spread across the threads of one block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..simt import GPU, LaunchConfig, Session
from .sort import SegmentedArray, segmented_argsort

INVALID = -1.0  # marker filled into every field of a suppressed row


@dataclass(frozen=True)
class BoxSet:
    """Rows of (class_id, score, x1, y1, x2, y2); class_id == -1 marks invalid."""

    class_ids: np.ndarray
    scores: np.ndarray
    corners: np.ndarray

    def __post_init__(self):
        cls = np.asarray(self.class_ids, dtype=np.int32).reshape(-1)
        sc = np.asarray(self.scores, dtype=np.float32).reshape(-1)
        xy = np.asarray(self.corners, dtype=np.float32).reshape(-1, 4)
        if not (len(cls) == len(sc) == len(xy)):
            raise ValueError("class_ids, scores and corners must have equal row counts")
        valid = cls >= 0
        if np.any(valid & ((xy[:, 0] > xy[:, 2]) | (xy[:, 1] > xy[:, 3]))):
            raise ValueError("valid rows must satisfy x1 <= x2 and y1 <= y2")
        object.__setattr__(self, "class_ids", cls)
        object.__setattr__(self, "scores", sc)
        object.__setattr__(self, "corners", xy)

    def __len__(self) -> int:
        return len(self.class_ids)

    @classmethod
    def invalid(cls, n: int) -> "BoxSet":
        return cls(
            class_ids=np.full(n, -1, np.int32),
            scores=np.full(n, INVALID, np.float32),
            corners=np.full((n, 4), INVALID, np.float32),
        )

    def to_array(self) -> np.ndarray:
        """Packed (n, 6) float32 rows: class, score, x1, y1, x2, y2."""
        out = np.empty((len(self), 6), np.float32)
        out[:, 0] = self.class_ids
        out[:, 1] = self.scores
        out[:, 2:] = self.corners
        return out

    @classmethod
    def from_array(cls, rows) -> "BoxSet":
        rows = np.asarray(rows, dtype=np.float32).reshape(-1, 6)
        return cls(class_ids=rows[:, 0].astype(np.int32), scores=rows[:, 1], corners=rows[:, 2:])


def iou(a, b) -> float:
    """Corner-coordinate intersection over union; zero-area pairs give 0."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _candidate_order(boxes: BoxSet, score_threshold: float, top_k, session) -> list[int]:
    """Indices of live candidates in descending score order (at most top_k)."""
    seg = SegmentedArray(values=boxes.scores, offsets=np.array([0, len(boxes)]))
    ranks = segmented_argsort(seg, order="descending", session=session)
    cands = []
    for idx in ranks:
        if top_k is not None and len(cands) >= top_k:
            break
        i = int(idx)
        if boxes.class_ids[i] < 0:
            continue
        s = float(boxes.scores[i])
        if math.isnan(s) or s < score_threshold:
            continue
        cands.append(i)
    return cands


def box_nms(boxes: BoxSet, iou_threshold: float, score_threshold: float = 0.0,
            top_k: int | None = None, max_output: int | None = None,
            session: Session | None = None) -> BoxSet:
    """Greedy non-maximum suppression.

    Candidates are the valid rows with score >= score_threshold (NaN
    counts as below any threshold), sorted by descending score and
    truncated to top_k. A candidate is kept iff its IoU with every
    previously kept box of the same class stays below iou_threshold.
    The result has the same capacity: kept rows first, in score order,
    the rest all-invalid.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    n = len(boxes)
    if n == 0:
        return BoxSet.invalid(0)
    sess = session if session is not None else Session()
    cands = _candidate_order(boxes, score_threshold, top_k, sess)
    cap = len(cands) if max_output is None else min(max_output, len(cands))

    cls = boxes.class_ids
    xy = boxes.corners
    threads = min(32, max(1, len(cands)))
    kept_buf = sess.alloc(max(1, len(cands)), "i32", device=GPU, name="nms_kept")
    count_buf = sess.alloc(1, "i32", device=GPU, name="nms_count")

    def suppress(ctx):
        # shared[0] = kept count, shared[1 + t] = thread t's conflict flag
        t = ctx.thread_id
        for cand in cands:
            kc = ctx.shared[0]
            if kc >= cap:
                break
            hit = 0
            mine = range(t, kc, ctx.block_dim)
            if ctx.guard(len(mine) > 0):
                for q in mine:
                    k = int(kept_buf[q])
                    if cls[k] == cls[cand] and iou(xy[k], xy[cand]) >= iou_threshold:
                        hit = 1
                        break
            ctx.shared[1 + t] = hit
            ctx.add_work(len(mine))
            yield ctx.barrier()
            if t == 0 and not any(ctx.shared[1 : 1 + ctx.block_dim]):
                kept_buf[ctx.shared[0]] = cand
                ctx.shared[0] = kc + 1
            yield ctx.barrier()
        if t == 0:
            count_buf[0] = ctx.shared[0]

    sess.launch(suppress, LaunchConfig(grid=1, block=threads, shared_slots=1 + threads))
    kept_count = int(count_buf.to_numpy()[0])
    kept = [int(kept_buf.data[q]) for q in range(kept_count)]

    out_rows = sess.alloc(n * 6, "f32", device=GPU, name="nms_out")

    def write_out(ctx):
        t = ctx.thread_id
        lo = (n * t) // ctx.block_dim
        hi = (n * (t + 1)) // ctx.block_dim
        if hi > lo:
            out_rows[lo * 6 : hi * 6] = INVALID
        ctx.add_work(hi - lo)
        yield ctx.barrier()
        for r in range(t, len(kept), ctx.block_dim):
            i = kept[r]
            row = np.array(
                [float(cls[i]), boxes.scores[i], xy[i, 0], xy[i, 1], xy[i, 2], xy[i, 3]],
                dtype=np.float32,
            )
            out_rows[r * 6 : r * 6 + 6] = row
            ctx.add_work(1)

    sess.launch(write_out, LaunchConfig(grid=1, block=min(32, max(1, n))))
    return BoxSet.from_array(out_rows.to_numpy().reshape(n, 6))


def box_nms_sequential(boxes: BoxSet, iou_threshold: float, score_threshold: float = 0.0,
                       top_k: int | None = None, max_output: int | None = None) -> BoxSet:
    """Plain greedy NMS with the same selection rule, no emulator."""
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    n = len(boxes)
    order = sorted(
        range(n),
        key=lambda i: (
            math.isnan(float(boxes.scores[i])),
            -float(boxes.scores[i]) if not math.isnan(float(boxes.scores[i])) else 0.0,
            i,
        ),
    )
    cands = []
    for i in order:
        if top_k is not None and len(cands) >= top_k:
            break
        if boxes.class_ids[i] < 0:
            continue
        s = float(boxes.scores[i])
        if math.isnan(s) or s < score_threshold:
            continue
        cands.append(i)
    cap = len(cands) if max_output is None else min(max_output, len(cands))
    kept = []
    for cand in cands:
        if len(kept) >= cap:
            break
        ok = True
        for k in kept:
            if boxes.class_ids[k] == boxes.class_ids[cand] and iou(boxes.corners[k], boxes.corners[cand]) >= iou_threshold:
                ok = False
                break
        if ok:
            kept.append(cand)
    rows = np.full((n, 6), INVALID, np.float32)
    for r, i in enumerate(kept):
        rows[r] = [boxes.class_ids[i], boxes.scores[i], *boxes.corners[i]]
    return BoxSet.from_array(rows)


DEFAULT_VARIANCES = (0.1, 0.1, 0.2, 0.2)


def decode_boxes(loc: np.ndarray, anchors: np.ndarray, variances=DEFAULT_VARIANCES,
                 clip: bool = True) -> np.ndarray:
    """Center-form offset decoding of (A, 4) offsets against (A, 4) corner anchors.

    cx = ax + dx*v0*aw, cy = ay + dy*v1*ah, w = aw*exp(dw*v2),
    h = ah*exp(dh*v3); the result is corner form, clipped to [0, 1].
    """
    loc = np.asarray(loc, dtype=np.float64).reshape(-1, 4)
    anc = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anc[:, 2] - anc[:, 0]
    ah = anc[:, 3] - anc[:, 1]
    ax = (anc[:, 0] + anc[:, 2]) / 2.0
    ay = (anc[:, 1] + anc[:, 3]) / 2.0
    v0, v1, v2, v3 = (float(v) for v in variances)
    cx = ax + loc[:, 0] * v0 * aw
    cy = ay + loc[:, 1] * v1 * ah
    w = aw * np.exp(loc[:, 2] * v2)
    h = ah * np.exp(loc[:, 3] * v3)
    out = np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def best_foreground_class(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor: best non-background class (0-based) and its probability.

    ``probs`` is (classes, anchors) with class 0 = background. With no
    foreground classes every anchor is invalid (class -1, score 0).
    """
    probs = np.asarray(probs, dtype=np.float32)
    if probs.shape[0] <= 1:
        a = probs.shape[1]
        return np.full(a, -1, np.int32), np.zeros(a, np.float32)
    fg = probs[1:]
    cls = np.argmax(fg, axis=0).astype(np.int32)  # ties -> lowest class id
    score = fg[cls, np.arange(fg.shape[1])]
    return cls, score.astype(np.float32)


def multibox_detection(class_probs, loc_preds, anchors, variances=DEFAULT_VARIANCES,
                       score_threshold: float = 0.01, iou_threshold: float = 0.5,
                       top_k: int | None = None, max_output: int | None = None,
                       clip: bool = True, session: Session | None = None) -> list[BoxSet]:
    """SSD-style detection: per-anchor class selection, offset decoding, NMS.

    class_probs is (batch, classes, anchors) with class 0 = background,
    loc_preds is (batch, anchors*4), anchors is (1, anchors, 4) in corner
    form within [0, 1]. Returns one BoxSet of capacity ``anchors`` per
    batch element.
    """
    probs = np.asarray(class_probs, dtype=np.float32)
    locs = np.asarray(loc_preds, dtype=np.float32)
    ancs = np.asarray(anchors, dtype=np.float32)
    if probs.ndim != 3 or locs.ndim != 2 or ancs.shape[:1] != (1,) or ancs.ndim != 3:
        raise ValueError(
            f"expected class_probs (b, cls, a), loc_preds (b, 4a), anchors (1, a, 4); "
            f"got {probs.shape}, {locs.shape}, {ancs.shape}"
        )
    b, _, a = probs.shape
    if ancs.shape[1] != a or ancs.shape[2] != 4 or locs.shape != (b, 4 * a):
        raise ValueError(
            f"shape mismatch: {probs.shape} probs vs {locs.shape} loc_preds vs {ancs.shape} anchors"
        )
    sess = session if session is not None else Session()
    anc2 = ancs[0]

    decoded = sess.alloc(b * a * 6, "f32", device=GPU, name="mbx_decoded")
    threads = min(32, max(1, a))

    def decode_kernel(ctx):
        bi = ctx.block_id
        pb = probs[bi]
        lb = locs[bi].reshape(a, 4)
        for i in range(ctx.thread_id, a, ctx.block_dim):
            fg = pb[1:, i]
            if fg.size:
                c = int(np.argmax(fg))  # ties -> lowest class id
                s = np.float32(fg[c])
            else:
                c, s = -1, np.float32(0)
            box = decode_boxes(lb[i], anc2[i], variances, clip)[0]
            base = (bi * a + i) * 6
            row = np.array([float(c), s, box[0], box[1], box[2], box[3]], dtype=np.float32)
            decoded[base : base + 6] = row
            ctx.add_work(1)

    sess.launch(decode_kernel, LaunchConfig(grid=b, block=threads))
    rows = decoded.to_numpy().reshape(b, a, 6)

    results = []
    for bi in range(b):
        bs = BoxSet.from_array(rows[bi])
        results.append(
            box_nms(bs, iou_threshold, score_threshold, top_k=top_k, max_output=max_output, session=sess)
        )
    return results


def multibox_detection_sequential(class_probs, loc_preds, anchors, variances=DEFAULT_VARIANCES,
                                  score_threshold: float = 0.01, iou_threshold: float = 0.5,
                                  top_k: int | None = None, max_output: int | None = None,
                                  clip: bool = True) -> list[BoxSet]:
    """Straight-line decode + greedy NMS, no emulator."""
    probs = np.asarray(class_probs, dtype=np.float32)
    locs = np.asarray(loc_preds, dtype=np.float32)
    anc2 = np.asarray(anchors, dtype=np.float32)[0]
    b, _, a = probs.shape
    results = []
    for bi in range(b):
        cls, score = best_foreground_class(probs[bi])
        boxes = decode_boxes(locs[bi].reshape(a, 4), anc2, variances, clip)
        rows = np.empty((a, 6), np.float32)
        rows[:, 0] = cls
        rows[:, 1] = score
        rows[:, 2:] = boxes
        results.append(
            box_nms_sequential(BoxSet.from_array(rows), iou_threshold, score_threshold, top_k, max_output)
        )
    return results
