"""Segmented argsort over a flattened array.

Variable-length segments are kept flat, with segment start offsets on
the side, and the flat array is chopped into equal-size sort blocks.
One launch sorts every block locally (respecting segment boundaries);
then a tree of merge passes doubles the cooperative width each round.
Elements never cross a segment boundary, and in each merge only the
segment spanning the active interface between two runs needs work; pairs
that are already ordered (or contain no spanning segment) are copied
through. Ranks are stable: equal keys keep their original order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..simt import GPU, LaunchConfig, Session, ceil_div, log2_ceil


@dataclass(frozen=True)
class SegmentedArray:
    """Flat values plus ascending segment start offsets (sentinel = n)."""

    values: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        offs = np.asarray(self.offsets, dtype=np.int64)
        if vals.ndim != 1 or offs.ndim != 1:
            raise ValueError("values and offsets must be flat")
        if offs.size < 1 or offs[0] != 0:
            raise ValueError("offsets must start at 0")
        if np.any(np.diff(offs) < 0):
            raise ValueError("offsets must be non-decreasing")
        if offs[-1] != vals.size:
            raise ValueError(f"offsets must end with the sentinel {vals.size}, got {offs[-1]}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "offsets", offs)

    @classmethod
    def from_segments(cls, segments) -> "SegmentedArray":
        parts = [np.asarray(s, dtype=np.float32).reshape(-1) for s in segments]
        offsets = np.cumsum([0] + [p.size for p in parts])
        values = np.concatenate(parts) if parts else np.zeros(0, np.float32)
        return cls(values=values, offsets=offsets)

    @property
    def num_segments(self) -> int:
        return len(self.offsets) - 1

    def segment(self, s: int) -> np.ndarray:
        return self.values[self.offsets[s] : self.offsets[s + 1]]


def _sort_keys(values: np.ndarray, order: str):
    """Key arrays giving a strict total order: (nan-last flag, value, index).

    Descending negates the value key; NaNs sort last in either order.
    """
    vals = np.asarray(values, dtype=np.float32)
    nan = np.isnan(vals)
    keyv = np.where(nan, np.float32(0), vals)
    if order == "descending":
        keyv = -keyv
    return nan.astype(np.int8), keyv


def _boundaries_in(offsets: np.ndarray, a: int, z: int) -> list[int]:
    """Segment boundaries strictly inside [a, z), plus the ends."""
    lo = np.searchsorted(offsets, a, side="right")
    hi = np.searchsorted(offsets, z, side="left")
    return [a] + [int(x) for x in offsets[lo:hi]] + [z]


def _spanning_segment(offsets: np.ndarray, m: int) -> tuple[int, int] | None:
    """The (start, stop) of the segment strictly containing position m."""
    s = int(np.searchsorted(offsets, m, side="right")) - 1
    start, stop = int(offsets[s]), int(offsets[s + 1])
    if start < m < stop:
        return start, stop
    return None


def _corank(d: int, na: int, nb: int, key_a, key_b) -> int:
    """Split point: the first d merged elements take i from A, d-i from B."""
    lo, hi = max(0, d - nb), min(d, na)
    while lo < hi:
        i = (lo + hi) // 2
        if key_a(i) < key_b(d - i - 1):
            lo = i + 1
        else:
            hi = i
    return lo


def segmented_argsort(a: SegmentedArray, order: str = "ascending", block: int = 64,
                      session: Session | None = None) -> np.ndarray:
    """Stable per-segment argsort of a segmented array.

    Returns a flat int32 buffer where the slots of segment s hold a
    permutation of 0..len(s): position j gets the segment-relative index
    of the element ranked j in the requested order. Runs as one
    block-sort launch plus ceil(log2 num_blocks) merge launches; the
    result is independent of ``block``.
    """
    if order not in ("ascending", "descending"):
        raise ValueError(f"order must be 'ascending' or 'descending', got {order!r}")
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    n = int(a.values.size)
    if n == 0:
        return np.zeros(0, dtype=np.int32)

    nanflag, keyv = _sort_keys(a.values, order)
    offsets = a.offsets
    num_blocks = ceil_div(n, block)
    sess = session if session is not None else Session()

    perm_a = sess.alloc(n, "i32", device=GPU, name="sort_perm_a")
    perm_b = sess.alloc(n, "i32", device=GPU, name="sort_perm_b")

    def block_sort(ctx):
        a0 = ctx.block_id * block
        z0 = min(a0 + block, n)
        ctx.add_work(z0 - a0)
        bounds = _boundaries_in(offsets, a0, z0)
        for u, w in zip(bounds, bounds[1:]):
            if w - u <= 0:
                continue
            ranked = np.lexsort((keyv[u:w], nanflag[u:w]))  # stable: ties keep index order
            perm_a[u:w] = (u + ranked).astype(np.int32)

    sess.launch(block_sort, LaunchConfig(grid=num_blocks, block=1))

    # scalar key lookups in the merges are cheaper on plain lists; the
    # float32 -> float widening is exact, so the order is unchanged
    nan_l = nanflag.tolist()
    key_l = keyv.tolist()
    src, dst = perm_a, perm_b
    for k in range(log2_ceil(num_blocks)):
        run = (1 << k) * block  # sorted-run width entering this pass
        coop = 1 << (k + 1)  # threads cooperating per merged pair
        groups = ceil_div(n, 2 * run)
        _merge_pass(sess, src, dst, nan_l, key_l, offsets, n, run, coop, groups)
        src, dst = dst, src

    return src.to_numpy() - _segment_starts(offsets, n)


def _segment_starts(offsets: np.ndarray, n: int) -> np.ndarray:
    """For every slot, the start offset of the segment owning it."""
    if n == 0:
        return np.zeros(0, dtype=np.int32)
    seg = np.searchsorted(offsets, np.arange(n), side="right") - 1
    return offsets[seg].astype(np.int32)


def _merge_pass(sess, src, dst, nan_l, key_l, offsets, n, run, coop, groups):
    def merge(ctx):
        g0 = ctx.block_id * 2 * run
        g1 = min(g0 + 2 * run, n)
        m = g0 + run
        t = ctx.thread_id
        span = _spanning_segment(offsets, m) if m < g1 else None
        if span is not None:
            # adjacent runs of one segment may already be in order
            la = int(src[m - 1])
            fb = int(src[m])
            if (nan_l[la], key_l[la], la) < (nan_l[fb], key_l[fb], fb):
                span = None
        if not ctx.guard(span is not None):
            _copy_share(ctx, src, dst, g0, g1, coop)
            return
        u0, u1 = max(span[0], g0), min(span[1], g1)
        na, nb = m - u0, u1 - m

        def key_a(i):
            s = int(src[u0 + i])
            return (nan_l[s], key_l[s], s)

        def key_b(j):
            s = int(src[m + j])
            return (nan_l[s], key_l[s], s)

        total = na + nb
        d0 = (total * t) // coop
        d1 = (total * (t + 1)) // coop
        i0 = _corank(d0, na, nb, key_a, key_b)
        i1 = _corank(d1, na, nb, key_a, key_b)
        j0, j1 = d0 - i0, d1 - i1
        # the output window [d0, d1) consumes exactly A[i0:i1) and B[j0:j1)
        ka = [(nan_l[s], key_l[s], s) for s in src[u0 + i0 : u0 + i1].tolist()]
        kb = [(nan_l[s], key_l[s], s) for s in src[m + j0 : m + j1].tolist()]
        out = []
        i, j = 0, 0
        while i < len(ka) and j < len(kb):
            if ka[i] < kb[j]:
                out.append(ka[i][2])
                i += 1
            else:
                out.append(kb[j][2])
                j += 1
        for q in range(i, len(ka)):
            out.append(ka[q][2])
        for q in range(j, len(kb)):
            out.append(kb[q][2])
        if out:
            dst[u0 + d0 : u0 + d1] = np.asarray(out, dtype=np.int32)
        ctx.add_work(d1 - d0)
        # untouched slots around the merged span are copied through
        _copy_share(ctx, src, dst, g0, u0, coop)
        _copy_share(ctx, src, dst, u1, g1, coop)

    sess.launch(merge, LaunchConfig(grid=groups, block=coop))


def _copy_share(ctx, src, dst, a, z, coop):
    """Thread ``ctx`` copies its slice of src[a:z] into dst."""
    length = z - a
    if length <= 0:
        return
    t = ctx.thread_id
    c0 = a + (length * t) // coop
    c1 = a + (length * (t + 1)) // coop
    if c1 > c0:
        dst[c0:c1] = src[c0:c1]
        ctx.add_work(c1 - c0)


def argsort_sequential(values, order: str = "ascending", offsets=None) -> np.ndarray:
    """Per-segment stable argsort without the emulator.

    Uses the same key mapping as the kernel path, so the (unique)
    permutation it returns is identical.
    """
    vals = np.asarray(values, dtype=np.float32).reshape(-1)
    offs = np.asarray(offsets if offsets is not None else [0, vals.size], dtype=np.int64)
    sa = SegmentedArray(values=vals, offsets=offs)
    nanflag, keyv = _sort_keys(sa.values, order)
    out = np.zeros(vals.size, dtype=np.int32)
    for s in range(sa.num_segments):
        u, w = int(offs[s]), int(offs[s + 1])
        if w > u:
            out[u:w] = np.lexsort((keyv[u:w], nanflag[u:w]))
    return out
