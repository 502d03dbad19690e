"""Direct 2-D convolution with a parameterized schedule template.

The template carries the three schedule knobs that matter on block/thread
hardware: output channels split into groups that map to parallel blocks,
the feature-map height split that adds more blocks, and unrolling of the
reduction nest, plus a column tile and an emulated SIMD width that set
the per-block thread count. Splits must divide their axis exactly; a
config that does not fit its workload is rejected, never clamped.

``conv2d_reference`` is the oracle: a textbook direct convolution with a
fixed (r, s, c ascending) accumulation order per output element. The
scheduled kernel preserves that per-element order, so it matches the
reference bitwise for every valid config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simt import GPU, LaunchConfig, Session


class ScheduleRejectedError(ValueError):
    """Schedule config violates a divisibility constraint of the workload."""


@dataclass(frozen=True)
class ConvWorkload:
    """Shape of one convolution: input extents, filter extents, and strides."""

    n: int
    c: int
    h: int
    w: int
    k: int
    r: int
    s: int
    stride: tuple = (1, 1)
    pad: tuple = (0, 0)
    dilation: tuple = (1, 1)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stride", tuple(int(x) for x in self.stride))
        object.__setattr__(self, "pad", tuple(int(x) for x in self.pad))
        object.__setattr__(self, "dilation", tuple(int(x) for x in self.dilation))
        for name in ("n", "c", "h", "w", "k", "r", "s", "groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if any(x < 1 for x in self.stride) or any(x < 1 for x in self.dilation):
            raise ValueError("stride and dilation must be >= 1")
        if any(x < 0 for x in self.pad):
            raise ValueError("pad must be >= 0")
        if self.c % self.groups or self.k % self.groups:
            raise ValueError(f"c={self.c} and k={self.k} must be divisible by groups={self.groups}")
        if self.oh < 1 or self.ow < 1:
            raise ValueError(f"output extents must be >= 1, got oh={self.oh} ow={self.ow}")

    @property
    def oh(self) -> int:
        return (self.h + 2 * self.pad[0] - self.dilation[0] * (self.r - 1) - 1) // self.stride[0] + 1

    @property
    def ow(self) -> int:
        return (self.w + 2 * self.pad[1] - self.dilation[1] * (self.s - 1) - 1) // self.stride[1] + 1

    def key(self) -> str:
        """Canonical records-database key, bit-exact."""
        return (
            f"conv2d/{self.n}-{self.c}-{self.h}-{self.w}/{self.k}-{self.r}-{self.s}/"
            f"{self.stride[0]}x{self.stride[1]}/{self.pad[0]}x{self.pad[1]}/"
            f"{self.dilation[0]}x{self.dilation[1]}/{self.groups}"
        )

    @classmethod
    def from_key(cls, key: str) -> "ConvWorkload":
        parts = key.strip().split("/")
        if len(parts) != 7 or parts[0] != "conv2d":
            raise ValueError(f"malformed workload key {key!r}")
        try:
            n, c, h, w = (int(x) for x in parts[1].split("-"))
            k, r, s = (int(x) for x in parts[2].split("-"))
            sh, sw = (int(x) for x in parts[3].split("x"))
            ph, pw = (int(x) for x in parts[4].split("x"))
            dh, dw = (int(x) for x in parts[5].split("x"))
            groups = int(parts[6])
        except ValueError as e:
            raise ValueError(f"malformed workload key {key!r}: {e}") from None
        return cls(n=n, c=c, h=h, w=w, k=k, r=r, s=s, stride=(sh, sw), pad=(ph, pw),
                   dilation=(dh, dw), groups=groups)


@dataclass(frozen=True)
class ScheduleConfig:
    """One point of the schedule space.

    oc_split groups the output channels (one block per group), h_split
    cuts the output height into bands (more blocks), w_tile and vec set
    the per-block thread count over the column domain, unroll flattens
    the reduction nest. vec must divide oc_split; every split must divide
    its axis.
    """

    oc_split: int = 1
    h_split: int = 1
    w_tile: int = 1
    unroll: int = 0
    vec: int = 1

    def __post_init__(self):
        for name in ("oc_split", "h_split", "w_tile", "vec"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.unroll not in (0, 1):
            raise ValueError(f"unroll must be 0 or 1, got {self.unroll}")
        if self.oc_split % self.vec:
            raise ValueError(f"vec={self.vec} must divide oc_split={self.oc_split}")

    def validate_for(self, wl: ConvWorkload) -> None:
        if wl.k % self.oc_split:
            raise ScheduleRejectedError(f"oc_split={self.oc_split} does not divide k={wl.k}")
        if wl.oh % self.h_split:
            raise ScheduleRejectedError(f"h_split={self.h_split} does not divide oh={wl.oh}")
        if wl.ow % self.w_tile:
            raise ScheduleRejectedError(f"w_tile={self.w_tile} does not divide ow={wl.ow}")

    def as_dict(self) -> dict:
        return {
            "oc_split": self.oc_split,
            "h_split": self.h_split,
            "w_tile": self.w_tile,
            "unroll": self.unroll,
            "vec": self.vec,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def _check_shapes(inp: np.ndarray, wgt: np.ndarray, wl: ConvWorkload) -> None:
    if inp.shape != (wl.n, wl.c, wl.h, wl.w):
        raise ValueError(f"input shape {inp.shape} does not match workload {(wl.n, wl.c, wl.h, wl.w)}")
    if wgt.shape != (wl.k, wl.c // wl.groups, wl.r, wl.s):
        raise ValueError(
            f"weight shape {wgt.shape} does not match workload {(wl.k, wl.c // wl.groups, wl.r, wl.s)}"
        )


def _padded(inp: np.ndarray, wl: ConvWorkload) -> np.ndarray:
    ph, pw = wl.pad
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(inp, dtype=np.float32)
    return np.pad(inp.astype(np.float32), ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_reference(inp, wgt, wl: ConvWorkload) -> np.ndarray:
    """Direct convolution, f32 accumulate, fixed (r, s, c ascending) order."""
    inp = np.asarray(inp, dtype=np.float32)
    wgt = np.asarray(wgt, dtype=np.float32)
    _check_shapes(inp, wgt, wl)
    x = _padded(inp, wl)
    sh, sw = wl.stride
    dh, dw = wl.dilation
    oh, ow = wl.oh, wl.ow
    cg = wl.c // wl.groups
    kg = wl.k // wl.groups
    out = np.zeros((wl.n, wl.k, oh, ow), np.float32)
    for ni in range(wl.n):
        for ki in range(wl.k):
            g = ki // kg
            acc = np.zeros((oh, ow), np.float32)
            for ri in range(wl.r):
                for si in range(wl.s):
                    for ci in range(cg):
                        patch = x[
                            ni,
                            g * cg + ci,
                            ri * dh : ri * dh + (oh - 1) * sh + 1 : sh,
                            si * dw : si * dw + (ow - 1) * sw + 1 : sw,
                        ]
                        acc += patch * wgt[ki, ci, ri, si]
            out[ni, ki] = acc
    return out


def conv2d_scheduled(inp, wgt, wl: ConvWorkload, cfg: ScheduleConfig,
                     session: Session | None = None) -> np.ndarray:
    """Convolution through the emulator under a schedule config.

    The launch uses grid = oc_split * h_split blocks; each block's
    w_tile * vec threads share the columns of the block's channel group
    and height band. Per-element accumulation order matches the
    reference, so results agree bitwise.
    """
    inp = np.asarray(inp, dtype=np.float32)
    wgt = np.asarray(wgt, dtype=np.float32)
    _check_shapes(inp, wgt, wl)
    cfg.validate_for(wl)
    sess = session if session is not None else Session()

    x = _padded(inp, wl)
    sh, sw = wl.stride
    dh, dw = wl.dilation
    oh, ow = wl.oh, wl.ow
    cg = wl.c // wl.groups
    kg_grp = wl.k // wl.groups
    k_per_block = wl.k // cfg.oc_split
    band = oh // cfg.h_split
    threads = cfg.w_tile * cfg.vec

    xbuf = sess.alloc(x.size, "f32", device=GPU, name="conv_in")
    xbuf.load(x.reshape(-1))
    wbuf = sess.alloc(wgt.size, "f32", device=GPU, name="conv_w")
    wbuf.load(wgt.reshape(-1))
    obuf = sess.alloc(wl.n * wl.k * oh * ow, "f32", device=GPU, name="conv_out")

    red = [(ri, si, ci) for ri in range(wl.r) for si in range(wl.s) for ci in range(cg)]

    def kernel(ctx):
        x4 = xbuf.as_array(x.shape)
        w4 = wbuf.as_array(wgt.shape)
        o4 = obuf.as_array((wl.n, wl.k, oh, ow))
        kb = (ctx.block_id // cfg.h_split) * k_per_block
        y0 = (ctx.block_id % cfg.h_split) * band
        t = ctx.thread_id
        csize = len(range(t, ow, ctx.block_dim))
        if not ctx.guard(csize > 0):
            return
        ctx.add_work(k_per_block * band * csize * wl.n)
        cstep = ctx.block_dim * sw
        rs0 = y0 * sh
        rs1 = rs0 + (band - 1) * sh + 1
        for ni in range(wl.n):
            for ki in range(kb, kb + k_per_block):
                g = ki // kg_grp
                wk = w4[ki]
                acc = np.zeros((band, csize), np.float32)
                if cfg.unroll:
                    for ri, si, ci in red:
                        c0 = t * sw + si * dw
                        patch = x4[ni, g * cg + ci,
                                   rs0 + ri * dh : rs1 + ri * dh : sh,
                                   c0 : c0 + (csize - 1) * cstep + 1 : cstep]
                        acc += patch * wk[ci, ri, si]
                else:
                    for ri in range(wl.r):
                        for si in range(wl.s):
                            c0 = t * sw + si * dw
                            for ci in range(cg):
                                patch = x4[ni, g * cg + ci,
                                           rs0 + ri * dh : rs1 + ri * dh : sh,
                                           c0 : c0 + (csize - 1) * cstep + 1 : cstep]
                                acc += patch * wk[ci, ri, si]
                o4[ni, ki, y0 : y0 + band, t : ow : ctx.block_dim] = acc

    sess.launch(kernel, LaunchConfig(grid=cfg.oc_split * cfg.h_split, block=threads))
    return obuf.to_numpy().reshape(wl.n, wl.k, oh, ow)


def _divisors(x: int) -> list[int]:
    return [d for d in range(1, x + 1) if x % d == 0]


def schedule_space(wl: ConvWorkload, vec_options=(1, 4, 8)) -> list[ScheduleConfig]:
    """All valid configs for a workload, in a fixed enumeration order.

    Cartesian product of divisors(k) x divisors(oh) x divisors(ow) x
    unroll {0, 1} x ({1, 4, 8} intersected with divisors(oc_split)).
    The all-ones default is always the first entry.
    """
    out = []
    for oc in _divisors(wl.k):
        vecs = [v for v in vec_options if oc % v == 0]
        for hs in _divisors(wl.oh):
            for wt in _divisors(wl.ow):
                for un in (0, 1):
                    for v in vecs:
                        out.append(ScheduleConfig(oc_split=oc, h_split=hs, w_tile=wt, unroll=un, vec=v))
    return out
