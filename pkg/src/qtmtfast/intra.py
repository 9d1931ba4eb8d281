"""Single-CU intra coding cost: predict, transform, quantize, reconstruct, estimate rate.

Every supported prediction is a fixed linear function of a reference vector laid
out as ``[corner, top[0..w-1], left[0..h-1]]``. Per block shape the gather
indices and weights are built once and cached.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property, lru_cache
from typing import NamedTuple

import numpy as np
from numba import njit

MID_VALUE = 128
MODE_BITS = 4.0
PARTITION_CHOICE_BITS = 3.0


class IntraMode(IntEnum):
    PLANAR = 0
    DC = 1
    HOR = 2
    VER = 3
    DIAG_DOWN_RIGHT = 4
    DIAG_DOWN_LEFT = 5
    VER_RIGHT = 6
    HOR_DOWN = 7
    HOR_UP = 8


N_MODES = len(IntraMode)


@dataclass(frozen=True)
class QpLambda:
    qp: int

    @cached_property
    def lam(self) -> float:
        return 0.57 * 2.0 ** ((self.qp - 12) / 3.0)

    @cached_property
    def step(self) -> float:
        return 2.0 ** ((self.qp - 4) / 6.0)


class RdCost(NamedTuple):
    distortion: int
    rate_bits: float
    j: float

    @classmethod
    def of(cls, distortion, rate_bits, lam: float) -> "RdCost":
        distortion = int(distortion)
        rate_bits = float(rate_bits)
        return cls(distortion, rate_bits, distortion + lam * rate_bits)


INFEASIBLE = RdCost(0, 0.0, float("inf"))


def combine(costs, extra_bits: float, lam: float) -> RdCost:
    """Sum child costs and add signaling bits; j is recomputed from the totals."""
    d = 0
    r = extra_bits
    for c in costs:
        if c.j == float("inf"):
            return INFEASIBLE
        d += c.distortion
        r += c.rate_bits
    return RdCost.of(d, r, lam)


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


def forward_dct(block: np.ndarray) -> np.ndarray:
    h, w = block.shape[-2:]
    return dct_matrix(h) @ block @ dct_matrix(w).T


def inverse_dct(coef: np.ndarray) -> np.ndarray:
    h, w = coef.shape[-2:]
    return dct_matrix(h).T @ coef @ dct_matrix(w)


def quantize(coef: np.ndarray, step: float) -> np.ndarray:
    return np.sign(coef) * np.floor(np.abs(coef) / step + 0.5)


def coefficient_bits(levels: np.ndarray) -> np.ndarray:
    """Rate proxy over the trailing two axes; leading axes are batched.

    Each nonzero level costs 2*ceil(log2(|l|+1)) + 1 bits and every run of
    zeros that precedes a nonzero level (raster order) costs half a bit.
    """
    flat = levels.reshape(levels.shape[:-2] + (-1,))
    mag = np.abs(flat)
    nz = mag > 0
    # for integers >= 1, ceil(log2(m + 1)) is the bit length of m
    _, exp = np.frexp(mag)
    bits = np.where(nz, 2 * exp + 1, 0).sum(axis=-1)
    runs = (~nz[..., :-1] & nz[..., 1:]).sum(axis=-1)
    return bits + 0.5 * runs


def _ref_index(w: int):
    def top(i):
        return 1 + i if i >= 0 else 0

    def left(j):
        return 1 + w + j if j >= 0 else 0

    return top, left


def _line_taps(pos: float, limit: int, index):
    """Linear interpolation on a reference line indexed -1..limit-1, clamped at the end."""
    pos = min(pos, limit - 1)
    lo = int(np.floor(pos))
    frac = pos - lo
    if frac == 0:
        return [(index(lo), 1.0)]
    return [(index(lo), 1.0 - frac), (index(lo + 1), frac)]


@lru_cache(maxsize=None)
def _prediction_taps(w: int, h: int):
    """Gather indices and weights, shape (N_MODES, 4, h, w). DC is filled separately."""
    idx = np.zeros((N_MODES, 4, h, w), dtype=np.intp)
    wt = np.zeros((N_MODES, 4, h, w))
    top, left = _ref_index(w)

    def put(mode, y, x, taps):
        for k, (i, a) in enumerate(taps):
            idx[mode, k, y, x] = i
            wt[mode, k, y, x] = a

    for y in range(h):
        for x in range(w):
            put(IntraMode.PLANAR, y, x, [
                (top(x), 0.5 * (h - 1 - y) / h), (left(h - 1), 0.5 * (y + 1) / h),
                (left(y), 0.5 * (w - 1 - x) / w), (top(w - 1), 0.5 * (x + 1) / w)])
            put(IntraMode.HOR, y, x, [(left(y), 1.0)])
            put(IntraMode.VER, y, x, [(top(x), 1.0)])
            # 45 degrees from the top-left corner
            if x > y:
                put(IntraMode.DIAG_DOWN_RIGHT, y, x, [(top(x - y - 1), 1.0)])
            elif x < y:
                put(IntraMode.DIAG_DOWN_RIGHT, y, x, [(left(y - x - 1), 1.0)])
            else:
                put(IntraMode.DIAG_DOWN_RIGHT, y, x, [(0, 1.0)])
            put(IntraMode.DIAG_DOWN_LEFT, y, x, _line_taps(x + y + 1, w, top))
            put(IntraMode.HOR_UP, y, x, _line_taps(x + y + 1, h, left))
            # half slope, vertical and horizontal flavours
            p = x - (y + 1) / 2
            if p >= -1:
                put(IntraMode.VER_RIGHT, y, x, _line_taps(p, w, top))
            else:
                put(IntraMode.VER_RIGHT, y, x, [(left(y - 2 * (x + 1)), 1.0)])
            q = y - (x + 1) / 2
            if q >= -1:
                put(IntraMode.HOR_DOWN, y, x, _line_taps(q, h, left))
            else:
                put(IntraMode.HOR_DOWN, y, x, [(top(x - 2 * (y + 1)), 1.0)])
    idx.setflags(write=False)
    wt.setflags(write=False)
    return idx, wt


def reference_vector(ref: np.ndarray, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Corner, top row and left column around a CU; off-plane samples become 128."""
    vec = np.full(1 + w + h, float(MID_VALUE))
    if y0 > 0:
        vec[1:1 + w] = ref[y0 - 1, x0:x0 + w]
    if x0 > 0:
        vec[1 + w:] = ref[y0:y0 + h, x0 - 1]
    if x0 > 0 and y0 > 0:
        vec[0] = ref[y0 - 1, x0 - 1]
    return vec


def predict_all(ref: np.ndarray, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Predictions for every mode, shape (N_MODES, h, w), integer-valued floats."""
    vec = reference_vector(ref, x0, y0, w, h)
    idx, wt = _prediction_taps(w, h)
    pred = (vec[idx] * wt).sum(axis=1)
    pred[IntraMode.DC] = vec[1:].mean()
    return np.floor(pred + 0.5)


def predict_intra(ref: np.ndarray, cu, mode: int) -> np.ndarray:
    """Prediction of one mode for a CU (anything with x0, y0, width, height)."""
    return predict_all(ref, cu.x0, cu.y0, cu.width, cu.height)[int(mode)].astype(np.int32)


class LeafResult(NamedTuple):
    cost: RdCost
    mode: IntraMode
    recon: np.ndarray


# below this size hand-written loops beat a BLAS call
_LOOP_LIMIT = 8


@njit(cache=True)
def _mat_left(a, b, out):
    # out = a @ b
    n, k = a.shape
    m = b.shape[1]
    for i in range(n):
        for j in range(m):
            out[i, j] = 0.0
        for t in range(k):
            v = a[i, t]
            for j in range(m):
                out[i, j] += v * b[t, j]


@njit(cache=True)
def _mat_right_t(a, b, out):
    # out = a @ b.T
    n, k = a.shape
    m = b.shape[0]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[j, t]
            out[i, j] = s


@njit(cache=True)
def _mat_left_t(a, b, out):
    # out = a.T @ b
    k, n = a.shape
    m = b.shape[1]
    for i in range(n):
        for j in range(m):
            out[i, j] = 0.0
    for t in range(k):
        for i in range(n):
            v = a[t, i]
            for j in range(m):
                out[i, j] += v * b[t, j]


@njit(cache=True)
def _leaf_kernel(orig, ref, x0, y0, idx, wt, ch, cw, step, lam, dc_mode, side_bits):
    n_modes, n_taps, h, w = idx.shape
    small = h <= _LOOP_LIMIT and w <= _LOOP_LIMIT
    vec = np.full(1 + w + h, 128.0)
    if y0 > 0:
        for i in range(w):
            vec[1 + i] = ref[y0 - 1, x0 + i]
    if x0 > 0:
        for j in range(h):
            vec[1 + w + j] = ref[y0 + j, x0 - 1]
    if x0 > 0 and y0 > 0:
        vec[0] = ref[y0 - 1, x0 - 1]
    block = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            block[y, x] = orig[y0 + y, x0 + x]
    dc = np.floor(vec[1:].mean() + 0.5)
    pred = np.empty((h, w))
    resid = np.empty((h, w))
    tmp = np.empty((h, w))
    coef = np.empty((h, w))
    levels = np.empty((h, w))
    rec = np.empty((h, w))
    cwt = cw.T.copy()
    cht = ch.T.copy()
    best_j = np.inf
    best_mode = 0
    best_dist = 0.0
    best_rate = 0.0
    best_rec = np.empty((h, w), dtype=np.uint8)
    for m in range(n_modes):
        if m == dc_mode:
            pred[:, :] = dc
        else:
            for y in range(h):
                for x in range(w):
                    s = 0.0
                    for k in range(n_taps):
                        s += vec[idx[m, k, y, x]] * wt[m, k, y, x]
                    pred[y, x] = np.floor(s + 0.5)
        for y in range(h):
            for x in range(w):
                resid[y, x] = block[y, x] - pred[y, x]
        if small:
            _mat_left(ch, resid, tmp)
            _mat_right_t(tmp, cw, coef)
        else:
            coef = np.dot(np.dot(ch, resid), cwt)
        rate = side_bits
        prev_zero = False
        for y in range(h):
            for x in range(w):
                c = coef[y, x]
                a = np.floor(abs(c) / step + 0.5)
                if a > 0:
                    v = np.int64(a)
                    e = 0
                    while v > 0:
                        v >>= 1
                        e += 1
                    rate += 2 * e + 1
                    if prev_zero:
                        rate += 0.5
                    prev_zero = False
                    levels[y, x] = a * step if c > 0 else -a * step
                else:
                    prev_zero = True
                    levels[y, x] = 0.0
        if small:
            _mat_left_t(ch, levels, tmp)
            _mat_left(tmp, cw, rec)
        else:
            rec = np.dot(np.dot(cht, levels), cw)
        dist = 0.0
        for y in range(h):
            for x in range(w):
                r = np.floor(rec[y, x] + pred[y, x] + 0.5)
                if r < 0.0:
                    r = 0.0
                elif r > 255.0:
                    r = 255.0
                rec[y, x] = r
                d = block[y, x] - r
                dist += d * d
        j = dist + lam * rate
        if j < best_j:
            best_j = j
            best_mode = m
            best_dist = dist
            best_rate = rate
            for y in range(h):
                for x in range(w):
                    best_rec[y, x] = np.uint8(rec[y, x])
    return best_mode, best_dist, best_rate, best_rec


_SHAPES: dict = {}
_MODE_LIST = tuple(IntraMode)


def _shape_tables(w: int, h: int):
    tab = _SHAPES.get((w, h))
    if tab is None:
        idx, wt = _prediction_taps(w, h)
        # writable copies: numba dispatch on read-only arrays is much slower
        tab = (idx.copy(), wt.copy(), dct_matrix(h).copy(), dct_matrix(w).copy())
        _SHAPES[(w, h)] = tab
    return tab


def cu_rd_cost(orig: np.ndarray, ref: np.ndarray, x0: int, y0: int, w: int, h: int,
               qp: QpLambda) -> LeafResult:
    """Best-mode RD cost of coding the rectangle as one intra CU.

    ``orig`` supplies the samples to code, ``ref`` the neighbor samples used for
    prediction. Nothing is written back.
    """
    if w <= 0 or h <= 0:
        raise ValueError(f"invalid CU size {w}x{h}")
    if x0 < 0 or y0 < 0 or x0 + w > orig.shape[1] or y0 + h > orig.shape[0]:
        raise ValueError(f"CU {w}x{h} at ({x0}, {y0}) outside the plane")
    idx, wt, ch, cw = _shape_tables(w, h)
    mode, dist, rate, rec = _leaf_kernel(orig, ref, x0, y0, idx, wt, ch, cw, qp.step, qp.lam,
                                         _DC, _SIDE_BITS)
    dist = int(dist)
    return LeafResult(RdCost(dist, rate, dist + qp.lam * rate), _MODE_LIST[mode], rec)


_DC = int(IntraMode.DC)
_SIDE_BITS = MODE_BITS + PARTITION_CHOICE_BITS
