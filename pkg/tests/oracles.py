"""Independent reference implementations used by the tests.

Nothing here imports the search, the network code or the metric code under
test; each oracle recomputes its quantity from first principles.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

# ---------------------------------------------------------------------------
# single-CU cost


def oracle_lambda(qp):
    return 0.57 * 2.0 ** ((qp - 12) / 3.0)


def oracle_step(qp):
    return 2.0 ** ((qp - 4) / 6.0)


def _dct(n):
    c = np.empty((n, n))
    for k in range(n):
        a = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        for i in range(n):
            c[k, i] = a * math.cos(math.pi * (2 * i + 1) * k / (2 * n))
    return c


def _refs(ref, x0, y0, w, h):
    top = [128.0] * w
    left = [128.0] * h
    corner = 128.0
    if y0 > 0:
        top = [float(ref[y0 - 1, x0 + i]) for i in range(w)]
    if x0 > 0:
        left = [float(ref[y0 + j, x0 - 1]) for j in range(h)]
    if x0 > 0 and y0 > 0:
        corner = float(ref[y0 - 1, x0 - 1])
    return corner, top, left


def _line(vals, corner, pos, limit):
    """Sample a reference line at a fractional position; index -1 is the corner."""
    pos = min(pos, limit - 1)

    def at(i):
        return corner if i < 0 else vals[i]

    lo = math.floor(pos)
    frac = pos - lo
    if frac == 0:
        return at(lo) * 1.0
    return at(lo) * (1.0 - frac) + at(lo + 1) * frac


def oracle_predictions(ref, x0, y0, w, h):
    """Nine predictions, in mode-id order, each an (h, w) float array of rounded samples."""
    corner, top, left = _refs(ref, x0, y0, w, h)
    preds = np.zeros((9, h, w))
    dc = math.floor(sum(top + left) / (w + h) + 0.5)
    for y in range(h):
        for x in range(w):
            s = 0.0
            s += top[x] * (0.5 * (h - 1 - y) / h)
            s += left[h - 1] * (0.5 * (y + 1) / h)
            s += left[y] * (0.5 * (w - 1 - x) / w)
            s += top[w - 1] * (0.5 * (x + 1) / w)
            planar = s
            if x > y:
                ddr = top[x - y - 1]
            elif x < y:
                ddr = left[y - x - 1]
            else:
                ddr = corner
            p = x - (y + 1) / 2
            vr = _line(top, corner, p, w) if p >= -1 else left[y - 2 * (x + 1)]
            q = y - (x + 1) / 2
            hd = _line(left, corner, q, h) if q >= -1 else top[x - 2 * (y + 1)]
            vals = [planar, dc, left[y], top[x], ddr, _line(top, corner, x + y + 1, w),
                    vr, hd, _line(left, corner, x + y + 1, h)]
            for m, v in enumerate(vals):
                preds[m, y, x] = math.floor(v + 0.5)
    return preds


def oracle_rate(levels):
    bits = 0.0
    prev_zero = False
    for v in levels.reshape(-1):
        a = abs(int(v))
        if a:
            bits += 2 * math.ceil(math.log2(a + 1)) + 1
            if prev_zero:
                bits += 0.5
            prev_zero = False
        else:
            prev_zero = True
    return bits


def oracle_leaf(orig, ref, x0, y0, w, h, qp):
    """(j, mode, distortion, rate) of the best intra mode, first mode winning ties."""
    lam, step = oracle_lambda(qp), oracle_step(qp)
    block = orig[y0:y0 + h, x0:x0 + w].astype(np.float64)
    ch, cw = _dct(h), _dct(w)
    best = None
    for m, pred in enumerate(oracle_predictions(ref, x0, y0, w, h)):
        coef = ch @ (block - pred) @ cw.T
        lev = np.sign(coef) * np.floor(np.abs(coef) / step + 0.5)
        rec = np.clip(np.floor(ch.T @ (lev * step) @ cw + pred + 0.5), 0, 255)
        dist = int(((block - rec) ** 2).sum())
        rate = oracle_rate(lev) + 4 + 3
        j = dist + lam * rate
        if best is None or j < best[0]:
            best = (j, m, dist, rate)
    return best


# ---------------------------------------------------------------------------
# partition trees

_MODES = ("QT", "BTH", "BTV", "TTH", "TTV")


def oracle_splits(w, h, depth, mtt):
    if depth >= 6 or (w == 4 and h == 4):
        return []
    out = []
    if w == h and w >= 16 and not mtt:
        out.append("QT")
    if h >= 8:
        out.append("BTH")
    if w >= 8:
        out.append("BTV")
    if h >= 16:
        out.append("TTH")
    if w >= 16:
        out.append("TTV")
    return out


def oracle_children(x, y, w, h, mode):
    if mode == "QT":
        return [(x, y, w // 2, h // 2), (x + w // 2, y, w // 2, h // 2),
                (x, y + h // 2, w // 2, h // 2), (x + w // 2, y + h // 2, w // 2, h // 2)]
    if mode == "BTH":
        return [(x, y, w, h // 2), (x, y + h // 2, w, h // 2)]
    if mode == "BTV":
        return [(x, y, w // 2, h), (x + w // 2, y, w // 2, h)]
    if mode == "TTH":
        return [(x, y, w, h // 4), (x, y + h // 4, w, h // 2), (x, y + 3 * h // 4, w, h // 4)]
    return [(x, y, w // 4, h), (x + w // 4, y, w // 2, h), (x + 3 * w // 4, y, w // 4, h)]


def count_trees(w, h, depth=0, mtt=False, root=True, _memo=None):
    """Number of legal partition trees (root may not be a leaf)."""
    memo = {} if _memo is None else _memo
    key = (w, h, depth, mtt, root)
    if key in memo:
        return memo[key]
    total = 0 if root else 1
    for m in oracle_splits(w, h, depth, mtt):
        prod = 1
        for _, _, cw, ch in oracle_children(0, 0, w, h, m):
            prod *= count_trees(cw, ch, depth + 1, mtt or m != "QT", False, memo)
        total += prod
    memo[key] = total
    return total


def materialize_trees(x, y, w, h, depth=0, mtt=False, root=True):
    """Every legal tree, each as (tuple of leaf rectangles, number of internal nodes)."""
    trees = [] if root else [(((x, y, w, h),), 0)]
    for m in oracle_splits(w, h, depth, mtt):
        combos = [((), 1)]
        for c in oracle_children(x, y, w, h, m):
            sub = materialize_trees(*c, depth + 1, mtt or m != "QT", False)
            combos = [(a + b, ia + ib) for a, ia in combos for b, ib in sub]
        trees.extend(combos)
    return trees


def brute_force_best(trees, leaf_cost, lam):
    """Minimum j over materialized trees; ``leaf_cost(rect)`` gives (distortion, rate)."""
    best = math.inf
    for leaves, internal in trees:
        d = 0
        r = 3.0 * internal
        for rect in leaves:
            ld, lr = leaf_cost(rect)
            d += ld
            r += lr
        best = min(best, d + lam * r)
    return best


def tabulated_best(x, y, w, h, leaf_cost, lam):
    """Exhaustive minimum by tabulating every reachable CU state from the deepest up.

    Minimizing per state is exact because a tree's (distortion, rate) is the
    sum over its disjoint subtrees.
    """
    root = (x, y, w, h, 0, False)
    seen = {root}
    order = []
    queue = deque([root])
    while queue:
        s = queue.popleft()
        order.append(s)
        sx, sy, sw, sh, d, mtt = s
        for m in oracle_splits(sw, sh, d, mtt):
            for c in oracle_children(sx, sy, sw, sh, m):
                cs = (*c, d + 1, mtt or m != "QT")
                if cs not in seen:
                    seen.add(cs)
                    queue.append(cs)
    best = {}
    for s in sorted(order, key=lambda s: -s[4]):
        sx, sy, sw, sh, d, mtt = s
        options = []
        if d > 0:
            options.append(leaf_cost((sx, sy, sw, sh)))
        for m in oracle_splits(sw, sh, d, mtt):
            kids = [best[(*c, d + 1, mtt or m != "QT")] for c in oracle_children(sx, sy, sw, sh, m)]
            options.append((sum(k[0] for k in kids), 3.0 + sum(k[1] for k in kids)))
        best[s] = min(options, key=lambda o: o[0] + lam * o[1])
    dd, rr = best[root]
    return dd + lam * rr, len(order)


# ---------------------------------------------------------------------------
# network


def _relu(v):
    return v if v > 0 else 0.0


def oracle_forward(params, depths):
    """Loop-by-loop forward pass for one 5x5 map of raw depths; returns the 6 probabilities."""
    x = [[depths[r][c] / 6.0 for c in range(5)] for r in range(5)]
    a1 = [[[params["a1_w"][k, 0, 0, 0] * x[r][c] + params["a1_b"][k] for c in range(5)] for r in range(5)]
          for k in range(8)]
    a2 = []
    for o in range(8):
        ch = []
        for r in range(5):
            row = []
            for c in range(5):
                s = params["a2_b"][o]
                for k in range(8):
                    for dr in range(3):
                        for dc in range(3):
                            rr, cc = r + dr - 1, c + dc - 1
                            if 0 <= rr < 5 and 0 <= cc < 5:
                                s += params["a2_w"][o, k, dr, dc] * a1[k][rr][cc]
                row.append(_relu(s))
            ch.append(row)
        a2.append(ch)
    b1 = [[[params["b1_w"][k, 0, 0, 0] * x[r][c] + params["b1_b"][k] for c in range(5)] for r in range(5)]
          for k in range(4)]
    feat = [a2[k][r][c] for k in range(8) for r in range(5) for c in range(5)]
    feat += [b1[k][r][c] for k in range(4) for r in range(5) for c in range(5)]

    def dense(w, b, v, relu):
        out = []
        for i in range(w.shape[0]):
            s = b[i]
            for j in range(w.shape[1]):
                s += w[i, j] * v[j]
            out.append(_relu(s) if relu else s)
        return out

    h1 = dense(params["h1_w"], params["h1_b"], feat, True)
    h2 = dense(params["h2_w"], params["h2_b"], h1, True)
    logits = dense(params["out_w"], params["out_b"], h2, False)
    mx = max(logits)
    e = [math.exp(v - mx) for v in logits]
    s = sum(e)
    return [v / s for v in e]


def oracle_loss(params, x, labels):
    """Mean cross-entropy of one parameter set."""
    return float(_batched_loss({k: v[None] for k, v in params.items()}, x, labels)[0])


def _batched_loss(params, x, labels, masks=None):
    """Mean cross-entropy for B parameter sets at once.

    Every tensor carries a leading batch axis of size B or 1; size-1 axes
    broadcast, so layers before the perturbed one are computed once.
    """
    n = x.shape[0]
    img = x.reshape(1, n, 1, 5, 5)

    def vec(name, c):
        return params[name].reshape(-1, 1, c, 1, 1)

    a1 = vec("a1_w", 8) * img + vec("a1_b", 8)
    pad = np.pad(a1, ((0, 0), (0, 0), (0, 0), (1, 1), (1, 1)))
    z2 = 0.0
    for dr in range(3):
        for dc in range(3):
            win = np.moveaxis(pad[..., dr:dr + 5, dc:dc + 5], 2, -1)             # (B, n, 5, 5, 8)
            w = params["a2_w"][:, :, :, dr, dc]                                   # (B, 8, 8)
            z2 = z2 + win @ w[:, None, None].swapaxes(-1, -2)
    z2 = np.moveaxis(z2, -1, 2) + vec("a2_b", 8)                                  # (B, n, 8, 5, 5)
    pre = [z2.reshape(z2.shape[0], -1)]
    b1 = vec("b1_w", 4) * img + vec("b1_b", 4)
    bsz = max(z2.shape[0], b1.shape[0])
    feat = np.concatenate([np.broadcast_to(np.maximum(z2, 0), (bsz, n, 8, 5, 5)).reshape(bsz, n, -1),
                           np.broadcast_to(b1, (bsz, n, 4, 5, 5)).reshape(bsz, n, -1)], axis=2)
    h = feat
    for w, b, relu in (("h1_w", "h1_b", True), ("h2_w", "h2_b", True), ("out_w", "out_b", False)):
        h = h @ params[w].swapaxes(-1, -2) + params[b][:, None, :]
        if relu:
            pre.append(h.reshape(h.shape[0], -1))
            h = np.maximum(h, 0)
    if masks is not None:
        for z in pre:
            masks.append(z > 0)
    logits = h - h.max(axis=2, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=2, keepdims=True))
    return -logp[:, np.arange(n), labels].mean(axis=1)


def finite_difference_grads(params, x, labels, h=1e-4, chunk=256):
    """Central differences of the loss, one parameter at a time, evaluated in batches.

    Returns (grads, crossed). ``crossed`` is True when some +-h step flips a
    ReLU on or off; the difference then straddles a kink and does not
    estimate the derivative, so such a model/input pair is unusable.
    """
    base = []
    _batched_loss({k: v[None] for k, v in params.items()}, x, labels, base)
    grads = {}
    crossed = False
    for name, v in params.items():
        flat = v.reshape(-1)
        g = np.empty(flat.size)
        for lo in range(0, flat.size, chunk):
            idx = np.arange(lo, min(lo + chunk, flat.size))
            k = len(idx)
            stack = {}
            for other, ov in params.items():
                if other == name:
                    rep = np.repeat(flat[None, :], 2 * k, axis=0)
                    rep[np.arange(k), idx] += h
                    rep[k + np.arange(k), idx] -= h
                    stack[other] = rep.reshape((2 * k,) + v.shape)
                else:
                    stack[other] = ov[None]
            masks = []
            losses = _batched_loss(stack, x, labels, masks)
            crossed = crossed or any(np.any(m != b0) for m, b0 in zip(masks, base))
            g[idx] = (losses[:k] - losses[k:]) / (2 * h)
        grads[name] = g.reshape(v.shape)
    return grads, crossed


def relative_error(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# ---------------------------------------------------------------------------
# Bjontegaard rate difference


def oracle_bdbr(anchor, test):
    """Same definition, computed with a least-squares Vandermonde fit and numerical quadrature."""
    from scipy.integrate import quad

    def fit(points):
        q = np.array([p[1] for p in points], dtype=np.float64)
        lr = np.log10(np.array([p[0] for p in points], dtype=np.float64))
        vander = np.stack([q ** 3, q ** 2, q, np.ones_like(q)], axis=1)
        coef, *_ = np.linalg.lstsq(vander, lr, rcond=None)
        return coef, q.min(), q.max()

    ca, la, ha = fit(anchor)
    ct, lt, ht = fit(test)
    lo, hi = max(la, lt), min(ha, ht)

    def poly(c):
        return lambda v: ((c[0] * v + c[1]) * v + c[2]) * v + c[3]

    diff, _ = quad(lambda v: poly(ct)(v) - poly(ca)(v), lo, hi, epsabs=1e-13, epsrel=1e-13)
    return (10.0 ** (diff / (hi - lo)) - 1.0) * 100.0
