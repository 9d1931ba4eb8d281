"""Recursive QTMT partition search.

Costs of a CU do not depend on how its siblings were coded (prediction reads
the reference plane, which the encoder only updates between CTUs), so the
search is a memoized recursion and, with no hooks armed, returns the exact
minimum over every legal tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np

from .frame_io import BLOCK
from .intra import INFEASIBLE, PARTITION_CHOICE_BITS, IntraMode, QpLambda, RdCost, cu_rd_cost

MAX_DEPTH = 6
SPLIT_BITS = 3.0


class PartitionMode(Enum):
    NONE = "NONE"
    QT = "QT"
    BTH = "BTH"
    BTV = "BTV"
    TTH = "TTH"
    TTV = "TTV"

    # identity hash: the default hashes the member name in Python code, which
    # dominates set lookups in the search loop
    __hash__ = object.__hash__

    @property
    def is_split(self) -> bool:
        return self is not PartitionMode.NONE


SPLIT_MODES = (PartitionMode.QT, PartitionMode.BTH, PartitionMode.BTV,
               PartitionMode.TTH, PartitionMode.TTV)
BOUNDARY_MODES = frozenset({PartitionMode.QT, PartitionMode.BTH, PartitionMode.BTV})


class CuNode(NamedTuple):
    x0: int
    y0: int
    width: int
    height: int
    depth: int = 0
    mtt_started: bool = False

    @property
    def key(self):
        return tuple(self)


_LEGAL: dict = {}


def legal_splits(cu: CuNode) -> frozenset:
    k = (cu.width, cu.height, cu.depth, bool(cu.mtt_started))
    out = _LEGAL.get(k)
    if out is None:
        out = _LEGAL[k] = _legal_splits(*k)
    return out


def _legal_splits(w: int, h: int, depth: int, mtt_started: bool) -> frozenset:
    if depth >= MAX_DEPTH or (w == 4 and h == 4):
        return frozenset()
    out = set()
    if w == h and w >= 16 and not mtt_started:
        out.add(PartitionMode.QT)
    if h // 2 >= 4:
        out.add(PartitionMode.BTH)
    if w // 2 >= 4:
        out.add(PartitionMode.BTV)
    if h >= 16:
        out.add(PartitionMode.TTH)
    if w >= 16:
        out.add(PartitionMode.TTV)
    return frozenset(out)


_LAYOUT: dict = {}


def _layout(w: int, h: int, mode: PartitionMode):
    """Child rectangles relative to the parent origin."""
    k = (w, h, mode)
    rects = _LAYOUT.get(k)
    if rects is not None:
        return rects
    if mode is PartitionMode.QT:
        hw, hh = w // 2, h // 2
        rects = ((0, 0, hw, hh), (hw, 0, hw, hh), (0, hh, hw, hh), (hw, hh, hw, hh))
    elif mode is PartitionMode.BTH:
        rects = ((0, 0, w, h // 2), (0, h // 2, w, h // 2))
    elif mode is PartitionMode.BTV:
        rects = ((0, 0, w // 2, h), (w // 2, 0, w // 2, h))
    elif mode is PartitionMode.TTH:
        q = h // 4
        rects = ((0, 0, w, q), (0, q, w, 2 * q), (0, 3 * q, w, q))
    elif mode is PartitionMode.TTV:
        q = w // 4
        rects = ((0, 0, q, h), (q, 0, 2 * q, h), (3 * q, 0, q, h))
    else:
        raise ValueError(f"{mode} is not a split")
    _LAYOUT[k] = rects
    return rects


def split_children(cu: CuNode, mode: PartitionMode) -> list:
    x, y = cu.x0, cu.y0
    d = cu.depth + 1
    mtt = cu.mtt_started or mode is not PartitionMode.QT
    return [CuNode(x + dx, y + dy, cw, ch, d, mtt) for dx, dy, cw, ch in _layout(cu.width, cu.height, mode)]


@dataclass(slots=True)
class CuTree:
    cu: CuNode
    mode: PartitionMode
    cost: RdCost
    children: tuple = ()
    intra_mode: Optional[IntraMode] = None
    recon: Optional[np.ndarray] = field(default=None, repr=False)
    outside: bool = False

    def leaves(self):
        if self.outside:
            return
        if self.mode is PartitionMode.NONE:
            yield self
        else:
            for c in self.children:
                yield from c.leaves()

    def nodes(self):
        """Every coded node with the mode of the split that produced it."""
        stack = [(self, PartitionMode.NONE)]
        while stack:
            node, parent_mode = stack.pop()
            if node.outside:
                continue
            yield node, parent_mode
            for c in reversed(node.children):
                stack.append((c, node.mode))

    def max_depth(self) -> int:
        return max((lf.cu.depth for lf in self.leaves()), default=0)

    def to_json(self) -> dict:
        d = {"x": self.cu.x0, "y": self.cu.y0, "w": self.cu.width, "h": self.cu.height,
             "depth": self.cu.depth, "mode": self.mode.value}
        if self.outside:
            d["outside"] = True
        elif self.mode is PartitionMode.NONE:
            d["intra_mode"] = int(self.intra_mode)
        else:
            d["children"] = [c.to_json() for c in self.children]
        return d


@dataclass
class SearchHooks:
    """Optional pruning. With every field left at its default the search is exhaustive.

    ``depth_cap(cu)`` returns the deepest depth the CU may split into;
    ``mode_order(cu)`` returns split modes in the order they should be tried.
    """

    depth_cap: Optional[Callable[[CuNode], int]] = None
    mode_order: Optional[Callable[[CuNode], Iterable[PartitionMode]]] = None
    early_stop: bool = False


class CtuCoster:
    """Leaf-cost provider for one CTU with a per-rectangle cache.

    ``orig`` is the plane being coded, ``ref`` the plane neighbors are read from.
    """

    def __init__(self, orig: np.ndarray, ref: np.ndarray, qp: QpLambda):
        self.orig = orig
        self.ref = ref
        self.qp = qp
        self.lam = qp.lam
        self.height, self.width = orig.shape
        self.cache: dict = {}
        self.evaluations = 0

    def coverage(self, cu: CuNode) -> str:
        if cu.x0 >= self.width or cu.y0 >= self.height:
            return "out"
        if cu.x0 + cu.width <= self.width and cu.y0 + cu.height <= self.height:
            return "in"
        return "partial"

    def leaf(self, cu: CuNode):
        key = cu[:4]
        res = self.cache.get(key)
        if res is None:
            res = cu_rd_cost(self.orig, self.ref, cu.x0, cu.y0, cu.width, cu.height, self.qp)
            self.cache[key] = res
            self.evaluations += 1
        return res


def evaluate_modes(initial: Optional[CuTree], modes, evaluate, early_stop: bool):
    """Try split modes in order against the best option so far.

    Returns (best, tested). With ``early_stop`` the loop ends at the first mode
    whose cost is strictly larger than the best so far.
    """
    best = initial
    tested = []
    for m in modes:
        cand = evaluate(m)
        tested.append(m)
        if best is None or cand.cost.j < best.cost.j:
            best = cand
        elif early_stop and cand.cost.j > best.cost.j:
            break
    return best, tested


def search(cu: CuNode, hooks: SearchHooks, coster: CtuCoster, memo: Optional[dict] = None) -> CuTree:
    """Best partition tree for ``cu``. The root (depth 0) is never coded as a leaf."""
    if memo is None:
        memo = {}
    return _search(cu, hooks or SearchHooks(), coster, memo)


_OUTSIDE_COST = RdCost(0, 0.0, 0.0)


def _search(cu: CuNode, hooks: SearchHooks, coster: CtuCoster, memo: dict) -> CuTree:
    hit = memo.get(cu)
    if hit is not None:
        return hit
    x0, y0, w, h, depth, _ = cu
    if x0 >= coster.width or y0 >= coster.height:
        node = CuTree(cu, PartitionMode.NONE, _OUTSIDE_COST, outside=True)
        memo[cu] = node
        return node
    inside = x0 + w <= coster.width and y0 + h <= coster.height

    best = None
    if inside and depth > 0:
        res = coster.leaf(cu)
        best = CuTree(cu, PartitionMode.NONE, res.cost, intra_mode=res.mode, recon=res.recon)

    splits = legal_splits(cu)
    if not inside:
        # boundary CUs must split; only QT/BT may cross the frame edge
        splits = splits & BOUNDARY_MODES
    elif splits and hooks.depth_cap is not None and depth >= hooks.depth_cap(cu):
        splits = _NO_SPLITS

    if splits:
        if hooks.mode_order is not None:
            order = [m for m in hooks.mode_order(cu) if m in splits]
        else:
            order = [m for m in SPLIT_MODES if m in splits]
        lam = coster.lam

        def evaluate(mode):
            d = 0
            r = SPLIT_BITS
            kids = []
            for c in split_children(cu, mode):
                k = _search(c, hooks, coster, memo)
                kc = k.cost
                if kc.j == _INF:
                    return CuTree(cu, mode, INFEASIBLE, ())
                d += kc.distortion
                r += kc.rate_bits
                kids.append(k)
            return CuTree(cu, mode, RdCost(d, r, d + lam * r), tuple(kids))

        best, _ = evaluate_modes(best, order, evaluate, hooks.early_stop and inside)

    if best is None:
        best = CuTree(cu, PartitionMode.NONE, INFEASIBLE)
    memo[cu] = best
    return best


_INF = float("inf")
_NO_SPLITS = frozenset()


def depth_grid_of(tree: CuTree, grid_shape=None, origin=None) -> np.ndarray:
    """Depth per 8x8 block under the tree; 0 marks blocks no leaf covers.

    Leaves narrower or shorter than 8 write the maximum depth into their block.
    """
    ox, oy = origin if origin is not None else (tree.cu.x0, tree.cu.y0)
    if grid_shape is None:
        grid_shape = (-(-tree.cu.height // BLOCK), -(-tree.cu.width // BLOCK))
    grid = np.zeros(grid_shape, dtype=np.int8)
    for lf in tree.leaves():
        c = lf.cu
        bx0 = (c.x0 - ox) // BLOCK
        by0 = (c.y0 - oy) // BLOCK
        bx1 = (c.x0 - ox + c.width - 1) // BLOCK + 1
        by1 = (c.y0 - oy + c.height - 1) // BLOCK + 1
        region = grid[by0:by1, bx0:bx1]
        np.maximum(region, c.depth, out=region)
    return grid


def tree_from_json(d: dict) -> tuple:
    """Parse a JSON tree back into nested (x, y, w, h, depth, mode, children) tuples."""
    kids = tuple(tree_from_json(c) for c in d.get("children", ()))
    return (d["x"], d["y"], d["w"], d["h"], d["depth"], PartitionMode(d["mode"]), kids)


__all__ = [
    "CtuCoster", "CuNode", "CuTree", "MAX_DEPTH", "PARTITION_CHOICE_BITS", "PartitionMode",
    "SPLIT_BITS", "SPLIT_MODES", "SearchHooks", "depth_grid_of", "evaluate_modes",
    "legal_splits", "search", "split_children", "tree_from_json",
]
