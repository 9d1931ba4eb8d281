"""Partition-mode ordering from neighbor history, with early termination.

Each coded leaf CU is recorded with the split mode that produced it. For a CU
about to be split, the records of its 8 neighbors (current frame where
already coded, and the co-located positions of the previous frame) give an
occurrence count per split mode. Modes seen in the neighborhood are tried
first, most frequent first; the remaining modes follow in canonical order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations
from typing import NamedTuple, Optional

import numpy as np
from numba import njit

from .qtmt import SPLIT_MODES, CuNode, CuTree, PartitionMode, evaluate_modes

UNIT = 4
_NEIGHBOR_OFFSETS = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy) != (0, 0)]


def is_causal(dx: int, dy: int) -> bool:
    return dx < 0 or (dx == 0 and dy < 0)


class PartitionRecord(NamedTuple):
    frame: int
    index: int
    x0: int
    y0: int
    width: int
    height: int
    depth: int
    best_mode: PartitionMode


class PartitionStore:
    """Coded leaf CUs per frame, addressable by any sample they cover."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.records: list[list[PartitionRecord]] = []
        # per frame and 4x4 unit: [0] index of the covering record, [1] its
        # best-mode code (index into SPLIT_MODES); -1 where uncoded
        self.units: list[np.ndarray] = []

    def add_frame(self) -> int:
        self.records.append([])
        self.units.append(np.full((2, -(-self.height // UNIT), -(-self.width // UNIT)), -1, dtype=np.int32))
        return len(self.records) - 1

    @property
    def owner(self) -> list:
        return [u[0] for u in self.units]

    def commit(self, t: int, cu: CuNode, best_mode: PartitionMode) -> PartitionRecord:
        recs = self.records[t]
        rec = PartitionRecord(t, len(recs), cu.x0, cu.y0, cu.width, cu.height, cu.depth, best_mode)
        recs.append(rec)
        ux0, uy0 = cu.x0 // UNIT, cu.y0 // UNIT
        units = self.units[t][:, uy0:uy0 + cu.height // UNIT, ux0:ux0 + cu.width // UNIT]
        units[0] = rec.index
        units[1] = _MODE_CODE.get(best_mode, -1)
        return rec

    def commit_tree(self, t: int, tree: CuTree) -> None:
        for node, parent_mode in tree.nodes():
            if node.mode is PartitionMode.NONE:
                self.commit(t, node.cu, parent_mode)

    def at(self, t: int, px: int, py: int) -> Optional[PartitionRecord]:
        if t < 0 or t >= len(self.records):
            return None
        if px < 0 or py < 0 or px >= self.width or py >= self.height:
            return None
        i = self.units[t][0, py // UNIT, px // UNIT]
        return self.records[t][i] if i >= 0 else None


_MODE_CODE = {m: i for i, m in enumerate(SPLIT_MODES)}


@njit(cache=True)
def reference_counts(cur, prv, has_prv, x0, y0, w, h):
    """Best-mode counts over the deduplicated neighbor records of a CU.

    ``cur``/``prv`` are the unit arrays of the current and previous frame.
    """
    uh, uw = cur.shape[1], cur.shape[2]
    counts = np.zeros(5, dtype=np.int64)
    seen_frame = np.empty(16, dtype=np.int64)
    seen_index = np.empty(16, dtype=np.int64)
    n_seen = 0
    for dy in range(-1, 2):
        for dx in range(-1, 2):
            if dx == 0 and dy == 0:
                continue
            px = x0 - 1 if dx < 0 else (x0 + w if dx > 0 else x0)
            py = y0 - 1 if dy < 0 else (y0 + h if dy > 0 else y0)
            ux = px // 4
            uy = py // 4
            if px < 0 or py < 0 or ux >= uw or uy >= uh:
                continue
            causal = dx < 0 or (dx == 0 and dy < 0)
            for f in range(2):
                if f == 0:
                    if not causal:
                        continue
                    i = cur[0, uy, ux]
                    c = cur[1, uy, ux]
                else:
                    if not has_prv:
                        continue
                    i = prv[0, uy, ux]
                    c = prv[1, uy, ux]
                if i < 0 or c < 0:
                    continue
                dup = False
                for k in range(n_seen):
                    if seen_frame[k] == f and seen_index[k] == i:
                        dup = True
                        break
                if dup:
                    continue
                seen_frame[n_seen] = f
                seen_index[n_seen] = i
                n_seen += 1
                counts[c] += 1
    return counts


@njit(cache=True)
def order_code(cur, prv, has_prv, x0, y0, w, h):
    """Candidate order as a base-5 code of mode indices, most frequent first, canonical on ties."""
    counts = reference_counts(cur, prv, has_prv, x0, y0, w, h)
    order = np.arange(5)
    for a in range(5):
        best = a
        for b in range(a + 1, 5):
            if counts[order[b]] > counts[order[best]]:
                best = b
        v = order[best]
        for b in range(best, a, -1):
            order[b] = order[b - 1]
        order[a] = v
    code = 0
    for a in range(4, -1, -1):
        code = code * 5 + order[a]
    return code


def _encode_order(perm) -> int:
    code = 0
    for a in reversed(perm):
        code = code * 5 + a
    return code


ORDERS = {_encode_order(p): [SPLIT_MODES[i] for i in p] for p in permutations(range(5))}


def candidate_order(store: "PartitionStore", x0: int, y0: int, width: int, height: int,
                    t: int) -> list:
    """Candidate split order for a CU, computed without materializing the references."""
    has_prv = t >= 1
    prv = store.units[t - 1] if has_prv else store.units[t]
    return ORDERS[order_code(store.units[t], prv, has_prv, x0, y0, width, height)]


def build_ref_cus(store: PartitionStore, x0: int, y0: int, width: int, height: int,
                  t: int) -> list[PartitionRecord]:
    """Neighbor records for a CU, deduplicated, in probe order.

    A neighbor is the coded leaf containing the sample one step outside the
    CU's edge in that direction (the CU's own first row/column for a zero
    offset). Causal offsets draw on both the current and the previous frame,
    the rest on the previous frame only.
    """
    out = []
    seen = set()
    for dx, dy in _NEIGHBOR_OFFSETS:
        px = x0 - 1 if dx < 0 else (x0 + width if dx > 0 else x0)
        py = y0 - 1 if dy < 0 else (y0 + height if dy > 0 else y0)
        frames = (t, t - 1) if is_causal(dx, dy) else (t - 1,)
        for f in frames:
            rec = store.at(f, px, py)
            if rec is not None and (rec.frame, rec.index) not in seen:
                seen.add((rec.frame, rec.index))
                out.append(rec)
    return out


@dataclass
class PartitionStats:
    """Candidate split modes with their estimated probability of being best."""

    candidates: list = field(default_factory=list)
    j_min: float = float("inf")
    j_cur: float = float("inf")

    @property
    def order(self) -> list[PartitionMode]:
        return [m for m, _ in self.candidates]

    @property
    def reference_modes(self) -> frozenset:
        return frozenset(m for m, p in self.candidates if p > 0)

    def probability(self, mode: PartitionMode) -> float:
        return dict(self.candidates)[mode]


def mode_probabilities(refs) -> PartitionStats:
    """Occurrence frequency of each split mode among the references' best modes.

    Modes never seen get probability 0 and go last; ties keep canonical order.
    """
    counts = {m: 0 for m in SPLIT_MODES}
    total = 0
    for r in refs:
        bm = r.best_mode if isinstance(r, PartitionRecord) else r
        if bm in counts:
            counts[bm] += 1
            total += 1
    probs = {m: (counts[m] / total if total else 0.0) for m in SPLIT_MODES}
    rank = {m: i for i, m in enumerate(SPLIT_MODES)}
    seen = sorted((m for m in SPLIT_MODES if counts[m] > 0), key=lambda m: (-counts[m], rank[m]))
    rest = [m for m in SPLIT_MODES if counts[m] == 0]
    return PartitionStats([(m, probs[m]) for m in seen + rest])


def ppbe_loop(cu: CuNode, candidates: PartitionStats, costing, none_option: Optional[CuTree] = None,
              legal=None):
    """Test split modes in candidate order, stopping once one costs more than the best so far.

    ``costing(mode)`` returns the searched CuTree for ``cu`` split by ``mode``;
    ``none_option`` is the already-evaluated unsplit CU. Returns (best, tested modes).
    """
    order = candidates.order
    if legal is not None:
        order = [m for m in order if m in legal]
    if none_option is not None:
        candidates.j_min = none_option.cost.j

    def evaluate(mode):
        tree = costing(mode)
        candidates.j_cur = tree.cost.j
        return tree

    best, tested = evaluate_modes(none_option, order, evaluate, early_stop=True)
    if best is not None:
        candidates.j_min = best.cost.j
    return best, tested


class ModeStatistics:
    """Conditional best-mode frequencies, split by whether the mode appeared among the references."""

    def __init__(self):
        self.in_trials = {m: 0 for m in SPLIT_MODES}
        self.in_hits = {m: 0 for m in SPLIT_MODES}
        self.out_trials = {m: 0 for m in SPLIT_MODES}
        self.out_hits = {m: 0 for m in SPLIT_MODES}
        self.best_counts = {m.value: 0 for m in PartitionMode}
        self.observations = 0

    def observe(self, reference_modes, best: PartitionMode) -> None:
        self.observations += 1
        self.best_counts[best.value] += 1
        for m in SPLIT_MODES:
            if m in reference_modes:
                self.in_trials[m] += 1
                self.in_hits[m] += best is m
            else:
                self.out_trials[m] += 1
                self.out_hits[m] += best is m

    def merge(self, other: "ModeStatistics") -> None:
        for name in ("in_trials", "in_hits", "out_trials", "out_hits", "best_counts"):
            mine, theirs = getattr(self, name), getattr(other, name)
            for k in mine:
                mine[k] += theirs[k]
        self.observations += other.observations

    @staticmethod
    def _mean(hits, trials) -> float:
        vals = [hits[m] / trials[m] for m in SPLIT_MODES if trials[m]]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_in(self) -> float:
        return self._mean(self.in_hits, self.in_trials)

    def mean_out(self) -> float:
        return self._mean(self.out_hits, self.out_trials)

    def to_json(self) -> dict:
        per_mode = {}
        for m in SPLIT_MODES:
            per_mode[m.value] = {
                "in_trials": self.in_trials[m], "in_hits": self.in_hits[m],
                "p_best_given_in": self.in_hits[m] / self.in_trials[m] if self.in_trials[m] else None,
                "out_trials": self.out_trials[m], "out_hits": self.out_hits[m],
                "p_best_given_out": self.out_hits[m] / self.out_trials[m] if self.out_trials[m] else None,
            }
        mi, mo = self.mean_in(), self.mean_out()
        return {
            "observations": self.observations,
            "best_mode_counts": dict(self.best_counts),
            "per_mode": per_mode,
            "mean_p_best_given_in": None if np.isnan(mi) else mi,
            "mean_p_best_given_out": None if np.isnan(mo) else mo,
        }
