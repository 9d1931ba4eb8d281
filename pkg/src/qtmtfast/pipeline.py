"""Frame/CTU encoding loop with optional depth capping and mode ordering.

Frame 0 is always searched exhaustively. From frame 1 on, each CTU first gets
one batched depth prediction for all its 8x8 blocks, which caps how deep any
CU may split; split modes are then tried in the order suggested by neighbor
history, stopping early once a mode costs more than the best so far.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import ddff
from .frame_io import BLOCK, FramePlane
from .intra import QpLambda
from .ppbe import ORDERS, ModeStatistics, PartitionStore, build_ref_cus, mode_probabilities, order_code
from .qtmt import CtuCoster, CuNode, CuTree, PartitionMode, SearchHooks, depth_grid_of, legal_splits, search

REPORT_SCHEMA = "qtmtfast.encode-report"
REPORT_VERSION = 1
PSNR_CAP = 100.0


class ConfigError(ValueError):
    pass


class EncodeMode(Enum):
    ORACLE = "oracle"
    DDFF_ONLY = "ddff"
    PPBE_ONLY = "ppbe"
    FULL = "full"

    @property
    def uses_ddff(self) -> bool:
        return self in (EncodeMode.DDFF_ONLY, EncodeMode.FULL)

    @property
    def uses_ppbe(self) -> bool:
        return self in (EncodeMode.PPBE_ONLY, EncodeMode.FULL)


@dataclass
class EncodeConfig:
    qp: int
    ctu_size: int = 128
    mode: EncodeMode = EncodeMode.ORACLE
    model_path: Optional[str] = None
    seed: int = 0
    model: Optional[ddff.DdffModel] = None
    closed_loop: bool = False
    partition_stats: bool = True
    keep_trees: bool = False

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = EncodeMode(self.mode)

    def validate(self) -> None:
        if self.ctu_size not in (32, 64, 128):
            raise ConfigError(f"ctu_size must be 32, 64 or 128, got {self.ctu_size}")
        if not 0 <= self.qp <= 63:
            raise ConfigError(f"qp must lie in [0, 63], got {self.qp}")
        if self.mode.uses_ddff and self.model is None:
            if not self.model_path:
                raise ConfigError(f"mode {self.mode.value} needs a depth model")
            if not os.path.isfile(self.model_path):
                raise ConfigError(f"model file not found: {self.model_path}")

    def resolve_model(self) -> Optional[ddff.DdffModel]:
        if not self.mode.uses_ddff:
            return None
        if self.model is not None:
            return self.model
        try:
            return ddff.load_model(self.model_path)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot load model {self.model_path}: {e}") from e

    def to_json(self) -> dict:
        return {"qp": self.qp, "ctu_size": self.ctu_size, "mode": self.mode.value,
                "model": os.path.basename(self.model_path) if self.model_path else None,
                "seed": self.seed, "closed_loop": self.closed_loop}


@dataclass
class FrameResult:
    index: int
    distortion: int
    rate_bits: float
    j: float
    psnr: float
    evaluations: int
    time_s: float
    model_time_s: float


@dataclass
class EncodeReport:
    config: EncodeConfig
    width: int
    height: int
    frames: list = field(default_factory=list)
    depth_grids: list = field(default_factory=list)
    trees: list = field(default_factory=list)
    partition_stats: ModeStatistics = field(default_factory=ModeStatistics)
    frame_stats: list = field(default_factory=list)
    # rows: final depth, columns: raw model prediction, over blocks the model saw
    depth_confusion: np.ndarray = field(
        default_factory=lambda: np.zeros((ddff.N_CLASSES, ddff.N_CLASSES), dtype=np.int64))
    recon: list = field(default_factory=list, repr=False)

    @property
    def total_distortion(self) -> int:
        return sum(f.distortion for f in self.frames)

    @property
    def total_rate(self) -> float:
        return math.fsum(f.rate_bits for f in self.frames)

    @property
    def total_j(self) -> float:
        return math.fsum(f.j for f in self.frames)

    @property
    def total_time(self) -> float:
        return math.fsum(f.time_s for f in self.frames)

    @property
    def total_model_time(self) -> float:
        return math.fsum(f.model_time_s for f in self.frames)

    @property
    def total_evaluations(self) -> int:
        return sum(f.evaluations for f in self.frames)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([f.psnr for f in self.frames])) if self.frames else 0.0

    def to_json(self, timing: bool = True) -> dict:
        frames = []
        for f in self.frames:
            d = {"index": f.index, "distortion": f.distortion, "rate_bits": f.rate_bits,
                 "j": f.j, "psnr": f.psnr, "evaluations": f.evaluations}
            if timing:
                d["time_s"] = f.time_s
                d["model_time_s"] = f.model_time_s
            frames.append(d)
        totals = {"distortion": self.total_distortion, "rate_bits": self.total_rate,
                  "j": self.total_j, "psnr": self.mean_psnr, "evaluations": self.total_evaluations}
        if timing:
            totals["time_s"] = self.total_time
            totals["model_time_s"] = self.total_model_time
        out = {
            "schema": REPORT_SCHEMA, "version": REPORT_VERSION,
            "config": self.config.to_json(), "width": self.width, "height": self.height,
            "frames": frames, "totals": totals,
            "depth_grids": [g.tolist() for g in self.depth_grids],
            "partition_stats": self.partition_stats.to_json(),
            "partition_stats_per_frame": [s.to_json() for s in self.frame_stats],
        }
        if self.config.mode.uses_ddff:
            out["depth_confusion"] = self.depth_confusion.tolist()
        if self.trees:
            out["trees"] = [[t.to_json() for t in ft] for ft in self.trees]
        return out

    def dumps(self, timing: bool = True) -> str:
        return json.dumps(self.to_json(timing), indent=1, sort_keys=True)


def psnr(orig: np.ndarray, recon: np.ndarray) -> float:
    mse = np.mean((orig.astype(np.float64) - recon) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * math.log10(255.0 ** 2 / mse), PSNR_CAP)


def _paint_recon(tree: CuTree, plane: np.ndarray) -> None:
    for lf in tree.leaves():
        c = lf.cu
        plane[c.y0:c.y0 + c.height, c.x0:c.x0 + c.width] = lf.recon


def observe_tree(stats: ModeStatistics, store: PartitionStore, tree: CuTree, t: int,
                 width: int, height: int) -> None:
    """Record, for every decision CU of a finished CTU, its best mode against its reference modes."""
    for node, _ in tree.nodes():
        c = node.cu
        if c.x0 + c.width > width or c.y0 + c.height > height:
            continue
        if not legal_splits(c):
            continue
        refs = build_ref_cus(store, c.x0, c.y0, c.width, c.height, t)
        stats.observe(mode_probabilities(refs).reference_modes, node.mode)


# marks blocks whose reference map was incomplete; larger than any depth
_MISSING = 127


class _CtuHooks:
    """Per-CTU pruning state for frames after the first."""

    def __init__(self, mode: EncodeMode, model, grid: ddff.DepthGrid, store: PartitionStore,
                 t: int, cx: int, cy: int, ctu: int):
        self.t = t
        self.store = store
        self.model_time = 0.0
        self.cx, self.cy = cx, cy
        self.bx0, self.by0 = cx // BLOCK, cy // BLOCK
        self.bx1 = min(self.bx0 + ctu // BLOCK, grid.blocks_x)
        self.by1 = min(self.by0 + ctu // BLOCK, grid.blocks_y)
        self.raw = None
        self.complete = None
        self.units_cur = store.units[t]
        self.units_prv = store.units[t - 1]
        if mode.uses_ddff:
            t0 = time.perf_counter()
            self._predict(model, grid)
            self.model_time += time.perf_counter() - t0
        self.hooks = SearchHooks(
            depth_cap=self.depth_cap if mode.uses_ddff else None,
            mode_order=self.mode_order if mode.uses_ppbe else None,
            early_stop=mode.uses_ppbe)

    def _predict(self, model, grid: ddff.DepthGrid) -> None:
        shape = (self.by1 - self.by0, self.bx1 - self.bx0)
        values, preds, _, complete = ddff.ref_maps(grid, self.t, self.bx0, self.by0, self.bx1, self.by1)
        raw = np.zeros(values.shape[0], dtype=np.int64)
        if complete.any():
            raw[complete] = ddff.predict_depths(model, values[complete].reshape(-1, ddff.K_D))
        adjusted = ddff.adjust_depths(raw, values, preds)
        adjusted = np.where(complete, adjusted, _MISSING).astype(np.int8).reshape(shape)
        # flat bytes: indexing a bytes object is far cheaper than a 4-D numpy lookup
        self.table = ddff.cap_table(adjusted).tobytes()
        self.ny, self.nx = shape
        self.raw = raw.reshape(shape)
        self.complete = complete.reshape(shape)
        grid.pred[self.t][self.by0:self.by1, self.bx0:self.bx1] = self.raw

    def depth_cap(self, cu: CuNode) -> int:
        t0 = time.perf_counter()
        x = cu.x0 - self.cx
        y = cu.y0 - self.cy
        nx = self.nx
        cap = self.table[(((y >> 3) * nx + (x >> 3)) * self.ny + ((y + cu.height - 1) >> 3)) * nx
                         + ((x + cu.width - 1) >> 3)]
        if cap == _MISSING:
            # some covered block has no prediction: inherit the previous frame's depth here
            prev = self.store.at(self.t - 1, cu.x0, cu.y0)
            cap = prev.depth if prev is not None else ddff.MAX_DEPTH
        self.model_time += time.perf_counter() - t0
        return cap

    def mode_order(self, cu: CuNode):
        t0 = time.perf_counter()
        order = ORDERS[order_code(self.units_cur, self.units_prv, True, cu.x0, cu.y0, cu.width, cu.height)]
        self.model_time += time.perf_counter() - t0
        return order


def encode_sequence(frames, cfg: EncodeConfig, sample_sink: Optional[list] = None) -> EncodeReport:
    """Encode a sequence of FramePlanes and return per-frame costs and bookkeeping.

    If ``sample_sink`` is a list, (maps, labels) arrays are appended for every
    block of frames >= 1 whose reference map was complete when its CTU started.
    """
    cfg.validate()
    model = cfg.resolve_model()
    frames = [f if isinstance(f, FramePlane) else FramePlane(np.asarray(f)) for f in frames]
    if not frames:
        raise ValueError("no frames to encode")
    h, w = frames[0].height, frames[0].width
    if any(f.samples.shape != (h, w) for f in frames):
        raise ValueError("all frames must share one geometry")
    qp = QpLambda(cfg.qp)
    ctu = cfg.ctu_size
    grid = ddff.DepthGrid(frames[0].blocks_x, frames[0].blocks_y)
    store = PartitionStore(w, h)
    report = EncodeReport(cfg, frames[0].orig_width, frames[0].orig_height)

    for t, fr in enumerate(frames):
        grid.add_frame()
        store.add_frame()
        orig = fr.samples
        ref = orig.copy() if cfg.closed_loop else orig
        recon = np.zeros_like(orig)
        frame_time = 0.0
        model_time = 0.0
        distortion = 0
        rate = 0.0
        evals = 0
        frame_trees = []
        frame_stats = ModeStatistics()
        for cy in range(0, h, ctu):
            for cx in range(0, w, ctu):
                pending = None
                if sample_sink is not None and t >= 1:
                    pending = _ctu_maps(grid, t, cx, cy, ctu)

                t0 = time.perf_counter()
                hooks = None
                if t >= 1 and cfg.mode is not EncodeMode.ORACLE:
                    hooks = _CtuHooks(cfg.mode, model, grid, store, t, cx, cy, ctu)
                coster = CtuCoster(orig, ref, qp)
                tree = search(CuNode(cx, cy, ctu, ctu), hooks.hooks if hooks else SearchHooks(), coster)
                depths = depth_grid_of(tree)
                bx0, by0 = cx // BLOCK, cy // BLOCK
                depths = depths[:grid.blocks_y - by0, :grid.blocks_x - bx0]
                grid.set_final(t, bx0, by0, depths)
                pred = grid.pred[t][by0:by0 + depths.shape[0], bx0:bx0 + depths.shape[1]]
                # blocks without a model prediction count as exactly predicted
                np.copyto(pred, depths, where=pred == 0)
                _paint_recon(tree, recon)
                elapsed = time.perf_counter() - t0

                # statistics must see the history as it stood when this CTU was searched
                if cfg.partition_stats and t >= 1:
                    observe_tree(frame_stats, store, tree, t, w, h)
                t1 = time.perf_counter()
                store.commit_tree(t, tree)
                if cfg.mode.uses_ppbe:
                    bookkeeping = time.perf_counter() - t1
                    elapsed += bookkeeping
                    model_time += bookkeeping
                if pending is not None:
                    maps, where = pending
                    sample_sink.append((maps, depths.reshape(-1)[where].astype(np.uint8)))
                if cfg.closed_loop:
                    ref[cy:cy + ctu, cx:cx + ctu] = recon[cy:cy + ctu, cx:cx + ctu]

                frame_time += elapsed
                if hooks is not None:
                    model_time += hooks.model_time
                    if hooks.complete is not None and hooks.complete.any():
                        np.add.at(report.depth_confusion,
                                  (depths[hooks.complete] - 1, hooks.raw[hooks.complete] - 1), 1)
                distortion += tree.cost.distortion
                rate += tree.cost.rate_bits
                evals += coster.evaluations
                if cfg.keep_trees:
                    frame_trees.append(tree)
        if not grid.frame_complete(t):
            raise RuntimeError(f"frame {t}: some blocks received no depth")
        vis = (slice(0, fr.orig_height), slice(0, fr.orig_width))
        report.frames.append(FrameResult(
            t, distortion, rate, distortion + qp.lam * rate,
            psnr(orig[vis], recon[vis]), evals, frame_time, model_time))
        report.depth_grids.append(grid.final[t].copy())
        report.frame_stats.append(frame_stats)
        report.partition_stats.merge(frame_stats)
        report.recon.append(recon)
        if cfg.keep_trees:
            report.trees.append(frame_trees)
    return report


def _ctu_maps(grid: ddff.DepthGrid, t: int, cx: int, cy: int, ctu: int):
    bx0, by0 = cx // BLOCK, cy // BLOCK
    bx1 = min(bx0 + ctu // BLOCK, grid.blocks_x)
    by1 = min(by0 + ctu // BLOCK, grid.blocks_y)
    values, _, _, complete = ddff.ref_maps(grid, t, bx0, by0, bx1, by1)
    return values[complete].reshape(-1, ddff.K_D).astype(np.uint8), complete
