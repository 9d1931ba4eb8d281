"""Dataset collection and anchor-versus-accelerated benchmark runs."""

from __future__ import annotations

import csv
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np

from . import ddff
from .metrics import DEFAULT_QPS, RdPoint, ats, bdbr, classification_metrics, overhead
from .pipeline import EncodeConfig, EncodeMode, encode_sequence
from .ppbe import ModeStatistics

BENCH_SCHEMA = "qtmtfast.bench-report"
BENCH_VERSION = 1
CSV_FIELDS = ("qp", "mode", "time_s", "j", "psnr", "rate_bits", "distortion", "evaluations", "model_time_s")


def collect_samples(clips, qps=DEFAULT_QPS, ctu_size: int = 128):
    """Reference maps and oracle depths from exhaustive encodes of every clip at every Qp.

    ``clips`` is one frame sequence or a list of them.
    """
    if clips and not isinstance(clips[0], (list, tuple)):
        clips = [clips]
    maps, labels = [], []
    for frames in clips:
        for qp in qps:
            sink: list = []
            encode_sequence(frames, EncodeConfig(qp=qp, ctu_size=ctu_size, partition_stats=False),
                            sample_sink=sink)
            for m, lab in sink:
                maps.append(m)
                labels.append(lab)
    if not maps:
        return np.zeros((0, ddff.K_D), dtype=np.uint8), np.zeros(0, dtype=np.uint8)
    return np.concatenate(maps), np.concatenate(labels)


def collect_dataset(clips, qps, out, ctu_size: int = 128) -> int:
    """Write a dataset file of (reference map, oracle depth) records; returns the record count."""
    maps, labels = collect_samples(clips, qps, ctu_size)
    return ddff.write_dataset(out, maps, labels)


def _encode_job(args):
    frames, qp, mode, ctu_size, model, model_path, closed_loop, repeats = args
    reports = []
    for _ in range(repeats):
        cfg = EncodeConfig(qp=qp, ctu_size=ctu_size, mode=mode, model=model, model_path=model_path,
                           closed_loop=closed_loop)
        reports.append(encode_sequence(frames, cfg))
    rep = reports[0]
    times = [r.total_time for r in reports]
    model_times = [r.total_model_time for r in reports]
    return {
        "qp": qp, "mode": EncodeMode(mode).value,
        "j": rep.total_j, "psnr": rep.mean_psnr, "rate_bits": rep.total_rate,
        "distortion": rep.total_distortion, "evaluations": rep.total_evaluations,
        "time_s": statistics.median(times), "model_time_s": statistics.median(model_times),
        "frame_j": [f.j for f in rep.frames],
        "partition_stats": rep.partition_stats,
        "depth_confusion": rep.depth_confusion if EncodeMode(mode).uses_ddff else None,
    }


def run_bench(frames, qps=DEFAULT_QPS, model: Optional[ddff.DdffModel] = None,
              model_path: Optional[str] = None, ctu_size: int = 128, repeats: int = 1, jobs: int = 1,
              closed_loop: bool = False, test_mode: Optional[EncodeMode] = None) -> dict:
    """Encode with the exhaustive anchor and the accelerated mode at every Qp.

    Without a model the accelerated side is the anchor configuration itself.
    """
    if repeats < 1 or jobs < 1:
        raise ValueError("repeats and jobs must be at least 1")
    if test_mode is None:
        test_mode = EncodeMode.FULL if (model is not None or model_path) else EncodeMode.ORACLE
    if test_mode.uses_ddff and model is None:
        model = EncodeConfig(qp=qps[0], mode=test_mode, model_path=model_path).resolve_model()
    # an accelerated side identical to the anchor is the anchor run itself
    modes = (EncodeMode.ORACLE,) if test_mode is EncodeMode.ORACLE else (EncodeMode.ORACLE, test_mode)
    tasks = []
    for qp in qps:
        for mode in modes:
            m = model if mode.uses_ddff else None
            tasks.append((frames, qp, mode, ctu_size, m, None, closed_loop, repeats))
    if jobs == 1:
        results = [_encode_job(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_encode_job, tasks))
    anchor = results[0::len(modes)]
    test = results[len(modes) - 1::len(modes)]

    stats = ModeStatistics()
    for r in anchor:
        stats.merge(r["partition_stats"])
    summary = {
        "ats_time_pct": ats([a["time_s"] for a in anchor], [t["time_s"] for t in test]),
        "ats_work_pct": ats([a["evaluations"] for a in anchor], [t["evaluations"] for t in test]),
        "bdbr_pct": bdbr([RdPoint(a["rate_bits"], a["psnr"]) for a in anchor],
                         [RdPoint(t["rate_bits"], t["psnr"]) for t in test]),
        "j_ratio": {str(a["qp"]): t["j"] / a["j"] for a, t in zip(anchor, test)},
        "overhead_pct": {str(t["qp"]): overhead(t["model_time_s"], t["time_s"]) for t in test},
    }
    out = {
        "schema": BENCH_SCHEMA, "version": BENCH_VERSION,
        "config": {"qps": list(qps), "ctu_size": ctu_size, "anchor_mode": EncodeMode.ORACLE.value,
                   "test_mode": test_mode.value, "repeats": repeats, "closed_loop": closed_loop,
                   "frames": len(frames), "width": frames[0].orig_width, "height": frames[0].orig_height},
        "runs": [{k: v for k, v in r.items() if k not in ("partition_stats", "depth_confusion")}
                 for r in results],
        "summary": summary,
        "partition_stats": stats.to_json(),
    }
    if test_mode.uses_ddff:
        cm = sum(t["depth_confusion"] for t in test)
        out["depth_prediction"] = {"confusion": cm.tolist()}
        if cm.sum():
            out["depth_prediction"].update(classification_metrics(cm))
    return out


_TIMING_KEYS = ("time_s", "model_time_s", "ats_time_pct", "overhead_pct")


def strip_timing(obj):
    """Drop wall-clock fields so reports of identical runs compare byte-for-byte."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in _TIMING_KEYS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def dumps_report(report: dict, timing: bool = True) -> str:
    return json.dumps(report if timing else strip_timing(report), indent=1, sort_keys=True)


def write_csv(path, report: dict, timing: bool = True) -> None:
    fields = [f for f in CSV_FIELDS if timing or f not in _TIMING_KEYS]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in report["runs"]:
            w.writerow(r)
