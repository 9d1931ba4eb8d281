import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtmtfast import ddff, pipeline
from qtmtfast.frame_io import make_plane
from qtmtfast.intra import QpLambda
from qtmtfast.pipeline import ConfigError, EncodeConfig, EncodeMode, encode_sequence
from qtmtfast.qtmt import CtuCoster, CuNode, PartitionMode, SearchHooks, search


def clip(w, h, n, seed=0, smooth=False):
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, (h + 4 * n, w + 4 * n)).astype(float)
    if smooth:
        k = np.ones(5) / 5
        base = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 1, base)
        base = np.apply_along_axis(lambda c: np.convolve(c, k, "same"), 0, base)
    return [make_plane(np.round(base[2 * t:2 * t + h, 3 * t:3 * t + w]).astype(np.uint8), t) for t in range(n)]


def model(seed=0):
    return ddff.DdffModel.initialize(np.random.default_rng(seed))


def test_oracle_totals_equal_independent_search():
    frames = clip(72, 40, 2, seed=1)
    rep = encode_sequence(frames, EncodeConfig(qp=27, ctu_size=32))
    for f, fr in zip(rep.frames, frames):
        d, r = 0, 0.0
        for cy in range(0, 40, 32):
            for cx in range(0, 72, 32):
                tree = search(CuNode(cx, cy, 32, 32), SearchHooks(),
                              CtuCoster(fr.samples, fr.samples, QpLambda(27)))
                d += tree.cost.distortion
                r += tree.cost.rate_bits
        assert (f.distortion, f.rate_bits) == (d, r)
        assert f.j == d + QpLambda(27).lam * r
    assert rep.total_j == pytest.approx(sum(f.j for f in rep.frames), rel=1e-15)
    assert rep.total_distortion == sum(f.distortion for f in rep.frames)


def test_full_frame_zero_equals_oracle():
    frames = clip(64, 64, 3, seed=2)
    o = encode_sequence(frames, EncodeConfig(qp=32, ctu_size=32))
    f = encode_sequence(frames, EncodeConfig(qp=32, ctu_size=32, mode="full", model=model()))
    assert f.frames[0].j == o.frames[0].j
    assert f.frames[0].evaluations == o.frames[0].evaluations


@settings(max_examples=6)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([22, 32, 37]), st.booleans())
def test_mode_lattice(seed, qp, smooth):
    frames = clip(64, 48, 3, seed=seed, smooth=smooth)
    m = model(seed % 7)
    o = encode_sequence(frames, EncodeConfig(qp=qp, ctu_size=32))
    for mode in ("ddff", "ppbe", "full"):
        r = encode_sequence(frames, EncodeConfig(qp=qp, ctu_size=32, mode=mode, model=m))
        for a, b in zip(o.frames, r.frames):
            assert a.j <= b.j
            assert b.evaluations <= a.evaluations


def test_closed_loop_runs():
    frames = clip(64, 32, 2, seed=3)
    a = encode_sequence(frames, EncodeConfig(qp=32, ctu_size=32, closed_loop=True))
    b = encode_sequence(frames, EncodeConfig(qp=32, ctu_size=32))
    assert a.frames[0].j != b.frames[0].j or a.frames[0].distortion == b.frames[0].distortion
    assert a.to_json()["config"]["closed_loop"] is True


def test_depth_caps_respected(monkeypatch):
    seen = []
    real = pipeline.search

    def checked(cu, hooks, coster, memo=None):
        tree = real(cu, hooks, coster, memo)
        if hooks.depth_cap is not None:
            for node, _ in tree.nodes():
                c = node.cu
                inside = c.x0 + c.width <= coster.width and c.y0 + c.height <= coster.height
                if node.mode is not PartitionMode.NONE and inside:
                    assert c.depth < hooks.depth_cap(c)
                    seen.append(c)
        return tree

    monkeypatch.setattr(pipeline, "search", checked)
    frames = clip(96, 96, 3, seed=4, smooth=True)
    low = ddff.DdffModel.zeros()
    low.params["out_b"][:] = [3, 2, 1, 0, 0, 0]
    encode_sequence(frames, EncodeConfig(qp=27, ctu_size=32, mode="ddff", model=low))
    assert seen


def test_fallback_uses_previous_frame_leaf():
    frames = clip(64, 64, 2, seed=5)
    rep = encode_sequence(frames, EncodeConfig(qp=27, ctu_size=32, keep_trees=True))
    grid = ddff.DepthGrid(8, 8)
    store = pipeline.PartitionStore(64, 64)
    grid.add_frame()
    store.add_frame()
    grid.final[0][:] = rep.depth_grids[0]
    for tree in rep.trees[0]:
        store.commit_tree(0, tree)
    grid.add_frame()
    store.add_frame()
    hooks = pipeline._CtuHooks(EncodeMode.DDFF_ONLY, model(), grid, store, 1, 0, 0, 32)
    assert not hooks.complete[0, 0] and hooks.complete[2, 2]
    for cu in (CuNode(0, 0, 16, 16, 1), CuNode(8, 0, 4, 8, 3), CuNode(0, 0, 32, 32)):
        assert hooks.depth_cap(cu) == store.at(0, cu.x0, cu.y0).depth
    interior = CuNode(16, 16, 8, 8, 2)
    want = ddff.optimal_cu_depth(
        ddff.adjust_depths(hooks.raw.reshape(-1), *ddff.ref_maps(grid, 1, 0, 0, 4, 4)[:2]).reshape(4, 4),
        16, 16, 8, 8)
    assert hooks.depth_cap(interior) == want


def test_every_block_gets_one_depth():
    frames = clip(40, 24, 3, seed=6)
    rep = encode_sequence(frames, EncodeConfig(qp=32, ctu_size=32, mode="full", model=model()))
    for g in rep.depth_grids:
        assert g.shape == (3, 5) and g.min() >= 1 and g.max() <= 6


def test_report_is_deterministic():
    frames = clip(64, 32, 3, seed=7)
    cfg = dict(qp=32, ctu_size=32, mode="full", model=model(), seed=3)
    a = encode_sequence(frames, EncodeConfig(**cfg)).dumps(timing=False)
    b = encode_sequence(frames, EncodeConfig(**cfg)).dumps(timing=False)
    assert a == b
    d = json.loads(a)
    assert d["schema"] == pipeline.REPORT_SCHEMA and d["version"] == 1
    assert "time_s" not in d["totals"] and "depth_confusion" in d
    assert len(d["partition_stats_per_frame"]) == 3


def test_report_totals_and_timing_fields():
    frames = clip(32, 32, 2, seed=8)
    rep = encode_sequence(frames, EncodeConfig(qp=22, ctu_size=32, mode="ppbe"))
    d = rep.to_json()
    assert d["totals"]["j"] == pytest.approx(sum(f["j"] for f in d["frames"]))
    assert d["totals"]["time_s"] >= d["totals"]["model_time_s"] >= 0
    assert "depth_confusion" not in d


def test_psnr_cap_on_lossless():
    frames = [make_plane(np.full((16, 16), 9, dtype=np.uint8))]
    rep = encode_sequence(frames, EncodeConfig(qp=22, ctu_size=32))
    assert rep.frames[0].psnr == pipeline.PSNR_CAP


def test_missing_model_rejected_before_work(monkeypatch):
    calls = []
    monkeypatch.setattr(pipeline, "search", lambda *a, **k: calls.append(a))
    with pytest.raises(ConfigError):
        encode_sequence(clip(32, 32, 2), EncodeConfig(qp=22, mode="full"))
    with pytest.raises(ConfigError):
        encode_sequence(clip(32, 32, 2), EncodeConfig(qp=22, mode="ddff", model_path="/nonexistent.ddff"))
    assert not calls


@pytest.mark.parametrize("kw", [dict(ctu_size=48), dict(qp=64), dict(qp=-1)])
def test_bad_config(kw):
    cfg = dict(qp=22)
    cfg.update(kw)
    with pytest.raises(ConfigError):
        EncodeConfig(**cfg).validate()


def test_rejects_mixed_geometry():
    with pytest.raises(ValueError):
        encode_sequence([make_plane(np.zeros((16, 16))), make_plane(np.zeros((16, 24)))], EncodeConfig(qp=22))
