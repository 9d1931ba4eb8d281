"""Depth prediction from neighboring block depths.

A 5x5 map of already-known depths around an 8x8 block is fed to a small
two-path CNN (1x1 -> 3x3 conv with ReLU, in parallel with a plain 1x1 conv),
whose 12 feature maps are flattened and classified into depths 1..6 by a
two-hidden-layer MLP. The prediction is then corrected upward by the average
error observed on the reference blocks, and a CU's depth cap is the maximum
corrected depth over the blocks it covers.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .frame_io import BLOCK, BlockCoord

MAP_SIZE = 5
MAP_RADIUS = 2
K_D = MAP_SIZE * MAP_SIZE
N_CLASSES = 6
MIN_DEPTH = 1
MAX_DEPTH = 6
DEPTH_SCALE = 6.0

# (name, shape) in serialization order
PARAM_SHAPES = (
    ("a1_w", (8, 1, 1, 1)), ("a1_b", (8,)),
    ("a2_w", (8, 8, 3, 3)), ("a2_b", (8,)),
    ("b1_w", (4, 1, 1, 1)), ("b1_b", (4,)),
    ("h1_w", (64, 300)), ("h1_b", (64,)),
    ("h2_w", (32, 64)), ("h2_b", (32,)),
    ("out_w", (6, 32)), ("out_b", (6,)),
)
WEIGHTS_MAGIC = b"DDFF"
WEIGHTS_VERSION = 1
DATASET_MAGIC = b"DDS1"
# weights trained on the bundled sample pictures by scripts/train_default_model.py
DEFAULT_MODEL_PATH = os.path.join(os.path.dirname(__file__), "data", "default.ddff")

_OFFSETS = [(dy, dx) for dy in range(-MAP_RADIUS, MAP_RADIUS + 1)
            for dx in range(-MAP_RADIUS, MAP_RADIUS + 1)]


def is_causal(dx: int, dy: int) -> bool:
    return dx < 0 or (dx == 0 and dy < 0)


# ---------------------------------------------------------------------------
# depth bookkeeping


class DepthGrid:
    """Final and predicted depth per 8x8 block, one lattice per frame.

    0 marks an unset cell.
    """

    def __init__(self, blocks_x: int, blocks_y: int):
        self.blocks_x = blocks_x
        self.blocks_y = blocks_y
        self.final: list[np.ndarray] = []
        self.pred: list[np.ndarray] = []

    def add_frame(self) -> int:
        shape = (self.blocks_y, self.blocks_x)
        self.final.append(np.zeros(shape, dtype=np.int8))
        self.pred.append(np.zeros(shape, dtype=np.int8))
        return len(self.final) - 1

    def set_final(self, t: int, bx0: int, by0: int, depths: np.ndarray) -> None:
        region = self.final[t][by0:by0 + depths.shape[0], bx0:bx0 + depths.shape[1]]
        if np.any(region[depths > 0]):
            raise ValueError(f"final depth already written in frame {t}")
        region[depths > 0] = depths[depths > 0]

    def frame_complete(self, t: int) -> bool:
        return bool(np.all(self.final[t] > 0))


@dataclass
class RefDepthMap:
    """25 reference depths ordered (dy, dx) over [-2, 2]^2.

    ``pred`` holds the matching predicted depths (0 if none was made) and
    ``from_current`` which cells came from the current frame.
    """

    values: np.ndarray
    pred: np.ndarray
    from_current: np.ndarray
    complete: bool

    def scaled(self) -> np.ndarray:
        return self.values.astype(np.float64) / DEPTH_SCALE


def ref_maps(grid: DepthGrid, t: int, bx0: int, by0: int, bx1: int, by1: int):
    """Reference maps for every block in [bx0, bx1) x [by0, by1) of frame t.

    Returns (values, preds, from_current, complete) with shapes
    (n, 5, 5) x3 and (n,), blocks in raster order. A causal cell uses the
    current frame when that block is already coded, otherwise the co-located
    block of frame t-1; a cell with neither is unavailable and makes the map
    incomplete.
    """
    ny, nx = by1 - by0, bx1 - bx0
    r = MAP_RADIUS
    values = np.zeros((ny, nx, MAP_SIZE, MAP_SIZE), dtype=np.int8)
    preds = np.zeros_like(values)
    cur_flag = np.zeros(values.shape, dtype=bool)
    if t == 0:
        return (values.reshape(-1, MAP_SIZE, MAP_SIZE), preds.reshape(-1, MAP_SIZE, MAP_SIZE),
                cur_flag.reshape(-1, MAP_SIZE, MAP_SIZE), np.zeros(ny * nx, dtype=bool))

    def padded(a):
        return np.pad(a, r)

    cur_f, cur_p = padded(grid.final[t]), padded(grid.pred[t])
    prv_f, prv_p = padded(grid.final[t - 1]), padded(grid.pred[t - 1])
    for dy, dx in _OFFSETS:
        sl = (slice(by0 + r + dy, by1 + r + dy), slice(bx0 + r + dx, bx1 + r + dx))
        pf, pp = prv_f[sl], prv_p[sl]
        if is_causal(dx, dy):
            cf = cur_f[sl]
            use_cur = cf > 0
            v = np.where(use_cur, cf, pf)
            p = np.where(use_cur, cur_p[sl], pp)
        else:
            use_cur = np.zeros(pf.shape, dtype=bool)
            v, p = pf, pp
        values[:, :, dy + r, dx + r] = v
        preds[:, :, dy + r, dx + r] = p
        cur_flag[:, :, dy + r, dx + r] = use_cur
    values = values.reshape(-1, MAP_SIZE, MAP_SIZE)
    complete = np.all(values > 0, axis=(1, 2))
    return values, preds.reshape(values.shape), cur_flag.reshape(values.shape), complete


def build_ref_map(grid: DepthGrid, at: BlockCoord) -> RefDepthMap:
    v, p, c, ok = ref_maps(grid, at.t, at.x, at.y, at.x + 1, at.y + 1)
    return RefDepthMap(v[0], p[0], c[0], bool(ok[0]))


def adjust_depth(predicted, refs, k_d: int = K_D):
    """Raise a predicted depth by the rounded mean error of its references.

    ``refs`` is a sequence of (final, predicted) pairs; a predicted value of 0
    or None means no prediction exists and the pair contributes no error.
    """
    s = 0
    for final, pred in refs:
        if pred:
            s += int(final) - int(pred)
    # floor(s / k_d + 1/2) in exact integer arithmetic
    offset = max((2 * s + k_d) // (2 * k_d), 0)
    return min(max(int(predicted) + offset, MIN_DEPTH), MAX_DEPTH)


def adjust_depths(predicted: np.ndarray, values: np.ndarray, preds: np.ndarray,
                  k_d: int = K_D) -> np.ndarray:
    """Batched ``adjust_depth`` over maps from ``ref_maps``."""
    err = np.where(preds > 0, values.astype(np.int64) - preds, 0).sum(axis=(1, 2))
    offset = np.maximum((2 * err + k_d) // (2 * k_d), 0)
    return np.clip(predicted + offset, MIN_DEPTH, MAX_DEPTH)


def optimal_cu_depth(adjusted: np.ndarray, x0: int, y0: int, width: int, height: int,
                     origin=(0, 0)) -> int:
    """Maximum adjusted depth over the 8x8 blocks a CU touches."""
    bx0 = (x0 - origin[0]) // BLOCK
    by0 = (y0 - origin[1]) // BLOCK
    bx1 = (x0 - origin[0] + width - 1) // BLOCK + 1
    by1 = (y0 - origin[1] + height - 1) // BLOCK + 1
    return int(adjusted[by0:by1, bx0:bx1].max())


@njit(cache=True)
def cap_table(adjusted: np.ndarray) -> np.ndarray:
    """Maximum over every block rectangle: out[by0, bx0, by1, bx1] covers rows by0..by1, cols bx0..bx1."""
    ny, nx = adjusted.shape
    out = np.zeros((ny, nx, ny, nx), dtype=np.int8)
    rowmax = np.empty(nx, dtype=np.int8)
    for by0 in range(ny):
        for bx in range(nx):
            rowmax[bx] = adjusted[by0, bx]
        for by1 in range(by0, ny):
            if by1 > by0:
                for bx in range(nx):
                    if adjusted[by1, bx] > rowmax[bx]:
                        rowmax[bx] = adjusted[by1, bx]
            for bx0 in range(nx):
                m = rowmax[bx0]
                for bx1 in range(bx0, nx):
                    if rowmax[bx1] > m:
                        m = rowmax[bx1]
                    out[by0, bx0, by1, bx1] = m
    return out


# ---------------------------------------------------------------------------
# network


@dataclass
class DdffModel:
    params: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls) -> "DdffModel":
        return cls({n: np.zeros(s) for n, s in PARAM_SHAPES})

    @classmethod
    def initialize(cls, rng: np.random.Generator) -> "DdffModel":
        params = {}
        for name, shape in PARAM_SHAPES:
            if name.endswith("_b"):
                params[name] = np.zeros(shape)
                continue
            if len(shape) == 4:
                rf = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            else:
                fan_out, fan_in = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
        return cls(params)

    def astype(self, dtype) -> "DdffModel":
        return DdffModel({n: self.params[n].astype(dtype).astype(np.float64) for n, _ in PARAM_SHAPES})

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


def _shift_tensor() -> np.ndarray:
    """S[k, p, q] = 1 when input cell q feeds output cell p through 3x3 tap k (zero padding)."""
    s = np.zeros((9, MAP_SIZE * MAP_SIZE, MAP_SIZE * MAP_SIZE))
    for ky in range(3):
        for kx in range(3):
            for py in range(MAP_SIZE):
                for px in range(MAP_SIZE):
                    qy, qx = py + ky - 1, px + kx - 1
                    if 0 <= qy < MAP_SIZE and 0 <= qx < MAP_SIZE:
                        s[ky * 3 + kx, py * MAP_SIZE + px, qy * MAP_SIZE + qx] = 1.0
    return s


_SHIFT = _shift_tensor()
_SHIFT_FLAT = _SHIFT.reshape(9, -1)
_SHIFT_ROWS = _SHIFT.sum(axis=2)          # (9, 25): taps that land inside the map


def _as_input(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, MAP_SIZE * MAP_SIZE)


def _path_a_operator(P):
    """Fold the 1x1 promotion and the padded 3x3 conv into z2 = x @ M.T + c.

    Both stages are linear before the ReLU, so M is (8*25, 25) and c is (8*25,).
    """
    w3 = P["a2_w"].reshape(8, 8, 9)
    k_w = np.einsum("ock,c->ok", w3, P["a1_w"].reshape(8))
    k_b = np.einsum("ock,c->ok", w3, P["a1_b"])
    m = (k_w @ _SHIFT_FLAT).reshape(8 * 25, 25)
    c = (k_b @ _SHIFT_ROWS + P["a2_b"][:, None]).reshape(-1)
    return m, c


def _forward_cache(model: DdffModel, x: np.ndarray):
    P = model.params
    m, c = _path_a_operator(P)
    z2 = x @ m.T + c                                              # (n, 200)
    b1 = (x[:, None, :] * P["b1_w"].reshape(1, 4, 1) + P["b1_b"].reshape(1, 4, 1)).reshape(-1, 100)
    feat = np.concatenate([np.maximum(z2, 0.0), b1], axis=1)      # (n, 300) channel-major
    z3 = feat @ P["h1_w"].T + P["h1_b"]
    h1 = np.maximum(z3, 0.0)
    z4 = h1 @ P["h2_w"].T + P["h2_b"]
    h2 = np.maximum(z4, 0.0)
    logits = h2 @ P["out_w"].T + P["out_b"]
    return logits, (x, z2, feat, z3, h1, z4, h2)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: DdffModel, maps) -> np.ndarray:
    """Class probabilities for scaled maps, shape (n, 6) (or (6,) for one map)."""
    single = np.size(maps) == MAP_SIZE * MAP_SIZE and np.ndim(maps) <= 2
    logits, _ = _forward_cache(model, _as_input(maps))
    prob = softmax(logits)
    return prob[0] if single else prob


def predict_depths(model: DdffModel, values: np.ndarray) -> np.ndarray:
    """Most probable depth per raw 1..6 map; ties resolve to the shallower depth."""
    if len(values) == 0:
        return np.zeros(0, dtype=np.int64)
    prob = forward(model, np.asarray(values, dtype=np.float64).reshape(-1, MAP_SIZE, MAP_SIZE) / DEPTH_SCALE)
    return np.argmax(prob, axis=1) + MIN_DEPTH


def loss_and_grads(model: DdffModel, x, labels: np.ndarray):
    """Mean cross-entropy and its gradient for every parameter.

    ``labels`` are class indices 0..5.
    """
    P = model.params
    x = _as_input(x)
    n = x.shape[0]
    logits, (x, z2, feat, z3, h1, z4, h2) = _forward_cache(model, x)
    prob = softmax(logits)
    loss = -np.mean(np.log(prob[np.arange(n), labels]))

    g = {}
    d_logits = prob.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    g["out_w"] = d_logits.T @ h2
    g["out_b"] = d_logits.sum(axis=0)
    d_z4 = (d_logits @ P["out_w"]) * (z4 > 0)
    g["h2_w"] = d_z4.T @ h1
    g["h2_b"] = d_z4.sum(axis=0)
    d_z3 = (d_z4 @ P["h2_w"]) * (z3 > 0)
    g["h1_w"] = d_z3.T @ feat
    g["h1_b"] = d_z3.sum(axis=0)
    d_feat = d_z3 @ P["h1_w"]

    d_b1 = d_feat[:, 200:].reshape(n, 4, 25)
    g["b1_w"] = np.einsum("ncq,nq->c", d_b1, x).reshape(4, 1, 1, 1)
    g["b1_b"] = d_b1.sum(axis=(0, 2))

    # back through the folded operator
    d_z2 = d_feat[:, :200] * (z2 > 0)
    d_m = (d_z2.T @ x).reshape(8, 25 * 25)                        # dL/dM[o, p, q]
    d_c = d_z2.sum(axis=0).reshape(8, 25)                         # dL/dc[o, p]
    g_w = d_m @ _SHIFT_FLAT.T                                     # (8, 9): sum_pq dM S
    g_b = d_c @ _SHIFT_ROWS.T
    w3 = P["a2_w"].reshape(8, 8, 9)
    a1w = P["a1_w"].reshape(8)
    g["a2_w"] = (g_w[:, None, :] * a1w[None, :, None]
                 + g_b[:, None, :] * P["a1_b"][None, :, None]).reshape(8, 8, 3, 3)
    g["a2_b"] = d_c.sum(axis=1)
    g["a1_w"] = np.einsum("ock,ok->c", w3, g_w).reshape(8, 1, 1, 1)
    g["a1_b"] = np.einsum("ock,ok->c", w3, g_b)
    return loss, g


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 256
    iterations: int = 128
    epochs: int = 50
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    test_fraction: float = 0.2


@dataclass
class TrainResult:
    model: DdffModel
    train_accuracy: float
    test_accuracy: float
    final_loss: float
    test_labels: np.ndarray
    test_predictions: np.ndarray


def split_indices(n: int, seed: int, test_fraction: float = 0.2):
    """Seeded 4:1 train/test split of ``range(n)``."""
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    if n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    else:
        n_test = 0
    return perm[n_test:], perm[:n_test]


def accuracy(model: DdffModel, maps: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict_depths(model, maps) == labels))


def train(maps, labels, cfg: TrainConfig | None = None, seed: int = 0) -> TrainResult:
    """Mini-batch Adam on mean cross-entropy. Deterministic for a given seed.

    ``maps`` are raw depths (n, 25) or (n, 5, 5); ``labels`` depths 1..6.
    The returned parameters are rounded to float32, the precision they are stored at.
    """
    cfg = cfg or TrainConfig()
    maps = np.asarray(maps).reshape(-1, MAP_SIZE, MAP_SIZE)
    labels = np.asarray(labels).astype(np.int64)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    if labels.min() < MIN_DEPTH or labels.max() > MAX_DEPTH:
        raise ValueError("labels must be depths 1..6")
    train_idx, test_idx = split_indices(len(labels), seed, cfg.test_fraction)
    rng = np.random.default_rng(seed + 1)
    model = DdffModel.initialize(rng)
    x_all = maps.astype(np.float64) / DEPTH_SCALE
    y_all = labels - MIN_DEPTH

    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(a) for k, a in model.params.items()}
    step = 0
    stream = np.empty(0, dtype=np.int64)
    loss = float("nan")
    for _ in range(cfg.epochs):
        for _ in range(cfg.iterations):
            while len(stream) < cfg.batch_size:
                stream = np.concatenate([stream, rng.permutation(train_idx)])
            batch, stream = stream[:cfg.batch_size], stream[cfg.batch_size:]
            loss, grads = loss_and_grads(model, x_all[batch], y_all[batch])
            step += 1
            lr_t = cfg.learning_rate * np.sqrt(1 - cfg.beta2 ** step) / (1 - cfg.beta1 ** step)
            for k, g in grads.items():
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g
                model.params[k] -= lr_t * m[k] / (np.sqrt(v[k]) + cfg.eps)

    model = model.astype(np.float32)
    test_pred = predict_depths(model, maps[test_idx])
    return TrainResult(
        model,
        accuracy(model, maps[train_idx], labels[train_idx]),
        float(np.mean(test_pred == labels[test_idx])) if len(test_idx) else float("nan"),
        float(loss),
        labels[test_idx],
        test_pred,
    )


def synthetic_rule_dataset(n: int, seed: int = 0):
    """Maps scattered around a random base depth, labelled by their rounded mean."""
    rng = np.random.default_rng(seed)
    base = rng.integers(MIN_DEPTH, MAX_DEPTH + 1, size=(n, 1))
    noise = rng.choice([-1, 0, 1], p=[0.2, 0.6, 0.2], size=(n, K_D))
    maps = np.clip(base + noise, MIN_DEPTH, MAX_DEPTH).astype(np.uint8)
    labels = np.clip(np.round(maps.mean(axis=1)), MIN_DEPTH, MAX_DEPTH).astype(np.uint8)
    return maps, labels


# ---------------------------------------------------------------------------
# files


def save_model(path, model: DdffModel) -> None:
    """Little-endian: magic, version, label base, class count, tensor count, then
    per tensor its rank, dims and float32 values, in PARAM_SHAPES order."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<4I", WEIGHTS_VERSION, MIN_DEPTH, N_CLASSES, len(PARAM_SHAPES)))
        for name, shape in PARAM_SHAPES:
            arr = np.asarray(model.params[name], dtype="<f4")
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            f.write(struct.pack(f"<{1 + len(shape)}I", len(shape), *shape))
            f.write(arr.tobytes())


def default_model() -> DdffModel:
    return load_model(DEFAULT_MODEL_PATH)


def load_model(path) -> DdffModel:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a DDFF weights file")
    version, label_base, n_classes, n_tensors = struct.unpack_from("<4I", raw, 4)
    if version != WEIGHTS_VERSION or label_base != MIN_DEPTH or n_classes != N_CLASSES:
        raise ValueError(f"{path}: unsupported header {version}/{label_base}/{n_classes}")
    if n_tensors != len(PARAM_SHAPES):
        raise ValueError(f"{path}: expected {len(PARAM_SHAPES)} tensors, found {n_tensors}")
    pos = 20
    params = {}
    for name, shape in PARAM_SHAPES:
        (ndim,) = struct.unpack_from("<I", raw, pos)
        dims = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
        pos += 4 + 4 * ndim
        if tuple(dims) != shape:
            raise ValueError(f"{path}: {name} has shape {dims}, expected {shape}")
        count = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * count
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return DdffModel(params)


def write_dataset(path, maps, labels) -> int:
    maps = np.asarray(maps, dtype=np.uint8).reshape(-1, K_D)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if len(maps) != len(labels):
        raise ValueError("maps and labels differ in length")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<Q", len(maps)))
        f.write(np.concatenate([maps, labels], axis=1).tobytes())
    return len(maps)


def read_dataset(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a DDS1 dataset")
    (n,) = struct.unpack_from("<Q", raw, 4)
    body = np.frombuffer(raw, dtype=np.uint8, offset=12)
    if body.size != n * (K_D + 1):
        raise ValueError(f"{path}: expected {n} records, found {body.size / (K_D + 1):g}")
    rec = body.reshape(n, K_D + 1)
    return rec[:, :K_D].copy(), rec[:, K_D].copy()
