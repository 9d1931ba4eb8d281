"""Deterministic test material built from the scikit-image sample pictures.

A clip is a window panning across a still picture at a constant integer
velocity, with seeded Gaussian sensor noise added per frame.
"""

from __future__ import annotations

import numpy as np
from skimage import color, data

from .frame_io import FramePlane, make_plane

TEST_PICTURE = "camera"
TRAIN_PICTURES = ("astronaut", "coffee", "rocket", "immunohistochemistry")


def picture(name: str) -> np.ndarray:
    """A sample picture as a float luma array in [0, 255]."""
    try:
        img = getattr(data, name)()
    except AttributeError:
        raise ValueError(f"unknown picture {name!r}") from None
    if img.ndim == 3:
        img = color.rgb2gray(img[..., :3]) * 255.0
    return img.astype(np.float64)


def panning_clip(name: str = TEST_PICTURE, width: int = 416, height: int = 240, frames: int = 10,
                 velocity=(3, 2), origin=None, noise: float = 2.0, seed: int = 0) -> list[FramePlane]:
    """Frames of a window moving by ``velocity`` pixels per frame over a picture."""
    img = picture(name)
    vx, vy = velocity
    need_w = width + abs(vx) * (frames - 1)
    need_h = height + abs(vy) * (frames - 1)
    ih, iw = img.shape
    if need_w > iw or need_h > ih:
        raise ValueError(f"picture {name!r} ({iw}x{ih}) too small for a {need_w}x{need_h} pan")
    if origin is None:
        origin = ((iw - need_w) // 2, (ih - need_h) // 2)
    ox = origin[0] + (abs(vx) * (frames - 1) if vx < 0 else 0)
    oy = origin[1] + (abs(vy) * (frames - 1) if vy < 0 else 0)
    rng = np.random.default_rng(seed)
    out = []
    for t in range(frames):
        x0, y0 = ox + vx * t, oy + vy * t
        f = img[y0:y0 + height, x0:x0 + width] + rng.normal(0.0, noise, (height, width))
        out.append(make_plane(np.clip(np.round(f), 0, 255).astype(np.uint8), t))
    return out


def training_clips(width: int = 416, height: int = 240, frames: int = 10, seed: int = 1):
    """One clip per training picture, none of them the test picture."""
    clips = []
    for i, name in enumerate(TRAIN_PICTURES):
        img = picture(name)
        w = min(width, img.shape[1] - 3 * (frames - 1))
        h = min(height, img.shape[0] - 2 * (frames - 1))
        w -= w % 8
        h -= h % 8
        clips.append(panning_clip(name, w, h, frames, (3, 2), noise=2.0, seed=seed + i))
    return clips


def natural_blocks(size: int, count: int, seed: int = 0, names=("camera", "astronaut", "coffee", "brick")):
    """``count`` size x size uint8 crops taken at seeded positions from sample pictures."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        img = picture(names[i % len(names)])
        y = int(rng.integers(0, img.shape[0] - size + 1))
        x = int(rng.integers(0, img.shape[1] - size + 1))
        out.append(np.round(img[y:y + size, x:x + size]).astype(np.uint8))
    return out
