"""Raw video input/output and the 8x8 block lattice.

Only the luma plane is kept. Planes whose sides are not multiples of 8 are
padded on the right/bottom by edge replication; the original geometry is
remembered so quality can be measured on the visible area only.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

BLOCK = 8


class BlockCoord(NamedTuple):
    x: int
    y: int
    t: int = 0


@dataclass
class FramePlane:
    """One 8-bit luma plane.

    ``samples`` is a (height, width) uint8 array holding the padded plane.
    ``orig_width``/``orig_height`` give the visible area before padding.
    """

    samples: np.ndarray
    frame_index: int = 0
    orig_width: int = field(default=0)
    orig_height: int = field(default=0)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.uint8)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a 2-D array")
        if not self.orig_width:
            self.orig_width = self.width
        if not self.orig_height:
            self.orig_height = self.height

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def blocks_x(self) -> int:
        return -(-self.width // BLOCK)

    @property
    def blocks_y(self) -> int:
        return -(-self.height // BLOCK)

    def visible(self) -> np.ndarray:
        return self.samples[: self.orig_height, : self.orig_width]

    def block_of(self, pixel_x: int, pixel_y: int) -> BlockCoord:
        return block_of(pixel_x, pixel_y, self.width, self.height, self.frame_index)


def block_of(pixel_x: int, pixel_y: int, width: int | None = None,
             height: int | None = None, t: int = 0) -> BlockCoord:
    if pixel_x < 0 or pixel_y < 0:
        raise ValueError(f"pixel ({pixel_x}, {pixel_y}) outside plane")
    if width is not None and pixel_x >= width:
        raise ValueError(f"pixel x={pixel_x} outside plane of width {width}")
    if height is not None and pixel_y >= height:
        raise ValueError(f"pixel y={pixel_y} outside plane of height {height}")
    return BlockCoord(pixel_x // BLOCK, pixel_y // BLOCK, t)


def pad_to_blocks(samples: np.ndarray) -> np.ndarray:
    """Edge-replicate a plane up to the next multiple of 8 on each axis."""
    h, w = samples.shape
    ph = -h % BLOCK
    pw = -w % BLOCK
    if not ph and not pw:
        return samples
    return np.pad(samples, ((0, ph), (0, pw)), mode="edge")


def make_plane(samples: np.ndarray, frame_index: int = 0) -> FramePlane:
    samples = np.asarray(samples)
    if samples.min(initial=0) < 0 or samples.max(initial=0) > 255:
        raise ValueError("sample values must lie in [0, 255]")
    h, w = samples.shape
    return FramePlane(pad_to_blocks(samples.astype(np.uint8)), frame_index, w, h)


def load_yuv(path, width: int, height: int, max_frames: int | None = None) -> list[FramePlane]:
    """Read luma planes from a planar 4:2:0 8-bit file."""
    if width <= 0 or height <= 0:
        raise ValueError(f"invalid dimensions {width}x{height}")
    luma = width * height
    chroma = 2 * ((width + 1) // 2) * ((height + 1) // 2)
    frame_bytes = luma + chroma
    data = np.fromfile(path, dtype=np.uint8)
    frames = []
    n = 0
    pos = 0
    while pos < data.size and (max_frames is None or n < max_frames):
        if data.size - pos < frame_bytes:
            raise ValueError(
                f"{path}: truncated data in frame {n} "
                f"({data.size - pos} of {frame_bytes} bytes)")
        y = data[pos:pos + luma].reshape(height, width)
        frames.append(make_plane(y, n))
        pos += frame_bytes
        n += 1
    return frames


def write_yuv(path, frames, chroma_value: int = 128) -> None:
    """Write planes as 4:2:0 with flat chroma. Only the visible area is written."""
    with open(path, "wb") as f:
        for fr in frames:
            y = fr.visible() if isinstance(fr, FramePlane) else np.asarray(fr, dtype=np.uint8)
            h, w = y.shape
            f.write(np.ascontiguousarray(y, dtype=np.uint8).tobytes())
            c = np.full(2 * ((w + 1) // 2) * ((h + 1) // 2), chroma_value, dtype=np.uint8)
            f.write(c.tobytes())


def load_pgm(path) -> FramePlane:
    """Read a binary (P5) 8-bit PGM."""
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pos += 1
    y = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return make_plane(y, 0)


def write_pgm(path, plane) -> None:
    y = plane.visible() if isinstance(plane, FramePlane) else np.asarray(plane, dtype=np.uint8)
    h, w = y.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(y).tobytes())


def load_frames(path, width: int | None = None, height: int | None = None,
                max_frames: int | None = None) -> list[FramePlane]:
    """Dispatch on extension: .pgm is a single image, anything else raw 4:2:0."""
    if os.fspath(path).lower().endswith(".pgm"):
        return [load_pgm(path)]
    if width is None or height is None:
        raise ValueError("raw input needs width and height")
    return load_yuv(path, width, height, max_frames)
