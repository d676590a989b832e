"""Procedural bouncing-ball videos and a bit-exact dataset file format.

Videos are F frames of a single ball moving at constant velocity with
elastic wall reflections, rendered as a soft disc: background -1, peak
+1, edge fading over one pixel. The motion-class label comes from the
initial velocity direction (4 quadrant classes or 8 octant classes), so
a frozen-feature probe has a video-level target to predict.

File format "GPDV": little-endian magic/version/geometry header, then
per video a u16 label followed by float32 frames, row-major. Reading
back a written file reproduces the arrays bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, GeometryError
from .rng import child_seed, substream

MAGIC = b"GPDV"
VERSION = 1

QUADRANT = "quadrant"  # 4 classes, ordering: ++, +-, -+, --
OCTANT = "octant"      # 8 classes, 45-degree sectors of the direction angle


@dataclass(frozen=True)
class BounceParams:
    radius: float = 3.0
    speed_min: float = 0.5
    speed_max: float = 2.0
    height: int = 16
    width: int = 16
    frames: int = 8
    channels: int = 1
    label_rule: str = QUADRANT

    def __post_init__(self):
        if self.radius >= min(self.height, self.width) / 2:
            raise DomainError(f"radius {self.radius} too large for {self.height}x{self.width}")
        if self.speed_min <= 0 or self.speed_max < self.speed_min:
            raise DomainError("need 0 < speed_min <= speed_max")
        if self.frames < 2:
            raise DomainError("need at least 2 frames")
        if self.label_rule not in (QUADRANT, OCTANT):
            raise DomainError(f"unknown label rule {self.label_rule!r}")

    @property
    def num_classes(self) -> int:
        return 4 if self.label_rule == QUADRANT else 8


@dataclass
class LatentVideo:
    """F x C x H x W float frames in [-1, 1] plus a motion-class label."""

    frames: np.ndarray
    label: int
    seed: int = -1

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise GeometryError(f"frames must be (F, C, H, W), got {self.frames.shape}")


def velocity_label(vx: float, vy: float, rule: str) -> int:
    """Class id of a velocity direction under the chosen rule."""
    if rule == QUADRANT:
        # fixed ordering ++, +-, -+, -- on (sign vx, sign vy)
        return (0 if vx >= 0 else 2) + (0 if vy >= 0 else 1)
    angle = np.arctan2(vy, vx) % (2 * np.pi)
    return int(angle // (np.pi / 4)) % 8


def reflect_interval(x: float, lo: float, hi: float) -> tuple[float, float]:
    """Fold a coordinate into [lo, hi] by elastic reflection.

    Returns (position, direction_sign) where the sign flips once per fold.
    """
    width = hi - lo
    sign = 1.0
    while x < lo or x > hi:
        if x < lo:
            x = 2 * lo - x
        else:
            x = 2 * hi - x
        sign = -sign
    return x, sign


def simulate_trajectory(params: BounceParams, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame ball centers and the initial velocity for a seed.

    Returns (positions of shape (F, 2) as (x, y), initial (vx, vy)).
    """
    rng = substream(seed, "bounce")
    r = params.radius
    lo_x, hi_x = r, params.width - r
    lo_y, hi_y = r, params.height - r
    x = rng.uniform(lo_x, hi_x)
    y = rng.uniform(lo_y, hi_y)
    angle = rng.uniform(0.0, 2 * np.pi)
    speed = rng.uniform(params.speed_min, params.speed_max)
    v0 = np.array([speed * np.cos(angle), speed * np.sin(angle)])
    vx, vy = v0
    positions = np.empty((params.frames, 2))
    for f in range(params.frames):
        positions[f] = (x, y)
        x, sx = reflect_interval(x + vx, lo_x, hi_x)
        y, sy = reflect_interval(y + vy, lo_y, hi_y)
        vx *= sx
        vy *= sy
    return positions, v0


def gen_bounce(params: BounceParams, seed: int) -> LatentVideo:
    """One bouncing-ball video, fully determined by (params, seed)."""
    positions, v0 = simulate_trajectory(params, seed)
    label = velocity_label(float(v0[0]), float(v0[1]), params.label_rule)
    r = params.radius
    ys, xs = np.mgrid[0 : params.height, 0 : params.width]
    frames = np.empty(
        (params.frames, params.channels, params.height, params.width), dtype=np.float32
    )
    for f, (x, y) in enumerate(positions):
        dist = np.hypot(xs + 0.5 - x, ys + 0.5 - y)
        disc = np.clip(r + 0.5 - dist, 0.0, 1.0)
        frames[f] = (-1.0 + 2.0 * disc).astype(np.float32)
    return LatentVideo(frames, label, seed)


def gen_dataset(params: BounceParams, seed: int, count: int) -> list[LatentVideo]:
    """Deterministic list of videos; video i is keyed by (seed, "data", i)."""
    return [gen_bounce(params, child_seed(seed, "data", i)) for i in range(count)]


# -- file format -----------------------------------------------------------------


def write_dataset(videos: list[LatentVideo], path) -> None:
    if videos:
        geometry = videos[0].frames.shape
        for v in videos:
            if v.frames.shape != geometry:
                raise GeometryError(
                    f"mixed geometries in dataset: {v.frames.shape} vs {geometry}"
                )
    else:
        geometry = (0, 0, 0, 0)
    f, c, h, w = geometry
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HHHHHI", VERSION, f, c, h, w, len(videos)))
        for v in videos:
            fh.write(struct.pack("<H", v.label))
            fh.write(np.ascontiguousarray(v.frames.astype("<f4")).tobytes())


def read_dataset(path) -> list[LatentVideo]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0")
        header = fh.read(14)
        if len(header) != 14:
            raise FormatError(f"truncated header at offset {4 + len(header)}")
        version, f, c, h, w, count = struct.unpack("<HHHHHI", header)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        frame_bytes = f * c * h * w * 4
        videos = []
        for i in range(count):
            rec = fh.read(2 + frame_bytes)
            if len(rec) != 2 + frame_bytes:
                raise FormatError(f"truncated record {i} at offset {fh.tell()}")
            (label,) = struct.unpack("<H", rec[:2])
            frames = np.frombuffer(rec[2:], dtype="<f4").reshape(f, c, h, w).copy()
            videos.append(LatentVideo(frames, label))
        if fh.read(1):
            raise FormatError(f"trailing bytes after {count} records")
    return videos
