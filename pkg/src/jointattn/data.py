"""Synthetic action videos, clip sampling and the binary dataset format.

Each video shows one bright shape performing a class-specific motion over
a static random texture.  With ``jitter > 0`` the texture is re-cropped at a
random offset every frame (camera shake); the shape itself is not shaken.

Binary layout (little-endian)::

    b"JANV1"  u32 version  u32 C  u32 count  u32 T  u32 H  u32 W
    count x { u32 label, T*4 u16 track (x0, y0, x1, y1), T*H*W f32 frames }

Track boxes are half-open pixel ranges ``[x0, x1) x [y0, y1)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError

CLASS_NAMES = ("translate-LR", "translate-UD", "rotate", "scale-pulse")
SHAPES = ("rect", "ellipse", "triangle")
MAGIC = b"JANV1"
VERSION = 1
_HEADER = struct.Struct("<6I")
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    return splitmix64((master & _MASK64) ^ splitmix64(index))


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # (T, 1, H, W) float32 in [0, 1]
    label: int
    track: np.ndarray  # (T, 4) uint16
    # exact sub-pixel object centres (x, y); generator output only, not stored on disk
    centers: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class Dataset:
    n_classes: int
    videos: list = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int, int]:
        v = self.videos[0].frames
        return v.shape[0], v.shape[2], v.shape[3]

    @property
    def labels(self) -> np.ndarray:
        return np.array([v.label for v in self.videos], dtype=np.intp)

    def __len__(self):
        return len(self.videos)


@dataclass(frozen=True)
class ClipSpec:
    stride: int = 5
    l1: int = 30
    l2: int = 16

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"clip stride must be >= 1, got {self.stride}")
        if not 1 <= self.l2 <= self.l1:
            raise ConfigError(f"need 1 <= L2 <= L1, got L1={self.l1}, L2={self.l2}")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, a: float) -> np.ndarray:
    if kind == "rect":
        return (np.abs(u) <= a) & (np.abs(v) <= a / 2)
    if kind == "ellipse":
        return (u / a) ** 2 + (v / (a / 2)) ** 2 <= 1.0
    if kind == "triangle":
        return (u >= -a) & (u <= a) & (np.abs(v) <= (a - u) / 2)
    raise ConfigError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, size: int, block: int) -> np.ndarray:
    cells = -(-size // block)
    coarse = np.kron(rng.uniform(0.0, 1.0, (cells, cells)), np.ones((block, block)))[:size, :size]
    fine = rng.uniform(0.0, 1.0, (size, size))
    return 0.3 * coarse + 0.15 * fine


def _render_video(rng: np.random.Generator, label: int, T: int, size: int, jitter: int):
    unit = size / 64.0
    a = rng.uniform(6.0, 8.0) * unit
    extent = 1.45 * a * 1.4 if CLASS_NAMES[label] == "scale-pulse" else 1.45 * a
    margin = int(np.ceil(extent)) + 1
    kind = SHAPES[rng.integers(len(SHAPES))]
    intensity = rng.uniform(0.85, 1.0)
    theta0 = rng.uniform(0, 2 * np.pi)
    t = np.arange(T, dtype=np.float64)

    name = CLASS_NAMES[label]
    lo, hi = margin, size - margin
    cx = np.full(T, rng.uniform(lo, hi))
    cy = np.full(T, rng.uniform(lo, hi))
    theta = np.full(T, theta0)
    scale = np.ones(T)
    if name in ("translate-LR", "translate-UD"):
        speed = rng.uniform(0.5, 0.9) * unit
        travel = min(speed * (T - 1), (hi - lo) * 0.95)
        speed = travel / max(T - 1, 1)
        start = rng.uniform(lo, hi - travel)
        path = start + speed * t
        if name == "translate-LR":
            cx = path
        else:
            cy = path
    elif name == "rotate":
        omega = np.deg2rad(rng.uniform(8.0, 14.0)) * rng.choice((-1.0, 1.0))
        theta = theta0 + omega * t
    else:
        period = rng.uniform(8.0, 14.0)
        phase = rng.uniform(0, 2 * np.pi)
        scale = 1.0 + 0.4 * np.sin(2 * np.pi * t / period + phase)

    canvas = _background(rng, size + 2 * jitter, max(2, int(round(4 * unit))))
    offsets = np.zeros((T, 2), dtype=int)
    if jitter > 0:
        for i in range(T):
            while True:
                off = rng.integers(0, 2 * jitter + 1, size=2)
                if i == 0 or not np.array_equal(off, offsets[i - 1]):
                    break
            offsets[i] = off

    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    frames = np.empty((T, 1, size, size), dtype=np.float32)
    track = np.empty((T, 4), dtype=np.uint16)
    for i in range(T):
        oy, ox = offsets[i]
        img = canvas[oy:oy + size, ox:ox + size].copy()
        dx, dy = xs - cx[i], ys - cy[i]
        c, s = np.cos(theta[i]), np.sin(theta[i])
        u = (c * dx + s * dy) / scale[i]
        v = (-s * dx + c * dy) / scale[i]
        mask = _shape_mask(kind, u, v, a)
        img[mask] = intensity
        frames[i, 0] = np.clip(img, 0.0, 1.0)
        rows, cols = np.nonzero(mask)
        if rows.size:
            track[i] = (cols.min(), rows.min(), cols.max() + 1, rows.max() + 1)
        else:
            x, y = int(cx[i]), int(cy[i])
            track[i] = (x, y, x + 1, y + 1)
    return frames, track, np.stack([cx, cy], axis=1)


def generate(n_classes: int = 4, seed: int = 0, count: int = 400, n_frames: int = 40,
             size: int = 64, jitter: int = 2) -> Dataset:
    """Balanced synthetic dataset; video ``i`` has label ``i % n_classes``."""
    if not 1 <= n_classes <= len(CLASS_NAMES):
        raise ConfigError(f"n_classes must be in 1..{len(CLASS_NAMES)}, got {n_classes}")
    if count < 1 or count % n_classes:
        raise ConfigError(f"count {count} is not a positive multiple of {n_classes} classes")
    if size < 32:
        raise ConfigError(f"frame size must be >= 32, got {size}")
    if n_frames < 1:
        raise ConfigError(f"need at least one frame, got {n_frames}")
    if jitter < 0:
        raise ConfigError(f"jitter must be >= 0, got {jitter}")
    videos = []
    for i in range(count):
        label = i % n_classes
        rng = np.random.default_rng(derive_seed(seed, i))
        frames, track, centers = _render_video(rng, label, n_frames, size, int(jitter))
        videos.append(SyntheticVideo(frames, label, track, centers))
    return Dataset(n_classes, videos)


# ---------------------------------------------------------------------------
# Clips
# ---------------------------------------------------------------------------


def clip_starts(n_frames: int, spec: ClipSpec) -> list[int]:
    if n_frames < spec.l1:
        raise ContractError(f"video has {n_frames} frames, clip length L1={spec.l1}")
    return list(range(0, n_frames - spec.l1 + 1, spec.stride))


@dataclass
class Clip:
    start: int
    frames: np.ndarray


def sample_clips(video: SyntheticVideo, spec: ClipSpec) -> list[Clip]:
    """All clips of ``L1`` consecutive frames starting at multiples of the stride."""
    return [Clip(s, video.frames[s:s + spec.l1]) for s in clip_starts(video.n_frames, spec)]


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def write_dataset(path, dataset: Dataset) -> None:
    T, H, W = dataset.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, dataset.n_classes, len(dataset), T, H, W))
        for v in dataset.videos:
            if v.frames.shape != (T, 1, H, W):
                raise ContractError(f"video frames {v.frames.shape} differ from dataset shape {(T, 1, H, W)}")
            fh.write(struct.pack("<I", v.label))
            fh.write(np.ascontiguousarray(v.track, dtype="<u2").tobytes())
            fh.write(np.ascontiguousarray(v.frames, dtype="<f4").tobytes())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}", offset=0)
    offset = len(MAGIC)
    if len(raw) < offset + _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} bytes", offset=len(raw))
    version, n_classes, count, T, H, W = _HEADER.unpack_from(raw, offset)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=offset)
    offset += _HEADER.size
    record = 4 + 8 * T + 4 * T * H * W
    expected = offset + count * record
    if len(raw) != expected:
        raise FormatError(
            f"header declares {count} videos of {T}x{H}x{W} ({expected} bytes), file has {len(raw)} bytes",
            offset=min(len(raw), expected),
        )
    videos = []
    for _ in range(count):
        (label,) = struct.unpack_from("<I", raw, offset)
        if label >= n_classes:
            raise FormatError(f"label {label} >= class count {n_classes}", offset=offset)
        offset += 4
        track = np.frombuffer(raw, dtype="<u2", count=T * 4, offset=offset).reshape(T, 4).astype(np.uint16)
        offset += 8 * T
        frames = np.frombuffer(raw, dtype="<f4", count=T * H * W, offset=offset).reshape(T, 1, H, W).astype(np.float32)
        offset += 4 * T * H * W
        videos.append(SyntheticVideo(frames, int(label), track))
    return Dataset(int(n_classes), videos)
