"""Procedural moving-shape videos, window batching and PGM frame I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


@dataclass
class ShapeSpec:
    kind: str  # "square" | "circle"
    position: tuple[float, float]  # top-left of the bounding box (row, col)
    velocity: tuple[float, float]  # (d_row, d_col) per frame
    size: float
    intensity: float

    def __post_init__(self):
        if self.kind not in ("square", "circle"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.size <= 0:
            raise ValueError("size must be positive")
        if not 0 < self.intensity <= 1:
            raise ValueError("intensity must be in (0, 1]")


@dataclass
class VideoSequence:
    frames: np.ndarray  # (T, c, H, W) in [0, 1]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def frame(self, t: int) -> np.ndarray:
        """Frame ``t`` as a ``(1, c, H, W)`` array."""
        return self.frames[t][None]


def _reflect(pos: float, vel: float, limit: float) -> tuple[float, float]:
    """Advance one coordinate, bouncing elastically inside ``[0, limit]``."""
    nxt = pos + vel
    if nxt < 0:
        nxt, vel = -nxt, -vel
    elif nxt > limit:
        nxt, vel = 2 * limit - nxt, -vel
    return min(max(nxt, 0.0), limit), vel


def step_shape(shape: ShapeSpec, height: int, width: int) -> ShapeSpec:
    r, vr = _reflect(shape.position[0], shape.velocity[0], height - shape.size)
    c, vc = _reflect(shape.position[1], shape.velocity[1], width - shape.size)
    return ShapeSpec(shape.kind, (r, c), (vr, vc), shape.size, shape.intensity)


def render(shapes: Sequence[ShapeSpec], height: int, width: int) -> np.ndarray:
    """Rasterise at pixel centres with max-intensity compositing -> (H, W)."""
    canvas = np.zeros((height, width))
    rows = np.arange(height)[:, None] + 0.5
    cols = np.arange(width)[None, :] + 0.5
    for s in shapes:
        r0, c0 = s.position
        if s.kind == "square":
            mask = (rows >= r0) & (rows < r0 + s.size) & (cols >= c0) & (cols < c0 + s.size)
        else:
            rad = s.size / 2
            mask = (rows - r0 - rad) ** 2 + (cols - c0 - rad) ** 2 < rad * rad
        canvas = np.where(mask, np.maximum(canvas, s.intensity), canvas)
    return canvas


def gen_sequence(seed: int, height: int = 32, width: int = 32, n_objects: int = 1, length: int = 5,
                 channels: int = 1, size_range: tuple[float, float] | None = None,
                 max_speed: float | None = None) -> VideoSequence:
    """Generate a bouncing-shapes video, deterministic in ``seed``."""
    if height < 8 or width < 8:
        raise ValueError(f"canvas {height}x{width} too small (minimum 8x8)")
    if n_objects < 1:
        raise ValueError("need at least one object")
    if length < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng(seed)
    side = min(height, width)
    lo, hi = size_range or (side / 8, side / 4)
    speed = max_speed if max_speed is not None else side / 16
    shapes = []
    for _ in range(n_objects):
        size = float(rng.uniform(lo, hi))
        shapes.append(ShapeSpec(
            kind=str(rng.choice(["square", "circle"])),
            position=(float(rng.uniform(0, height - size)), float(rng.uniform(0, width - size))),
            velocity=(float(rng.uniform(-speed, speed)), float(rng.uniform(-speed, speed))),
            size=size,
            intensity=float(rng.uniform(0.5, 1.0)),
        ))
    meta = {"seed": seed, "shapes": [vars(s).copy() for s in shapes]}
    frames = np.empty((length, channels, height, width))
    for t in range(length):
        frames[t] = render(shapes, height, width)[None]
        shapes = [step_shape(s, height, width) for s in shapes]
    return VideoSequence(frames, meta)


def gen_dataset(n_seqs: int, seed: int, **kwargs) -> list[VideoSequence]:
    seeds = np.random.SeedSequence(seed).generate_state(n_seqs)
    return [gen_sequence(int(s), **kwargs) for s in seeds]


# --------------------------------------------------------------------------
# windows

def enumerate_windows(sequences: Sequence[VideoSequence], context: int, horizon: int,
                      stride: int = 1) -> list[tuple[int, int]]:
    span = context + horizon
    windows = []
    for i, seq in enumerate(sequences):
        if len(seq) < span:
            raise ValueError(f"sequence {i} has {len(seq)} frames, need {span}")
        windows.extend((i, s) for s in range(0, len(seq) - span + 1, stride))
    return windows


def stack_windows(sequences: Sequence[VideoSequence], windows, context: int, horizon: int):
    span = context + horizon
    clips = np.stack([sequences[i].frames[s:s + span] for i, s in windows])
    return clips[:, :context], clips[:, context:]


def batch_iter(sequences: Sequence[VideoSequence], batch: int, context: int = 4, horizon: int = 1,
               seed: int = 0, stride: int = 1, epochs: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(context, target)`` arrays of shape ``(b, time, c, H, W)``.

    Windows are reshuffled every epoch from one seeded generator; the last
    batch of an epoch may be short. Runs forever when ``epochs`` is None.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    windows = enumerate_windows(sequences, context, horizon, stride)
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(windows))
        for start in range(0, len(order), batch):
            chosen = [windows[j] for j in order[start:start + batch]]
            yield stack_windows(sequences, chosen, context, horizon)
        epoch += 1


# --------------------------------------------------------------------------
# PGM I/O

def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] -> uint8 with round-half-away-from-zero."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def _to_plane(frame) -> np.ndarray:
    a = np.asarray(frame, dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"write_pgm needs a single-channel frame, got shape {np.shape(frame)}")
    return a


def write_pgm(frame, path) -> None:
    plane = _to_plane(frame)
    h, w = plane.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantize(plane).tobytes())


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ValueError("malformed PGM header")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM as a ``(1, 1, H, W)`` array of ``byte / 255``."""
    buf = Path(path).read_bytes()
    tokens, offset = _tokens(buf, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    if w < 1 or h < 1:
        raise ValueError(f"{path}: malformed PGM dimensions {w}x{h}")
    raster = buf[offset:offset + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: truncated raster")
    return (np.frombuffer(raster, dtype=np.uint8).reshape(1, 1, h, w) / 255.0)


def write_frame(frame, stem) -> list[str]:
    """Write a ``(c, H, W)`` frame; multi-channel frames get ``_c{i}`` suffixes."""
    a = np.asarray(frame, dtype=np.float64)
    if a.ndim == 4:
        a = a[0]
    if a.ndim == 2:
        a = a[None]
    stem = str(stem)
    if a.shape[0] == 1:
        paths = [stem + ".pgm"]
    else:
        paths = [f"{stem}_c{i}.pgm" for i in range(a.shape[0])]
    for plane, p in zip(a, paths):
        write_pgm(plane, p)
    return paths


def write_sequence(frames: np.ndarray, out_dir, name: str) -> Path:
    """Write frames ``(T, c, H, W)`` plus a manifest ``<name>.txt``.

    Each manifest line is one frame: its channel file paths, tab-separated,
    relative to the manifest's directory.
    """
    out_dir = Path(out_dir)
    frame_dir = out_dir / name
    frame_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for t, frame in enumerate(frames):
        paths = write_frame(frame, frame_dir / f"frame_{t:04d}")
        lines.append("\t".join(os.path.relpath(p, out_dir) for p in paths))
    manifest = out_dir / f"{name}.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_sequence(manifest) -> VideoSequence:
    manifest = Path(manifest)
    base = manifest.parent
    frames = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        planes = [read_pgm(base / p)[0, 0] for p in line.split("\t")]
        frames.append(np.stack(planes))
    if not frames:
        raise ValueError(f"{manifest}: empty manifest")
    return VideoSequence(np.stack(frames), {"manifest": str(manifest)})


def read_dataset(directory) -> list[VideoSequence]:
    manifests = sorted(Path(directory).glob("*.txt"))
    if not manifests:
        raise ValueError(f"no sequence manifests in {directory}")
    return [read_sequence(m) for m in manifests]
