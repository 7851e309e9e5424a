"""From raw frames to labeled cuboid datasets.

Frames arrive as a directory of binary PGM (P5) or PPM (P6) files with
maxval 255 plus a ``meta.json`` holding ``{"fps": ...}``. Frames are held as
a float32 array (N, C, H, W) scaled to [0, 1]; cuboids are cut out of it as
(C, H, W, T) blocks.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BoundsError, FormatError, UsageError
from .rng import SplitMix64
from .tensor import flip_width

EVENT_TYPES = ("goal", "foul", "shot", "save", "fight", "timeout")
DATASET_MAGIC = b"CUB1"
DATASET_VERSION = 1
DTYPE_U8 = 0

_HEADER = struct.Struct("<4sIIHHHHB")


# --------------------------------------------------------------------------- PNM


def _pnm_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset of the byte following the single
    whitespace character that terminates the last token.
    """
    tokens = []
    pos = 0
    n = len(blob)
    while len(tokens) < count:
        while pos < n and blob[pos] in b" \t\r\n":
            pos += 1
        if pos < n and blob[pos] == ord("#"):
            while pos < n and blob[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and blob[pos] not in b" \t\r\n#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(blob[start:pos])
    if pos >= n or blob[pos] not in b" \t\r\n":
        raise FormatError("PNM header not followed by whitespace")
    return tokens, pos + 1


def parse_pnm(blob: bytes) -> np.ndarray:
    """Decode a binary P5/P6 image into a uint8 array of shape (C, H, W)."""
    (magic, width, height, maxval), offset = _pnm_tokens(blob, 4)
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise FormatError(f"unsupported PNM magic {magic!r}; expected P5 or P6")
    try:
        w, h, maxv = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise FormatError(f"bad PNM header values: {exc}") from exc
    if w < 1 or h < 1:
        raise FormatError(f"bad PNM dimensions {w}x{h}")
    if maxv != 255:
        raise FormatError(f"only 8-bit PNM (maxval 255) is supported, got maxval {maxv}")
    size = w * h * channels
    raster = blob[offset : offset + size]
    if len(raster) != size:
        raise FormatError(f"PNM raster truncated: {len(raster)} of {size} bytes")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def encode_pnm(img: np.ndarray) -> bytes:
    """Encode a uint8 (C, H, W) array with C in {1, 3} as P5/P6."""
    c, h, w = img.shape
    if c not in (1, 3):
        raise FormatError(f"PNM needs 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + np.ascontiguousarray(img.transpose(1, 2, 0), dtype=np.uint8).tobytes()


# --------------------------------------------------------------------------- frames


@dataclass
class FrameSequence:
    frames: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    fps: float

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise FormatError(f"frames must be (N, C, H, W), got {self.frames.shape}")
        if self.frames.shape[1] not in (1, 3):
            raise FormatError(f"channel count must be 1 or 3, got {self.frames.shape[1]}")
        if not self.fps > 0:
            raise UsageError(f"fps must be positive, got {self.fps}")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]


def read_frames(path) -> FrameSequence:
    path = Path(path)
    meta_path = path / "meta.json"
    if not path.is_dir():
        raise UsageError(f"frame directory {path} does not exist")
    if not meta_path.exists():
        raise FormatError(f"{meta_path} missing")
    try:
        fps = float(json.loads(meta_path.read_text())["fps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad {meta_path}: {exc}") from exc
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not files:
        raise UsageError(f"no .pgm/.ppm frames in {path}")
    first = None
    frames = None
    for i, f in enumerate(files):
        try:
            img = parse_pnm(f.read_bytes())
        except FormatError as exc:
            raise FormatError(f"{f.name}: {exc}") from exc
        if first is None:
            first = img.shape
            frames = np.empty((len(files),) + first, dtype=np.float32)
        elif img.shape != first:
            raise FormatError(f"{f.name}: frame shape {img.shape} differs from first frame {first}")
        frames[i] = img
    frames /= np.float32(255.0)
    return FrameSequence(frames, fps)


def write_frames(path, seq: FrameSequence) -> None:
    """Write frames as NNNNNN.pgm/.ppm plus meta.json (values quantized to 8 bits)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if seq.channels == 1 else ".ppm"
    for i, frame in enumerate(seq.frames):
        (path / f"{i:06d}{ext}").write_bytes(encode_pnm(quantize(frame)))
    (path / "meta.json").write_text(json.dumps({"fps": seq.fps}))


def downsample(seq: FrameSequence, dst_fps: float) -> FrameSequence:
    """Keep every k-th frame where k = src_fps / dst_fps must be a positive integer."""
    if not dst_fps > 0:
        raise UsageError(f"target fps must be positive, got {dst_fps}")
    ratio = seq.fps / dst_fps
    k = round(ratio)
    if k < 1 or not math.isclose(ratio, k, rel_tol=1e-9, abs_tol=1e-9):
        raise UsageError(f"cannot downsample {seq.fps} fps to {dst_fps} fps: ratio {ratio} is not an integer")
    return FrameSequence(np.ascontiguousarray(seq.frames[::k]), dst_fps)


def quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def dequantize(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(255.0)


# --------------------------------------------------------------------------- grid and cuboids


@dataclass(frozen=True)
class GridSpec:
    roi: tuple[int, int, int, int]  # x, y, w, h in pixels
    window: int = 100
    stride: int = 50
    depth: int = 30
    hop: int = 30

    def __post_init__(self):
        x, y, w, h = self.roi
        if self.window < 1 or self.stride < 1 or self.depth < 1 or self.hop < 1:
            raise UsageError(f"window, stride, depth and hop must be >= 1: {self}")
        if self.window > w or self.window > h:
            raise UsageError(f"ROI {w}x{h} is smaller than the {self.window}px window")
        if x < 0 or y < 0:
            raise UsageError(f"ROI origin must be non-negative, got ({x}, {y})")


def grid_positions(spec: GridSpec) -> list[tuple[int, int]]:
    """Crop origins (x, y) in row-major order: y outer, x inner."""
    x0, y0, w, h = spec.roi
    nx = (w - spec.window) // spec.stride + 1
    ny = (h - spec.window) // spec.stride + 1
    return [(x0 + i * spec.stride, y0 + j * spec.stride) for j in range(ny) for i in range(nx)]


def grid_shape(spec: GridSpec) -> tuple[int, int]:
    """(columns, rows) of the crop grid."""
    _, _, w, h = spec.roi
    return (w - spec.window) // spec.stride + 1, (h - spec.window) // spec.stride + 1


@dataclass
class Cuboid:
    data: np.ndarray  # (C, H, W, T) float32 in [0, 1]
    grid_x: int = 0
    grid_y: int = 0
    t0: int = 0

    @property
    def shape(self):
        return self.data.shape


def extract_cuboids(seq: FrameSequence, spec: GridSpec, t0: int) -> list[Cuboid]:
    """One (C, window, window, depth) cuboid per grid origin, starting at frame ``t0``."""
    if t0 < 0 or t0 + spec.depth > len(seq):
        raise BoundsError(f"frames [{t0}, {t0 + spec.depth}) exceed the {len(seq)}-frame sequence")
    x, y, w, h = spec.roi
    if x + w > seq.width or y + h > seq.height:
        raise BoundsError(f"ROI {spec.roi} exceeds {seq.width}x{seq.height} frames")
    clip = seq.frames[t0 : t0 + spec.depth]  # (T, C, H, W)
    nx, _ = grid_shape(spec)
    out = []
    for k, (ox, oy) in enumerate(grid_positions(spec)):
        block = clip[:, :, oy : oy + spec.window, ox : ox + spec.window]
        out.append(Cuboid(np.ascontiguousarray(block.transpose(1, 2, 3, 0)), k % nx, k // nx, t0))
    return out


def hop_starts(n_frames: int, spec: GridSpec) -> list[int]:
    """Start frames 0, hop, 2*hop, ... that leave room for a full cuboid."""
    return list(range(0, n_frames - spec.depth + 1, spec.hop))


# --------------------------------------------------------------------------- labeling


@dataclass(frozen=True)
class Event:
    time_s: float
    type: str


@dataclass
class EventManifest:
    fps: float
    roi: tuple[int, int, int, int]
    events: list[Event] = field(default_factory=list)

    def __post_init__(self):
        for e in self.events:
            if e.type not in EVENT_TYPES:
                raise FormatError(f"unknown event type {e.type!r}; expected one of {EVENT_TYPES}")
            if e.time_s < 0:
                raise FormatError(f"event time must be non-negative, got {e.time_s}")
        self.events = sorted(self.events, key=lambda e: e.time_s)

    @classmethod
    def from_json(cls, obj: dict) -> "EventManifest":
        try:
            roi = obj["roi"]
            return cls(
                fps=float(obj["fps"]),
                roi=(int(roi["x"]), int(roi["y"]), int(roi["w"]), int(roi["h"])),
                events=[Event(float(e["time_s"]), str(e["type"])) for e in obj.get("events", [])],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc

    def to_json(self) -> dict:
        x, y, w, h = self.roi
        return {
            "fps": self.fps,
            "roi": {"x": x, "y": y, "w": w, "h": h},
            "events": [{"time_s": e.time_s, "type": e.type} for e in self.events],
        }


def read_manifest(path) -> EventManifest:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return EventManifest.from_json(obj)


@dataclass
class LabeledSample:
    cuboid: Cuboid
    label: int  # 1 = highlight, 0 = standard play

    def __post_init__(self):
        if self.label not in (0, 1):
            raise UsageError(f"label must be 0 or 1, got {self.label!r}")


def label_samples(
    cuboids: Iterable[Cuboid],
    manifest: EventManifest,
    fps: float,
    positive_window_s: float = 10.0,
    guard_s: float = 30.0,
) -> list[LabeledSample]:
    """Label cuboids by start time ``t0 / fps``.

    Positive when the start lies in [goal, goal + positive_window_s] for some
    goal; negative when it is at least ``guard_s`` away from every event of
    any type; anything else is ambiguous and dropped.
    """
    goals = [e.time_s for e in manifest.events if e.type == "goal"]
    times = [e.time_s for e in manifest.events]
    out = []
    for c in cuboids:
        start = c.t0 / fps
        if any(g <= start <= g + positive_window_s for g in goals):
            out.append(LabeledSample(c, 1))
        elif all(abs(start - t) >= guard_s for t in times):
            out.append(LabeledSample(c, 0))
    return out


def augment_flip(sample: LabeledSample) -> LabeledSample:
    c = sample.cuboid
    return LabeledSample(Cuboid(flip_width(c.data), c.grid_x, c.grid_y, c.t0), sample.label)


def _class_indices(samples: Sequence[LabeledSample]) -> tuple[list[int], list[int]]:
    pos = [i for i, s in enumerate(samples) if s.label == 1]
    neg = [i for i, s in enumerate(samples) if s.label == 0]
    if not pos or not neg:
        raise UsageError(f"both classes are required, got {len(pos)} positive and {len(neg)} negative samples")
    return pos, neg


def _subsample(indices: list[int], count: int, rng: SplitMix64) -> list[int]:
    perm = rng.permutation(len(indices))
    return sorted(indices[i] for i in perm[:count])


def balance(samples: Sequence[LabeledSample], seed: int = 0) -> list[LabeledSample]:
    """Randomly subsample the majority class down to the minority count (original order kept)."""
    pos, neg = _class_indices(samples)
    m = min(len(pos), len(neg))
    rng = SplitMix64(seed)
    keep = sorted(_subsample(pos, m, rng) + _subsample(neg, m, rng))
    return [samples[i] for i in keep]


def balance_and_split(
    samples: Sequence[LabeledSample], train_fraction: float = 0.7, seed: int = 0
) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Balance the classes, then split each class ``floor(m * train_fraction)`` / rest."""
    if not 0.0 < train_fraction < 1.0:
        raise UsageError(f"train_fraction must be in (0, 1), got {train_fraction}")
    pos, neg = _class_indices(samples)
    m = min(len(pos), len(neg))
    rng = SplitMix64(seed)
    pos = _subsample(pos, m, rng)
    neg = _subsample(neg, m, rng)
    n_train = math.floor(m * train_fraction)
    train_idx, val_idx = [], []
    for cls in (pos, neg):
        perm = rng.permutation(m)
        train_idx += [cls[i] for i in perm[:n_train]]
        val_idx += [cls[i] for i in perm[n_train:]]
    return [samples[i] for i in sorted(train_idx)], [samples[i] for i in sorted(val_idx)]


# --------------------------------------------------------------------------- CUB1 datasets


def dataset_bytes(samples: Sequence[LabeledSample], dims: Sequence[int] | None = None) -> bytes:
    """Serialize to CUB1.

    Little-endian header: magic, u32 version, u32 count, u16 C, H, W, T,
    u8 dtype (0 = u8). Each sample is a u8 label followed by its pixels as
    bytes in (c, t, h, w) order. ``dims`` fixes the header extents of an
    empty dataset.
    """
    if samples:
        dims = tuple(samples[0].cuboid.data.shape)
        for s in samples:
            if tuple(s.cuboid.data.shape) != dims:
                raise FormatError(f"non-uniform cuboid extents {s.cuboid.data.shape} vs {dims}")
    elif dims is None:
        dims = (0, 0, 0, 0)
    if len(dims) != 4 or any(not 0 <= d < 65536 for d in dims):
        raise FormatError(f"cuboid extents {tuple(dims)} do not fit the CUB1 header")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(samples), *dims, DTYPE_U8))
    for s in samples:
        buf.write(bytes([s.label]))
        buf.write(quantize(s.cuboid.data).transpose(0, 3, 1, 2).tobytes())
    return buf.getvalue()


def write_dataset(path, samples: Sequence[LabeledSample], dims: Sequence[int] | None = None) -> None:
    Path(path).write_bytes(dataset_bytes(samples, dims))


def parse_dataset(blob: bytes) -> tuple[list[LabeledSample], tuple[int, int, int, int]]:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated CUB1 header")
    magic, version, count, c, h, w, t, dtype = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if dtype != DTYPE_U8:
        raise FormatError(f"unsupported pixel dtype code {dtype}")
    pixels = c * h * w * t
    record = 1 + pixels
    expected = _HEADER.size + count * record
    if len(blob) != expected:
        raise FormatError(f"dataset payload is {len(blob)} bytes, expected {expected}")
    samples = []
    if count:
        raw = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size).reshape(count, record)
        labels = raw[:, 0]
        if np.any(labels > 1):
            raise FormatError("dataset label outside {0, 1}")
        cubes = dequantize(raw[:, 1:].reshape(count, c, t, h, w)).transpose(0, 1, 3, 4, 2)
        for lab, cube in zip(labels, cubes):
            samples.append(LabeledSample(Cuboid(np.ascontiguousarray(cube)), int(lab)))
    return samples, (c, h, w, t)


def read_dataset(path) -> list[LabeledSample]:
    return parse_dataset(Path(path).read_bytes())[0]
