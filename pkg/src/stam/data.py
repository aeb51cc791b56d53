"""Frame sampling, synthetic clip generation, augmentation, and the two
binary file formats (datasets and checkpoints).

Synthetic tasks label clips by FRAME ORDER. The order-pair task pairs two
frame roles, a fixed high-contrast key screen shown at half of the slots
and fresh filler screens at the rest; the label encodes parities of WHERE
the key sits (even slots, first half), never which screens appear. All
classes of a group permute one shared frame multiset bit-exactly and every
slot shows the key with the same probability in every class, so any model
that treats a clip as an unordered set of frames is at chance by
construction, and so is any reading of per-slot statistics alone.

Both file formats are little-endian and fully pinned:

dataset    magic "STAMDS1\\0", u32 fields [version, count, T, H, W, C,
           num_classes], then per clip a u32 label followed by float32
           frame data in [T][H][W][C] row-major order
checkpoint magic "STAMCK1\\0", u32 version, u32 config-blob length, UTF-8
           key=value config text, u32 tensor count, then per tensor:
           u32 name length, name, u32 rank, u32 dims, float64 data,
           tensors ordered by name
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ConfigError, FormatError, LabelError, SamplingError

DATASET_MAGIC = b"STAMDS1\x00"
CHECKPOINT_MAGIC = b"STAMCK1\x00"
FORMAT_VERSION = 1

TASKS = ("order-pair", "moving-bar")


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W, C] float32 in [0, 1]
    label: int
    source: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ConfigError(
                f"clip frames must be [T, H, W, C] with T >= 1, "
                f"got {self.frames.shape}"
            )
        if self.label < 0:
            raise LabelError(f"negative label {self.label}")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < 0.0 or hi > 1.0:
            raise ConfigError(
                f"frame values outside [0, 1]: min={lo:.6f} max={hi:.6f}"
            )


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str
    classes: int
    T: int
    H: int
    W: int
    C: int = 3
    noise: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected {TASKS}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.classes not in (2, 4):
            raise ConfigError(
                f"{self.task} supports 2 or 4 classes, got {self.classes}"
            )
        if self.task == "order-pair":
            if self.T % 2 or self.T < 4:
                raise ConfigError(
                    f"order-pair arrangements need an even frame count >= 4, "
                    f"got T={self.T}"
                )
            if self.classes == 4 and self.T < 8:
                raise ConfigError(
                    f"4-class order-pair needs T >= 8, got T={self.T}"
                )
        if min(self.T, self.H, self.W, self.C) < 1:
            raise ConfigError("T, H, W, C must all be >= 1")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")


def uniform_sample(T: int, F: int) -> list[int]:
    """F frame indices at bin midpoints: index i = floor((i + 0.5) * T / F)."""
    if F < 1:
        raise SamplingError(f"need at least one frame, got F={F}")
    if F > T:
        raise SamplingError(f"cannot sample F={F} frames from T={T}")
    return [((2 * i + 1) * T) // (2 * F) for i in range(F)]


def slot_label(slots, T: int, classes: int) -> int:
    """Class of an order-pair key placement.

    Bit 0 is the parity of how many key slots are even; with 4 classes bit
    1 adds the parity of how many fall in the first half. Both bits depend
    only on WHERE the key frames sit. Single slots carry no information:
    every slot is a key slot in exactly half of each class's placements.
    """
    even = sum(1 for s in slots if s % 2 == 0) % 2
    if classes == 2:
        return even
    first = sum(1 for s in slots if s < T // 2) % 2
    return 2 * even + first


def key_slot_sets(label: int, T: int, classes: int = 4):
    """All sorted T/2-slot placements belonging to an order-pair class."""
    if not 0 <= label < classes:
        raise LabelError(f"order-pair with {classes} classes has no class {label}")
    key = (label, T, classes)
    fam = _SLOT_SET_CACHE.get(key)
    if fam is None:
        fam = tuple(
            s
            for s in combinations(range(T), T // 2)
            if slot_label(s, T, classes) == label
        )
        _SLOT_SET_CACHE[key] = fam
    return fam


_SLOT_SET_CACHE: dict = {}


def _noisy(rng, base, noise):
    frame = base + rng.normal(0.0, noise, size=base.shape)
    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def _key_screen(spec: SyntheticTaskSpec):
    """The key pattern: a fixed saturated screen, bright on even channels.

    Spatially constant and full contrast on purpose: a screen survives any
    patch-averaging readout unattenuated and its amplitude rivals the
    shared background, so the key stays visible deep into a model instead
    of washing out the way a per-pixel random texture does.
    """
    levels = np.where(np.arange(spec.C) % 2 == 0, 0.95, 0.05)
    return np.broadcast_to(levels, (spec.H, spec.W, spec.C)).astype(float).copy()


def _filler_screen(rng, spec: SyntheticTaskSpec, key_levels):
    """A fresh saturated screen guaranteed to differ from the key."""
    while True:
        levels = rng.choice([0.05, 0.95], size=spec.C)
        if not np.array_equal(levels, key_levels):
            return np.broadcast_to(levels, (spec.H, spec.W, spec.C)).copy()


def _gen_order_pair(spec: SyntheticTaskSpec, count: int):
    """Groups of clips over one shared frame multiset.

    Each group draws T/2 noisy key instances and T/2 fresh filler screens,
    then every class arranges the SAME instances, keys at a placement
    drawn from that class's family (see key_slot_sets), fillers at the
    rest. The label is carried only by where the keys sit; the frames
    themselves are identical across the group's classes.
    """
    rng = np.random.default_rng(spec.seed)
    half = spec.T // 2
    key_base = _key_screen(spec)
    key_levels = key_base[0, 0]
    clips: list[VideoClip] = []
    group = 0
    while len(clips) < count:
        keys = [_noisy(rng, key_base, spec.noise) for _ in range(half)]
        fillers = [
            _noisy(rng, _filler_screen(rng, spec, key_levels), spec.noise)
            for _ in range(half)
        ]
        for label in range(spec.classes):
            if len(clips) == count:
                break
            fam = key_slot_sets(label, spec.T, spec.classes)
            slots = fam[int(rng.integers(len(fam)))]
            rest = [t for t in range(spec.T) if t not in slots]
            frames: list = [None] * spec.T
            for i, t in enumerate(slots):
                frames[t] = keys[i]
            for i, t in enumerate(rest):
                frames[t] = fillers[i]
            clips.append(
                VideoClip(
                    frames=np.stack(frames),
                    label=label,
                    source=f"group{group}.c{label}",
                )
            )
        group += 1
    return clips


def _bar_frames(rng, spec: SyntheticTaskSpec, axis: str):
    """T frames of a bright bar sweeping forward along the given axis."""
    H, W, C, T = spec.H, spec.W, spec.C, spec.T
    span = W if axis == "cols" else H
    bar = max(1, span // 8)
    frames = []
    for t in range(T):
        img = np.full((H, W, C), 0.1)
        pos = ((2 * t + 1) * span) // (2 * T)
        lo = min(pos, span - bar)
        if axis == "cols":
            img[:, lo : lo + bar, :] = 0.9
        else:
            img[lo : lo + bar, :, :] = 0.9
        img += rng.normal(0.0, spec.noise, size=(H, W, C))
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return frames


def _gen_moving_bar(spec: SyntheticTaskSpec, count: int):
    rng = np.random.default_rng(spec.seed)
    clips: list[VideoClip] = []
    group = 0
    while len(clips) < count:
        forward = _bar_frames(rng, spec, "cols")
        pairs = [np.stack(forward), np.stack(forward[::-1])]
        if spec.classes == 4:
            down = _bar_frames(rng, spec, "rows")
            pairs += [np.stack(down), np.stack(down[::-1])]
        for label, frames in enumerate(pairs):
            if len(clips) == count:
                break
            clips.append(
                VideoClip(frames=frames, label=label, source=f"group{group}.c{label}")
            )
        group += 1
    return clips


def gen_synthetic(spec: SyntheticTaskSpec, count: int) -> list[VideoClip]:
    """Deterministic synthetic dataset; same spec and count = same bits.

    Clips are emitted in groups that cycle through the classes; when count
    is a multiple of the class count, every class appears equally often and
    (order-pair) each group's classes share one frame multiset bit-exactly.
    """
    if count < 0:
        raise ConfigError(f"count must be >= 0, got {count}")
    if count == 0:
        return []
    if spec.task == "order-pair":
        return _gen_order_pair(spec, count)
    return _gen_moving_bar(spec, count)


@dataclass
class AugmentTrace:
    flipped: bool
    offsets: list = field(default_factory=list)  # (row0, col0) per frame


def augment(clip: VideoClip, rng, flip_enabled: bool, crop_size: int):
    """Shared-decision augmentation: one flip coin and one crop offset are
    drawn per clip and applied to every frame. Returns (clip, trace)."""
    T, H, W, C = clip.frames.shape
    if crop_size > min(H, W) or crop_size < 1:
        raise ConfigError(
            f"crop_size={crop_size} invalid for frames {H}x{W}"
        )
    flipped = bool(rng.integers(0, 2)) if flip_enabled else False
    r0 = int(rng.integers(0, H - crop_size + 1))
    c0 = int(rng.integers(0, W - crop_size + 1))
    frames = clip.frames
    if flipped:
        frames = frames[:, :, ::-1, :]
    frames = frames[:, r0 : r0 + crop_size, c0 : c0 + crop_size, :]
    trace = AugmentTrace(flipped=flipped, offsets=[(r0, c0)] * T)
    return (
        VideoClip(frames=np.ascontiguousarray(frames), label=clip.label,
                  source=clip.source),
        trace,
    )


# ---------------------------------------------------------------------------
# dataset file format


def dataset_byte_size(count: int, T: int, H: int, W: int, C: int) -> int:
    return 36 + count * (4 + T * H * W * C * 4)


def write_dataset(path, clips: list[VideoClip], num_classes: int | None = None):
    """Write clips to `path` in the pinned little-endian layout."""
    if clips:
        dims = clips[0].frames.shape
        for i, c in enumerate(clips):
            if c.frames.shape != dims:
                raise ConfigError(
                    f"clip {i} has shape {c.frames.shape}, expected {dims}"
                )
    else:
        dims = (0, 0, 0, 0)
    if num_classes is None:
        num_classes = max((c.label for c in clips), default=-1) + 1
    for i, c in enumerate(clips):
        if c.label >= num_classes:
            raise LabelError(
                f"clip {i} label {c.label} outside [0, {num_classes})"
            )
    T_, H, W, C = dims
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(
            struct.pack("<7I", FORMAT_VERSION, len(clips), T_, H, W, C, num_classes)
        )
        for c in clips:
            fh.write(struct.pack("<I", c.label))
            fh.write(np.ascontiguousarray(c.frames, dtype="<f4").tobytes())


def _read_exact(fh, n, offset, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(
            f"truncated file: expected {n} bytes for {what}", offset=offset
        )
    return buf


def read_dataset(path):
    """Read a dataset file; returns (clips, num_classes)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != DATASET_MAGIC:
            raise FormatError(
                f"bad dataset magic {magic!r}", offset=0
            )
        head = _read_exact(fh, 28, 8, "header")
        version, count, T_, H, W, C, num_classes = struct.unpack("<7I", head)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported dataset version {version}", offset=8)
        offset = 36
        frame_bytes = T_ * H * W * C * 4
        clips = []
        for i in range(count):
            (label,) = struct.unpack(
                "<I", _read_exact(fh, 4, offset, f"clip {i} label")
            )
            offset += 4
            raw = _read_exact(fh, frame_bytes, offset, f"clip {i} frames")
            offset += frame_bytes
            frames = np.frombuffer(raw, dtype="<f4").reshape(T_, H, W, C)
            clips.append(
                VideoClip(frames=frames.copy(), label=label, source=f"{path}:{i}")
            )
        if fh.read(1):
            raise FormatError("trailing bytes after last clip", offset=offset)
    return clips, num_classes


# ---------------------------------------------------------------------------
# checkpoint file format


def write_checkpoint(path, config: dict[str, str], tensors: dict[str, np.ndarray]):
    """Write named float64 tensors plus a key=value config blob."""
    blob = "".join(
        f"{k}={config[k]}\n" for k in sorted(config)
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path):
    """Read a checkpoint; returns (config dict, name -> float64 array)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, 8, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=8)
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, 12, "config length"))
        offset = 16
        blob = _read_exact(fh, blob_len, offset, "config blob").decode("utf-8")
        offset += blob_len
        config: dict[str, str] = {}
        for line in blob.splitlines():
            if not line.strip():
                continue
            if "=" not in line:
                raise FormatError(
                    f"malformed config line {line!r}", offset=16
                )
            k, v = line.split("=", 1)
            config[k] = v
        (n_tensors,) = struct.unpack(
            "<I", _read_exact(fh, 4, offset, "tensor count")
        )
        offset += 4
        tensors: dict[str, np.ndarray] = {}
        prev_name = None
        for i in range(n_tensors):
            (name_len,) = struct.unpack(
                "<I", _read_exact(fh, 4, offset, f"tensor {i} name length")
            )
            offset += 4
            name = _read_exact(fh, name_len, offset, f"tensor {i} name").decode(
                "utf-8"
            )
            offset += name_len
            if prev_name is not None and name <= prev_name:
                raise FormatError(
                    f"tensor names out of order: {name!r} after {prev_name!r}",
                    offset=offset,
                )
            prev_name = name
            (rank,) = struct.unpack(
                "<I", _read_exact(fh, 4, offset, f"tensor {name} rank")
            )
            offset += 4
            dims = struct.unpack(
                f"<{rank}I",
                _read_exact(fh, 4 * rank, offset, f"tensor {name} dims"),
            )
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, size * 8, offset, f"tensor {name} data")
            offset += size * 8
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after last tensor", offset=offset)
    return config, tensors
