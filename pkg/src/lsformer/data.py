"""Input pipelines: static replication, event binning, synthetic sets, container files."""

from __future__ import annotations

import gzip
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ConfigError


class DatasetFormatError(ValueError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


# ---------------------------------------------------------------------------
# PRNG
# ---------------------------------------------------------------------------


class XorShift64Star:
    """xorshift64* (Vigna 2016): shifts 12/25/27, multiplier 0x2545F4914F6CDD1D.

    The state is seeded through one splitmix64 step so that seed 0 is valid.
    Output is identical on every platform.
    """

    MASK = (1 << 64) - 1
    MULT = 0x2545F4914F6CDD1D

    def __init__(self, seed: int):
        z = (seed + 0x9E3779B97F4A7C15) & self.MASK
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
        z ^= z >> 31
        self.state = z or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & self.MASK
        x ^= x >> 27
        self.state = x
        return (x * self.MULT) & self.MASK

    def uniform(self) -> float:
        """Float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + (self.next_u64() >> 11) % (hi - lo + 1)


# ---------------------------------------------------------------------------
# static / event inputs
# ---------------------------------------------------------------------------


def replicate_static(image: np.ndarray, timesteps: int) -> np.ndarray:
    """[C,H,W] (or [B,C,H,W]) -> the same array repeated along a new leading time axis."""
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    image = np.asarray(image)
    return np.broadcast_to(image, (timesteps, *image.shape)).copy()


@dataclass
class EventStream:
    t_us: np.ndarray
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.t_us = np.asarray(self.t_us, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.polarity = np.asarray(self.polarity, dtype=np.int64)
        n = len(self.t_us)
        if not (len(self.x) == len(self.y) == len(self.polarity) == n):
            raise DatasetFormatError("event fields have different lengths")
        if n and (self.x.min() < 0 or self.x.max() >= self.width or self.y.min() < 0 or self.y.max() >= self.height):
            raise DatasetFormatError(f"event coordinates outside the {self.height}x{self.width} sensor")
        if n and not np.isin(self.polarity, (0, 1)).all():
            raise DatasetFormatError("polarity must be 0 or 1")
        order = np.argsort(self.t_us, kind="stable")
        if n and np.any(np.diff(self.t_us) < 0):
            self.t_us, self.x, self.y, self.polarity = (a[order] for a in (self.t_us, self.x, self.y, self.polarity))

    def __len__(self) -> int:
        return len(self.t_us)


def bin_events(stream: EventStream, timesteps: int, mode: str = "count", split: str = "time") -> np.ndarray:
    """Accumulate events into [T, 2, H, W] frames (channel = polarity).

    ``split="time"`` cuts the stream's time span into T equal durations;
    ``split="count"`` gives each bin an equal share of events. ``mode`` is
    ``"count"`` (event counts) or ``"binary"`` (clamped to {0, 1}).
    """
    if len(stream) == 0:
        raise DatasetFormatError("cannot bin an empty event stream")
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    if mode not in ("count", "binary"):
        raise ConfigError(f"mode must be 'count' or 'binary', got {mode!r}")
    n = len(stream)
    if split == "time":
        t0 = stream.t_us[0]
        span = stream.t_us[-1] - t0 + 1
        bins = ((stream.t_us - t0) * timesteps) // span
    elif split == "count":
        bins = (np.arange(n) * timesteps) // n
    else:
        raise ConfigError(f"split must be 'time' or 'count', got {split!r}")
    frames = np.zeros((timesteps, 2, stream.height, stream.width), dtype=np.float32)
    np.add.at(frames, (bins, stream.polarity, stream.y, stream.x), 1.0)
    if mode == "binary":
        np.minimum(frames, 1.0, out=frames)
    return frames


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _draw_bar(img: np.ndarray, rng: XorShift64Star, angle: float) -> None:
    size = img.shape[0]
    length = rng.randint(size // 2, size - 2)
    thick = rng.randint(1, 2)
    margin = length // 2 + 1
    cy = rng.randint(min(margin, size // 2), max(size - 1 - margin, size // 2))
    cx = rng.randint(min(margin, size // 2), max(size - 1 - margin, size // 2))
    dy, dx = math.sin(angle), math.cos(angle)
    ny, nx = dx, -dy
    for i in range(length):
        s = i - (length - 1) / 2
        for j in range(thick):
            # round half up; round() goes to even and would merge pixels of even-length bars
            py = math.floor(cy + s * dy + j * ny + 0.5)
            px = math.floor(cx + s * dx + j * nx + 0.5)
            if 0 <= py < size and 0 <= px < size:
                img[py, px] = 1


def _draw_blobs(img: np.ndarray, rng: XorShift64Star, radius: float) -> None:
    size = img.shape[0]
    count = rng.randint(1, 2)
    yy, xx = np.mgrid[0:size, 0:size]
    r = int(math.ceil(radius))
    for _ in range(count):
        cy = rng.randint(r, max(size - 1 - r, r))
        cx = rng.randint(r, max(size - 1 - r, r))
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius] = 1


@dataclass
class DatasetContainer:
    samples: np.ndarray  # [n, *sample_shape]
    labels: np.ndarray  # [n]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise DatasetFormatError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.samples.ndim not in (4, 5):
            raise DatasetFormatError(f"samples must be [n,C,H,W] or [n,T,C,H,W], got {self.samples.shape}")
        k = self.num_classes
        if k is not None and len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            raise DatasetFormatError(f"labels outside 0..{k - 1}")

    @property
    def num_classes(self) -> int | None:
        v = self.metadata.get("num_classes")
        return int(v) if v is not None else None

    @property
    def sample_shape(self) -> tuple:
        return self.samples.shape[1:]

    def __len__(self) -> int:
        return len(self.labels)

    def is_binary(self) -> bool:
        return bool(np.all((self.samples == 0) | (self.samples == 1)))

    def split(self, n_first: int) -> tuple["DatasetContainer", "DatasetContainer"]:
        a = DatasetContainer(self.samples[:n_first], self.labels[:n_first], dict(self.metadata))
        b = DatasetContainer(self.samples[n_first:], self.labels[n_first:], dict(self.metadata))
        return a, b


def synth_dataset(kind: str, n_per_class: int, classes: int, size: int, seed: int) -> DatasetContainer:
    """Binary 1-channel images whose class is a bar orientation or a blob scale.

    ``oriented-bars``: class c is a bar at angle c*pi/classes (class 0
    horizontal). ``multi-scale-blobs``: class c draws discs of radius
    growing with c. Samples are interleaved by class.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if size < 8:
        raise ConfigError(f"size must be >= 8, got {size}")
    if kind not in ("oriented-bars", "multi-scale-blobs"):
        raise ConfigError(f"unknown dataset kind {kind!r}")
    rng = XorShift64Star(seed)
    n = n_per_class * classes
    samples = np.zeros((n, 1, size, size), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    max_radius = size / 4
    for i in range(n):
        c = i % classes
        img = samples[i, 0]
        if kind == "oriented-bars":
            _draw_bar(img, rng, c * math.pi / classes)
        else:
            _draw_blobs(img, rng, 1.0 + (max_radius - 1.0) * c / (classes - 1))
        labels[i] = c
    meta = {"kind": kind, "num_classes": str(classes), "seed": str(seed), "size": str(size)}
    return DatasetContainer(samples, labels, meta)


# ---------------------------------------------------------------------------
# container file format
# ---------------------------------------------------------------------------

DS_MAGIC = b"LSDS"
DS_VERSION = 1
DTYPE_F32 = 0
DTYPE_U8_BINARY = 1


def encode_container(data: DatasetContainer) -> bytes:
    binary = data.is_binary()
    buf = io.BytesIO()
    buf.write(DS_MAGIC)
    buf.write(struct.pack("<II", DS_VERSION, len(data)))
    shape = data.sample_shape
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))
    buf.write(struct.pack("<B", DTYPE_U8_BINARY if binary else DTYPE_F32))
    meta = "".join(f"{k}={data.metadata[k]}\n" for k in sorted(data.metadata)).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for x, y in zip(data.samples, data.labels):
        buf.write(x.astype(np.uint8).tobytes() if binary else x.astype("<f4").tobytes())
        buf.write(struct.pack("<I", int(y)))
    return buf.getvalue()


def decode_container(blob: bytes) -> DatasetContainer:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFileError(f"truncated dataset: {what} needs {n} bytes at offset {pos}, file has {len(blob)}")
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != DS_MAGIC:
        raise DatasetFormatError("not a dataset container: bad magic bytes")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != DS_VERSION:
        raise DatasetFormatError(f"unsupported container version {version}")
    (rank,) = struct.unpack("<B", take(1, "rank"))
    if rank not in (3, 4):
        raise DatasetFormatError(f"sample rank must be 3 or 4, got {rank}")
    shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
    (tag,) = struct.unpack("<B", take(1, "dtype tag"))
    if tag not in (DTYPE_F32, DTYPE_U8_BINARY):
        raise DatasetFormatError(f"unknown dtype tag {tag}")
    (mlen,) = struct.unpack("<I", take(4, "metadata length"))
    try:
        meta_text = take(mlen, "metadata").decode("utf-8")
    except UnicodeDecodeError:
        raise DatasetFormatError("metadata is not valid UTF-8") from None
    meta = dict(line.split("=", 1) for line in meta_text.splitlines() if "=" in line)
    per = int(np.prod(shape))
    item = per * (1 if tag == DTYPE_U8_BINARY else 4)
    samples = np.zeros((count, *shape), dtype=np.float32)
    labels = np.zeros(count, dtype=np.int64)
    k = int(meta["num_classes"]) if "num_classes" in meta else None
    for i in range(count):
        raw = take(item, f"sample {i}")
        if tag == DTYPE_U8_BINARY:
            samples[i] = np.frombuffer(raw, dtype=np.uint8).reshape(shape)
        else:
            samples[i] = np.frombuffer(raw, dtype="<f4").reshape(shape)
        (labels[i],) = struct.unpack("<I", take(4, f"label {i}"))
        if k is not None and labels[i] >= k:
            raise DatasetFormatError(f"label {labels[i]} of sample {i} overflows num_classes={k}")
    if pos != len(blob):
        raise DatasetFormatError(f"{len(blob) - pos} trailing bytes after the last sample")
    return DatasetContainer(samples, labels, meta)


def save_container(data: DatasetContainer, path) -> None:
    Path(path).write_bytes(encode_container(data))


def load_container(path) -> DatasetContainer:
    return decode_container(Path(path).read_bytes())


def read_idx(path) -> np.ndarray:
    """Read an IDX array file (optionally gzip-compressed), e.g. MNIST-style images/labels."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DatasetFormatError("not an IDX file")
    codes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    if raw[2] not in codes:
        raise DatasetFormatError(f"unknown IDX type code {raw[2]:#x}")
    dtype = np.dtype(codes[raw[2]])
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    need = 4 + 4 * ndim + int(np.prod(dims)) * dtype.itemsize
    if len(raw) < need:
        raise TruncatedFileError(f"IDX payload truncated: need {need} bytes, have {len(raw)}")
    return np.frombuffer(raw[4 + 4 * ndim : need], dtype=dtype).reshape(dims)


def idx_to_container(images_path, labels_path, num_classes: int, binarize: float | None = None) -> DatasetContainer:
    """Convert an IDX image/label pair to a container with a channel axis (values scaled to [0, 1])."""
    images = read_idx(images_path).astype(np.float32)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim == 3:
        images = images[:, None]
    if images.max() > 1:
        images = images / 255.0
    if binarize is not None:
        images = (images >= binarize).astype(np.float32)
    return DatasetContainer(images, labels, {"num_classes": str(num_classes), "source": "idx"})


def batches(data: DatasetContainer, batch_size: int, timesteps: int, shuffle_rng: np.random.Generator | None = None):
    """Yield (time-major inputs [T,B,C,H,W], labels) batches."""
    order = np.arange(len(data)) if shuffle_rng is None else shuffle_rng.permutation(len(data))
    for start in range(0, len(data), batch_size):
        idx = order[start : start + batch_size]
        x = data.samples[idx]
        if x.ndim == 4:
            x = replicate_static(x, timesteps)
        else:
            x = np.swapaxes(x, 0, 1)
            if x.shape[0] != timesteps:
                raise ConfigError(f"event samples carry {x.shape[0]} frames, model expects T={timesteps}")
        yield x, data.labels[idx]
