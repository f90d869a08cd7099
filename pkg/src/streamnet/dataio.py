"""Dataset ingestion: CIFAR-10 binary batches, the SNDT raw container,
directories of PPM files, and a synthetic band-structured set.

Loaders always return 8-bit images; normalization happens once, in the
training/evaluation pipeline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .imaging import make_bands
from .ppm import read_ppm

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
CIFAR10_RECORD = 1 + 3 * 32 * 32
CIFAR10_PER_BATCH = 10000
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"

SNDT_MAGIC = b"SNDT"
SNDT_VERSION = 1


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    label: int
    id: int


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    class_names: tuple[str, ...]
    image_shape: tuple[int, int, int]
    train_count: int
    test_count: int
    source_format: str

    def __post_init__(self):
        if self.train_count <= 0 or self.test_count <= 0:
            raise ConfigError("dataset split counts must be positive")
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigError("class names must be unique")


@dataclass
class Dataset:
    """A block of same-shaped 8-bit images with labels and stable ids.

    ``corrupted`` marks data that went through zero-noise; the training loop
    refuses such data.
    """

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    class_names: tuple[str, ...]
    name: str = ""
    corrupted: bool = False

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.images.ndim != 4:
            raise FormatError(f"images must be (N,C,H,W), got shape {self.images.shape}")
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise FormatError("images, labels and ids disagree in length")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise FormatError(f"label outside [0, {len(self.class_names)})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), int(self.ids[i]))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return replace(self, images=self.images[index], labels=self.labels[index], ids=self.ids[index])

    def head(self, n: int | None) -> "Dataset":
        return self if n is None or n >= len(self) else self.subset(np.arange(n))


# CIFAR-10 ------------------------------------------------------------------

def decode_cifar10_batch(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Records of 1 label byte + 3072 pixel bytes (R, G, B planes, row-major)."""
    if len(buf) % CIFAR10_RECORD:
        raise FormatError(f"CIFAR-10 batch size {len(buf)} is not a multiple of {CIFAR10_RECORD}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"CIFAR-10 record {bad} has label byte {labels[bad]} > 9")
    return raw[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def encode_cifar10_batch(images, labels) -> bytes:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    return np.concatenate([labels, images], axis=1).tobytes()


def _read_cifar_file(path: Path, records: int) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
    size = path.stat().st_size
    if size != records * CIFAR10_RECORD:
        raise FormatError(f"{path.name}: expected {records * CIFAR10_RECORD} bytes, found {size}")
    return decode_cifar10_batch(path.read_bytes())


def load_cifar10(directory, records_per_batch: int = CIFAR10_PER_BATCH) -> tuple[Dataset, Dataset]:
    """Train (5 batches) and test splits from the binary distribution directory.

    Train ids are ``0..`` in file order; test ids continue after the last
    train id, so the two splits never share an id.
    """
    directory = Path(directory)
    parts = [_read_cifar_file(directory / name, records_per_batch) for name in CIFAR10_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = _read_cifar_file(directory / CIFAR10_TEST_FILE, records_per_batch)
    n = len(train_y)
    train = Dataset(train_x, train_y, np.arange(n), CIFAR10_CLASSES, "cifar10")
    test = Dataset(test_x, test_y, np.arange(n, n + len(test_y)), CIFAR10_CLASSES, "cifar10")
    return train, test


# SNDT raw container --------------------------------------------------------

def encode_raw_container(dataset: Dataset) -> bytes:
    """``SNDT`` | u16 version | u32 count | u16 C,H,W | u16 classes |
    (u16 len + utf-8 name)* | (u16 label + C*H*W bytes)*, little-endian."""
    if dataset.images.dtype != np.uint8:
        raise FormatError("container payload must be 8-bit")
    c, h, w = dataset.image_shape
    out = [SNDT_MAGIC, struct.pack("<HIHHHH", SNDT_VERSION, len(dataset), c, h, w, dataset.n_classes)]
    for name in dataset.class_names:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
    record = np.empty((len(dataset), 2 + c * h * w), dtype=np.uint8)
    record[:, :2] = dataset.labels.astype("<u2").view(np.uint8).reshape(-1, 2)
    record[:, 2:] = dataset.images.reshape(len(dataset), c * h * w)
    out.append(record.tobytes())
    return b"".join(out)


def decode_raw_container(buf: bytes, name: str = "") -> Dataset:
    if buf[:4] != SNDT_MAGIC:
        raise FormatError(f"bad container magic {buf[:4]!r} (expected {SNDT_MAGIC!r})")
    if len(buf) < 18:
        raise FormatError("container header truncated")
    version, count, c, h, w, n_classes = struct.unpack_from("<HIHHHH", buf, 4)
    if version != SNDT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos = 18
    names = []
    for _ in range(n_classes):
        if pos + 2 > len(buf):
            raise FormatError("container truncated in class-name table")
        (length,) = struct.unpack_from("<H", buf, pos)
        names.append(buf[pos + 2:pos + 2 + length].decode("utf-8"))
        pos += 2 + length
    record = 2 + c * h * w
    payload = len(buf) - pos
    if payload != count * record:
        raise FormatError(
            f"container declares {count} samples ({count * record} bytes) but payload has {payload} bytes"
        )
    raw = np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(count, record)
    labels = raw[:, :2].copy().view("<u2").reshape(count).astype(np.int64)
    images = raw[:, 2:].reshape(count, c, h, w).copy()
    return Dataset(images, labels, np.arange(count), tuple(names), name)


def write_raw_container(path, dataset: Dataset) -> None:
    Path(path).write_bytes(encode_raw_container(dataset))


def load_raw_container(path) -> Dataset:
    path = Path(path)
    return decode_raw_container(path.read_bytes(), path.stem)


def load_ppm_directory(root) -> Dataset:
    """One sub-directory per class (sorted by name), ``*.ppm`` files inside."""
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise FormatError(f"{root} has no class sub-directories")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        for f in sorted(d.glob("*.ppm")):
            images.append(read_ppm(f))
            labels.append(label)
    if not images:
        raise FormatError(f"no .ppm files under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"images under {root} have mixed shapes {sorted(shapes)}")
    return Dataset(np.stack(images), np.array(labels), np.arange(len(images)),
                   tuple(d.name for d in class_dirs), root.name)


# splitting and batching --------------------------------------------------------

def stratified_split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per-class shuffled split; ``round(test_fraction * class size)`` go to test."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for k in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == k)
        rng.shuffle(idx)
        n_test = int(round(test_fraction * len(idx)))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return (dataset.subset(np.sort(np.concatenate(train_idx))),
            dataset.subset(np.sort(np.concatenate(test_idx))))


def shuffle_and_batch(dataset: Dataset, batch_size: int, seed: int) -> list[Dataset]:
    """Seeded permutation cut into batches; the final short batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return [dataset.subset(order[i:i + batch_size]) for i in range(0, len(dataset), batch_size)]


# synthetic -------------------------------------------------------------------

def _band_byte_range(band) -> tuple[int, int]:
    levels = [b for b in range(256) if band.lo <= b / 255.0 < band.hi]
    return levels[0], levels[-1]


def synth_dataset(
    n_classes: int,
    per_class: int,
    side: int,
    seed: int = 0,
    channels: int = 3,
    test_per_class: int | None = None,
) -> tuple[Dataset, Dataset]:
    """Images whose pixels concentrate in intensity band ``k`` of ``make_bands(n_classes)``.

    Each image has its own base level drawn from the middle half of its
    class band, plus per-pixel Gaussian jitter (sigma = band width / 8),
    clipped to 0..255.
    """
    if side % 32:
        raise ConfigError(f"synthetic side {side} must be divisible by 32")
    if n_classes < 1:
        raise ConfigError("n_classes must be >= 1")
    bands = make_bands(n_classes)
    ranges = [_band_byte_range(b) if any(b.lo <= v / 255.0 < b.hi for v in range(256)) else None
              for b in bands]
    if any(r is None or r[1] - r[0] < 3 for r in ranges):
        raise ConfigError(f"{n_classes} classes leave too few 8-bit levels per intensity band")
    test_per_class = per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)

    def draw(count: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.repeat(np.arange(n_classes), count)
        lo = np.array([ranges[k][0] for k in labels], dtype=np.float64)
        hi = np.array([ranges[k][1] for k in labels], dtype=np.float64)
        width = hi - lo + 1
        base = lo + width * rng.uniform(0.25, 0.75, size=len(labels))
        jitter = rng.normal(0.0, 1.0, size=(len(labels), channels, side, side)) * (width / 8)[:, None, None, None]
        images = np.clip(np.rint(base[:, None, None, None] + jitter), 0, 255).astype(np.uint8)
        return images, labels

    names = tuple(f"band{k}" for k in range(n_classes))
    train_x, train_y = draw(per_class)
    test_x, test_y = draw(test_per_class)
    n = len(train_y)
    return (Dataset(train_x, train_y, np.arange(n), names, "synth"),
            Dataset(test_x, test_y, np.arange(n, n + len(test_y)), names, "synth"))
