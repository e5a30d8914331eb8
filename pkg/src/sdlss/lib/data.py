"""Datasets: Fashion-MNIST IDX files, pre-converted raw tensors and planted instances."""

import gzip
import logging
import math
import os
import struct
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sdlss.lib.errors import ConfigError, FormatError
from sdlss.lib.models import GeneratorModel, build_generator

logger = logging.getLogger(__name__)

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

FASHION_MNIST_FILES = {
    "train": "train-images-idx3-ubyte.gz",
    "test": "t10k-images-idx3-ubyte.gz",
}
DATA_DIR_ENV = "SDLSS_DATA_DIR"

GRID_SEPARATOR = 2


@dataclass
class ImageDataset:
    images: np.ndarray
    shape: tuple[int, ...]
    split: str = "train"

    def __post_init__(self) -> None:
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 2 or images.shape[1] != math.prod(self.shape):
            raise FormatError(
                f"{images.shape} does not hold flattened images of shape {self.shape}"
            )
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise FormatError("pixels must lie in [0, 1]")
        self.images = images

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def n(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.shape[2] if len(self.shape) == 3 else 1

    def subset(self, count: int | None) -> "ImageDataset":
        if count is None or count >= len(self):
            return self
        return ImageDataset(self.images[:count], self.shape, self.split)


@dataclass
class PlantedInstance:
    generator: GeneratorModel
    latents: np.ndarray
    signals: np.ndarray
    s_true: int

    @property
    def k(self) -> int:
        return self.generator.latent_dim

    @property
    def n(self) -> int:
        return self.generator.signal_dim

    def __len__(self) -> int:
        return self.latents.shape[0]


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise FormatError(f"{path}: broken gzip stream: {e}", 0) from e
    return raw


def read_idx(path: Path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (gzip or raw) into an array of its dims."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(
            f"{path}: expected magic 0x{expected_magic:08x}, found 0x{magic:08x}", 0
        )
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: unsupported IDX type in magic 0x{magic:08x}", 0)

    ndims = magic & 0xFF
    header = 4 + 4 * ndims
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX header", len(data))
    dims = struct.unpack(f">{ndims}I", data[4:header])
    expected = header + math.prod(dims)
    if len(data) < expected:
        raise FormatError(
            f"{path}: truncated IDX payload, {expected - len(data)} bytes missing",
            len(data),
        )
    return np.frombuffer(data, dtype=np.uint8, count=math.prod(dims), offset=header).reshape(
        dims
    )


def load_idx(path: Path, expected_magic: int = IDX_IMAGES, split: str = "train") -> ImageDataset:
    raw = read_idx(path, expected_magic)
    if raw.ndim != 3:
        raise FormatError(f"{path}: image files have 3 dims, found {raw.ndim}", 0)
    count, rows, cols = raw.shape
    logger.info(f"Loaded {count} images of {rows}×{cols} from {path}")
    return ImageDataset(
        images=raw.reshape(count, rows * cols) / 255.0, shape=(rows, cols), split=split
    )


def data_root(path: str | Path | None = None) -> Path:
    if path:
        return Path(path)
    env = os.getenv(DATA_DIR_ENV)
    if not env:
        raise ConfigError(f"no dataset path given and {DATA_DIR_ENV} is not set")
    return Path(env)


def load_fashion_mnist(root: str | Path | None = None, split: str = "train") -> ImageDataset:
    if split not in FASHION_MNIST_FILES:
        raise ConfigError(f"unknown split {split!r}")
    path = data_root(root)
    if path.is_dir():
        path = path / FASHION_MNIST_FILES[split]
    if not path.exists():
        raise ConfigError(f"dataset file {path} does not exist")
    return load_idx(path, IDX_IMAGES, split)


def load_raw_tensor(path: Path, split: str = "train") -> ImageDataset:
    """Load N×rows×cols or N×rows×cols×3 images saved with numpy (u8 or [0, 1] floats)."""
    if not path.exists():
        raise ConfigError(f"dataset file {path} does not exist")
    try:
        array = np.load(path, allow_pickle=False)
    except ValueError as e:
        raise FormatError(f"{path}: not a numpy tensor: {e}") from e
    if array.ndim not in (3, 4) or (array.ndim == 4 and array.shape[3] not in (1, 3)):
        raise FormatError(f"{path}: unsupported tensor shape {array.shape}")
    images = array / 255.0 if array.dtype == np.uint8 else array.astype(np.float64)
    shape = tuple(int(d) for d in images.shape[1:])
    if len(shape) == 3 and shape[2] == 1:
        shape = shape[:2]
    logger.info(f"Loaded {images.shape[0]} images of {shape} from {path}")
    return ImageDataset(images=images.reshape(images.shape[0], -1), shape=shape, split=split)


def load_dataset(
    kind: str, path: str | Path | None = None, split: str = "train"
) -> ImageDataset:
    if kind == "fashion-mnist":
        return load_fashion_mnist(path, split)
    if kind == "raw":
        return load_raw_tensor(data_root(path), split)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def sparse_latents(
    count: int, k: int, s: int, rng: np.random.Generator
) -> np.ndarray:
    """Rows with supports uniform over all s-subsets and N(0, 1) values on them."""
    if not 0 <= s <= k:
        raise ConfigError(f"sparsity must lie in [0, {k}], got {s}")
    latents = np.zeros((count, k))
    for row in latents:
        support = rng.choice(k, size=s, replace=False)
        row[support] = rng.standard_normal(s)
    return latents


def make_planted(
    k: int,
    s_true: int,
    n: int,
    count: int,
    seed: int,
    hidden: tuple[int, ...] = (32,),
) -> PlantedInstance:
    generator = build_generator([k, *hidden, n], seed)
    latents = sparse_latents(count, k, s_true, np.random.default_rng([seed, 1]))
    return PlantedInstance(
        generator=generator,
        latents=latents,
        signals=generator.forward(latents),
        s_true=s_true,
    )


def iterate_batches(
    count: int, batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[np.ndarray]:
    """Index batches in a shuffled order (or in order without `rng`)."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    order = rng.permutation(count) if rng is not None else np.arange(count)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]


def grid_geometry(count: int, rows: int, cols: int) -> tuple[int, int, int, int]:
    grid_cols = math.ceil(math.sqrt(count))
    grid_rows = math.ceil(count / grid_cols)
    height = grid_rows * rows + (grid_rows - 1) * GRID_SEPARATOR
    width = grid_cols * cols + (grid_cols - 1) * GRID_SEPARATOR
    return grid_rows, grid_cols, height, width


def grid_suffix(shape: tuple[int, ...]) -> str:
    return ".ppm" if len(shape) == 3 and shape[2] == 3 else ".pgm"


def write_image_grid(images: np.ndarray, shape: tuple[int, ...], path: Path) -> None:
    """Tile flattened images into one PGM (grayscale) or PPM (3 channels) file."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    rows, cols = shape[:2]
    channels = shape[2] if len(shape) == 3 else 1
    if channels not in (1, 3):
        raise ConfigError(f"cannot write {channels}-channel images")
    grid_rows, grid_cols, height, width = grid_geometry(len(images), rows, cols)

    canvas = np.full((height, width, channels), 255, dtype=np.uint8)
    pixels = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    for i, image in enumerate(pixels):
        top = (i // grid_cols) * (rows + GRID_SEPARATOR)
        left = (i % grid_cols) * (cols + GRID_SEPARATOR)
        canvas[top : top + rows, left : left + cols] = image.reshape(rows, cols, channels)

    magic = b"P5" if channels == 1 else b"P6"
    try:
        path.write_bytes(magic + f"\n{width} {height}\n255\n".encode() + canvas.tobytes())
    except OSError as e:
        raise ConfigError(f"cannot write image grid {path}: {e}") from e
    logger.info(f"Wrote {len(images)} images to {path} ({grid_rows}×{grid_cols} grid)")


def read_pnm(path: Path) -> np.ndarray:
    """Read a binary PGM/PPM written by `write_image_grid` back as [0, 1] floats."""
    data = path.read_bytes()
    fields: list[bytes] = []
    offset = 0
    while len(fields) < 4:
        while offset < len(data) and data[offset : offset + 1].isspace():
            offset += 1
        end = offset
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        if end == offset:
            raise FormatError(f"{path}: truncated PNM header", offset)
        fields.append(data[offset:end])
        offset = end
    magic, width, height, _ = fields
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: expected P5 or P6, found {magic!r}", 0)
    channels = 1 if magic == b"P5" else 3
    shape = (int(height), int(width), channels)
    payload = data[offset + 1 :]
    if len(payload) < math.prod(shape):
        raise FormatError(f"{path}: truncated PNM payload", len(data))
    image = np.frombuffer(payload, dtype=np.uint8, count=math.prod(shape)).reshape(shape)
    return (image[..., 0] if channels == 1 else image) / 255.0
