"""Binary checkpoints.

Layout (little-endian):

    b"SDLS" | u32 version | u32 block count | blocks... | u32 length | config text

Each block is a u32-length-prefixed UTF-8 name followed by a u32 kind.
A network block holds the layer count, (out, in) per layer, the activation
(u32 piece count, slopes, breakpoints as f64), the output head, then every
layer's weights (row-major) and biases as f64. A matrix block holds
u32 rows, u32 cols and the f64 entries.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sdlss.lib.data import PlantedInstance
from sdlss.lib.diffcore import Activation
from sdlss.lib.errors import ConfigError, DimensionError, FormatError, NonFiniteError
from sdlss.lib.models import (
    OUTPUT_HEADS,
    GeneratorModel,
    LayeredNetwork,
    MeasurementOperator,
)

logger = logging.getLogger(__name__)

MAGIC = b"SDLS"
VERSION = 1

KIND_NETWORK = 0
KIND_MATRIX = 1


@dataclass
class Checkpoint:
    generator: GeneratorModel
    sensor: MeasurementOperator | None = None
    latents: np.ndarray | None = None
    config: dict[str, str] = field(default_factory=dict)


class _Writer:
    def __init__(self) -> None:
        self.buffer = bytearray()

    def u32(self, value: int) -> None:
        self.buffer += struct.pack("<I", value)

    def f64s(self, values: np.ndarray | tuple[float, ...]) -> None:
        self.buffer += np.asarray(values, dtype="<f8").tobytes(order="C")

    def text(self, value: str) -> None:
        encoded = value.encode("utf-8")
        self.u32(len(encoded))
        self.buffer += encoded

    def network(self, name: str, network: LayeredNetwork) -> None:
        self.text(name)
        self.u32(KIND_NETWORK)
        self.u32(network.depth)
        for w in network.weights:
            self.u32(w.shape[0])
            self.u32(w.shape[1])
        self.u32(network.activation.pieces)
        self.f64s(network.activation.slopes)
        self.f64s(network.activation.breakpoints)
        self.u32(OUTPUT_HEADS.index(network.output_head))
        for w, b in zip(network.weights, network.biases):
            self.f64s(w)
            self.f64s(b)

    def matrix(self, name: str, matrix: np.ndarray) -> None:
        self.text(name)
        self.u32(KIND_MATRIX)
        self.u32(matrix.shape[0])
        self.u32(matrix.shape[1])
        self.f64s(matrix)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(
                f"checkpoint truncated: needed {size} bytes, {len(self.data) - self.offset} left",
                self.offset,
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def text(self) -> str:
        start = self.offset
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid UTF-8 text: {e}", start) from e

    def network(self) -> LayeredNetwork:
        start = self.offset
        depth = self.u32()
        shapes = [(self.u32(), self.u32()) for _ in range(depth)]
        pieces = self.u32()
        if pieces < 1:
            raise FormatError("activation needs at least one piece", self.offset)
        slopes = tuple(self.f64s(pieces).tolist())
        breakpoints = tuple(self.f64s(pieces - 1).tolist())
        head_offset = self.offset
        head = self.u32()
        if head >= len(OUTPUT_HEADS):
            raise FormatError(f"unknown output head {head}", head_offset)
        weights, biases = [], []
        for rows, cols in shapes:
            weights.append(self.f64s(rows * cols).reshape(rows, cols))
            biases.append(self.f64s(rows))
        try:
            return LayeredNetwork(
                weights=tuple(weights),
                biases=tuple(biases),
                activation=Activation(slopes=slopes, breakpoints=breakpoints),
                output_head=OUTPUT_HEADS[head],
            )
        except (ConfigError, DimensionError, NonFiniteError) as e:
            raise FormatError(f"invalid network block: {e}", start) from e

    def matrix(self) -> np.ndarray:
        rows, cols = self.u32(), self.u32()
        return self.f64s(rows * cols).reshape(rows, cols)


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    writer = _Writer()
    writer.buffer += MAGIC
    writer.u32(VERSION)
    blocks = 1 + (checkpoint.sensor is not None) + (checkpoint.latents is not None)
    writer.u32(blocks)
    writer.network("generator", checkpoint.generator)
    if checkpoint.sensor is not None:
        if checkpoint.sensor.network is not None:
            writer.network("sensor", checkpoint.sensor.network)
        else:
            assert checkpoint.sensor.matrix is not None
            writer.matrix("sensor", checkpoint.sensor.matrix)
    if checkpoint.latents is not None:
        writer.matrix("latents", np.atleast_2d(checkpoint.latents))
    writer.text("".join(f"{k}={v}\n" for k, v in sorted(checkpoint.config.items())))
    path.write_bytes(bytes(writer.buffer))
    logger.info(f"Wrote checkpoint {path} ({len(writer.buffer)} bytes)")


def load_checkpoint(path: Path) -> Checkpoint:
    reader = _Reader(path.read_bytes())
    magic = reader.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic: expected {MAGIC!r}, found {magic!r}", 0)
    version = reader.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)

    generator: GeneratorModel | None = None
    sensor: MeasurementOperator | None = None
    latents: np.ndarray | None = None
    for _ in range(reader.u32()):
        name = reader.text()
        kind_offset = reader.offset
        kind = reader.u32()
        if kind == KIND_NETWORK:
            network = reader.network()
            if name == "generator":
                generator = GeneratorModel(
                    weights=network.weights,
                    biases=network.biases,
                    activation=network.activation,
                    output_head=network.output_head,
                )
            else:
                sensor = MeasurementOperator.from_network(network)
        elif kind == KIND_MATRIX:
            matrix = reader.matrix()
            if name == "latents":
                latents = matrix
            else:
                sensor = MeasurementOperator.linear(matrix)
        else:
            raise FormatError(f"unknown block kind {kind} for {name!r}", kind_offset)

    config: dict[str, str] = {}
    for line in reader.text().splitlines():
        key, _, value = line.partition("=")
        config[key] = value

    if generator is None:
        raise FormatError("checkpoint has no generator block", reader.offset)
    return Checkpoint(generator=generator, sensor=sensor, latents=latents, config=config)


def trained_sparsity(checkpoint: Checkpoint) -> int:
    value = checkpoint.config.get("s")
    return int(value) if value else checkpoint.generator.latent_dim


def image_shape(checkpoint: Checkpoint) -> tuple[int, ...] | None:
    value = checkpoint.config.get("image_shape")
    return tuple(int(d) for d in value.split(",")) if value else None


def require_sensor(checkpoint: Checkpoint, path: Path) -> MeasurementOperator:
    if checkpoint.sensor is None:
        raise FormatError(f"{path} holds no sensing operator")
    if checkpoint.sensor.n != checkpoint.generator.signal_dim:
        raise FormatError(
            f"{path}: sensor takes {checkpoint.sensor.n} inputs, "
            f"generator emits {checkpoint.generator.signal_dim}"
        )
    return checkpoint.sensor


def save_planted(path: Path, planted: PlantedInstance) -> None:
    """Planted instances share the checkpoint format: generator, latents and s_true."""
    save_checkpoint(
        path,
        Checkpoint(
            generator=planted.generator,
            latents=planted.latents,
            config={"kind": "planted", "s_true": str(planted.s_true)},
        ),
    )


def load_planted(path: Path) -> PlantedInstance:
    checkpoint = load_checkpoint(path)
    latents = checkpoint.latents
    if latents is None:
        raise FormatError(f"{path} holds no planted latents")
    generator = checkpoint.generator
    if latents.shape[1] != generator.latent_dim:
        raise FormatError(
            f"{path}: latents have {latents.shape[1]} entries, "
            f"generator takes {generator.latent_dim}"
        )
    value = checkpoint.config.get("s_true", "")
    try:
        s_true = int(value) if value else int(np.max(np.count_nonzero(latents, axis=1)))
    except ValueError as e:
        raise FormatError(f"{path}: bad s_true {value!r}") from e
    return PlantedInstance(
        generator=generator,
        latents=latents,
        signals=generator.forward(latents),
        s_true=s_true,
    )
