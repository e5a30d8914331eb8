"""Generator G_θ and measurement operators (fixed Gaussian A or learned A_φ)."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from sdlss.lib import diffcore as dc
from sdlss.lib.diffcore import Activation, Node, Tape
from sdlss.lib.errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

OUTPUT_HEADS = ("raw", "sigmoid")
SENSING_KINDS = ("linear", "network")

Value = Node | np.ndarray


@dataclass(frozen=True, eq=False)
class LayeredNetwork:
    """Affine layers joined by a piecewise-linear activation; the last layer is linear."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: Activation = field(default_factory=Activation)
    output_head: str = "raw"

    def __post_init__(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise ConfigError("a network needs at least one layer and one bias per layer")
        if self.output_head not in OUTPUT_HEADS:
            raise ConfigError(f"unknown output head {self.output_head!r}")
        weights = tuple(dc.as_tensor(w) for w in self.weights)
        biases = tuple(dc.as_tensor(b) for b in self.biases)
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape}")
            if i and w.shape[1] != weights[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i} takes {w.shape[1]} inputs but layer {i - 1} "
                    f"produces {weights[i - 1].shape[0]}"
                )
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def width(self) -> int:
        return max(self.layer_dims)

    @property
    def pieces(self) -> int:
        return self.activation.pieces

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def with_parameters(self, parameters: Sequence[np.ndarray]) -> "LayeredNetwork":
        if len(parameters) != 2 * self.depth:
            raise DimensionError(
                f"expected {2 * self.depth} parameter arrays, got {len(parameters)}"
            )
        return type(self)(
            weights=tuple(parameters[0::2]),
            biases=tuple(parameters[1::2]),
            activation=self.activation,
            output_head=self.output_head,
        )

    def forward(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=dc.DTYPE)
        if v.ndim not in (1, 2) or v.shape[-1] != self.input_dim:
            raise DimensionError(
                f"network takes {self.input_dim} inputs, got shape {v.shape}"
            )
        out, _ = BoundNetwork(self).forward(v)
        return dc.value_of(out)

    def activation_patterns(self, v: np.ndarray) -> np.ndarray:
        """Piece index of every hidden unit, one row per input row."""
        h = np.atleast_2d(np.asarray(v, dtype=dc.DTYPE))
        pieces = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            pre = h @ w.T + b
            pieces.append(self.activation.piece_index(pre))
            h = self.activation.apply(pre)
        if not pieces:
            return np.zeros((h.shape[0], 0), dtype=np.int64)
        return np.concatenate(pieces, axis=1)


class GeneratorModel(LayeredNetwork):
    """G_θ: R^k → R^n."""

    @property
    def latent_dim(self) -> int:
        return self.input_dim

    @property
    def signal_dim(self) -> int:
        return self.output_dim


def build_network(
    layer_dims: Sequence[int],
    rng: np.random.Generator,
    activation: Activation | None = None,
    output_head: str = "raw",
    cls: type[LayeredNetwork] = LayeredNetwork,
) -> LayeredNetwork:
    """He-initialised network: weights N(0, 2/fan_in), biases 0."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigError(f"a network needs input and output dimensions, got {dims}")
    if min(dims) < 1:
        raise ConfigError(f"all layer dimensions must be >= 1, got {dims}")
    weights = [
        rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        for fan_in, fan_out in zip(dims, dims[1:])
    ]
    biases = [np.zeros(fan_out) for fan_out in dims[1:]]
    return cls(
        weights=tuple(weights),
        biases=tuple(biases),
        activation=activation or Activation(),
        output_head=output_head,
    )


def build_generator(
    layer_dims: Sequence[int],
    seed: int,
    activation: Activation | None = None,
    output_head: str = "raw",
) -> GeneratorModel:
    generator = build_network(
        layer_dims,
        np.random.default_rng(seed),
        activation=activation,
        output_head=output_head,
        cls=GeneratorModel,
    )
    assert isinstance(generator, GeneratorModel)
    logger.info(
        f"Built generator {generator.layer_dims} "
        f"(d={generator.depth}, h={generator.width}, t={generator.pieces})"
    )
    return generator


def gen_forward(G: LayeredNetwork, z: np.ndarray) -> np.ndarray:
    return G.forward(z)


@dataclass(frozen=True, eq=False)
class MeasurementOperator:
    kind: str
    matrix: np.ndarray | None = None
    network: LayeredNetwork | None = None

    def __post_init__(self) -> None:
        if self.kind == "linear":
            if self.matrix is None or np.ndim(self.matrix) != 2:
                raise ConfigError("a linear sensor needs an m×n matrix")
            object.__setattr__(self, "matrix", dc.as_tensor(self.matrix))
        elif self.kind == "network":
            if self.network is None:
                raise ConfigError("a network sensor needs a network")
        else:
            raise ConfigError(f"unknown sensing kind {self.kind!r}")

    @classmethod
    def linear(cls, matrix: np.ndarray) -> "MeasurementOperator":
        return cls(kind="linear", matrix=matrix)

    @classmethod
    def from_network(cls, network: LayeredNetwork) -> "MeasurementOperator":
        return cls(kind="network", network=network)

    @property
    def m(self) -> int:
        if self.matrix is not None:
            return self.matrix.shape[0]
        assert self.network
        return self.network.output_dim

    @property
    def n(self) -> int:
        if self.matrix is not None:
            return self.matrix.shape[1]
        assert self.network
        return self.network.input_dim

    @property
    def trainable(self) -> bool:
        return self.kind == "network"

    def parameters(self) -> list[np.ndarray]:
        return self.network.parameters() if self.network else []

    def with_parameters(self, parameters: Sequence[np.ndarray]) -> "MeasurementOperator":
        if self.network is None:
            return self
        return MeasurementOperator.from_network(self.network.with_parameters(parameters))

    def sense(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=dc.DTYPE)
        if x.ndim not in (1, 2) or x.shape[-1] != self.n:
            raise DimensionError(f"sensor takes {self.n} inputs, got shape {x.shape}")
        y, _ = BoundSensor(self).forward(x)
        return dc.value_of(y)


def build_linear_sensor(
    m: int,
    n: int,
    seed: int,
    orthogonal: bool = False,
    allow_expansion: bool = False,
) -> MeasurementOperator:
    """A ∈ R^{m×n} with i.i.d. N(0, 1/m) entries, or orthonormal rows when `orthogonal`."""
    if m < 1 or n < 1:
        raise ConfigError(f"sensor dimensions must be >= 1, got m={m}, n={n}")
    if m >= n and not (allow_expansion or orthogonal):
        raise ConfigError(f"compressive sensing needs m < n, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    if orthogonal:
        if m > n:
            raise ConfigError(f"orthonormal rows need m <= n, got m={m}, n={n}")
        q, r = np.linalg.qr(rng.normal(size=(n, n)))
        matrix = (q * np.sign(np.diag(r)))[:, :m].T
    else:
        matrix = rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, n))
    return MeasurementOperator.linear(matrix)


def build_network_sensor(
    m: int,
    n: int,
    seed: int,
    hidden: Sequence[int] | None = None,
    activation: Activation | None = None,
) -> MeasurementOperator:
    """A_φ: R^n → R^m, one hidden layer of width 2m unless `hidden` says otherwise."""
    dims = [n, *(hidden if hidden is not None else (2 * m,)), m]
    network = build_network(dims, np.random.default_rng(seed), activation=activation)
    return MeasurementOperator.from_network(network)


def sense(M: MeasurementOperator, x: np.ndarray) -> np.ndarray:
    return M.sense(x)


@dataclass
class NetworkTrace:
    slopes: list[np.ndarray]
    output: Value


class BoundNetwork:
    """A network evaluated on a tape, its parameters leaves when `trainable`.

    `pullback` records the input-gradient as tape operations, so gradients
    of a gradient step (the unrolled inner loop) reach the parameters.
    """

    def __init__(
        self, network: LayeredNetwork, tape: Tape | None = None, trainable: bool = True
    ) -> None:
        self.network = network
        arrays = network.parameters()
        self.parameters: list[Value] = (
            [tape.leaf(p) for p in arrays] if tape is not None and trainable else list(arrays)
        )

    @property
    def leaves(self) -> list[Node]:
        return [p for p in self.parameters if isinstance(p, Node)]

    def _layers(self) -> list[tuple[Value, Value]]:
        return list(zip(self.parameters[0::2], self.parameters[1::2]))

    def forward(self, v: Value) -> tuple[Value, NetworkTrace]:
        activation = self.network.activation
        layers = self._layers()
        slopes: list[np.ndarray] = []
        h = v
        for i, (w, b) in enumerate(layers):
            pre = dc.affine_forward(w, b, h)
            if i < len(layers) - 1:
                slopes.append(activation.derivative(dc.value_of(pre)))
                h = dc.leaky_pwl_forward(pre, activation)
            else:
                h = pre
        if self.network.output_head == "sigmoid":
            h = dc.sigmoid(h)
        return h, NetworkTrace(slopes=slopes, output=h)

    def pullback(self, trace: NetworkTrace, g: Value) -> Value:
        if self.network.output_head == "sigmoid":
            out = trace.output
            g = dc.mul(g, dc.mul(out, dc.sub(1.0, out)))
        layers = self._layers()
        for i in reversed(range(len(layers))):
            g = dc.affine_adjoint(layers[i][0], g)
            if i > 0:
                g = dc.mul(g, trace.slopes[i - 1])
        return g

    def pushforward(self, trace: NetworkTrace, t: np.ndarray) -> np.ndarray:
        """Jacobian-vector product at the traced point, on plain values."""
        layers = self._layers()
        for i, (w, _) in enumerate(layers):
            w = dc.value_of(w)
            t = dc.affine_forward(w, np.zeros(w.shape[0]), t)
            if i < len(layers) - 1:
                t = t * trace.slopes[i]
        if self.network.output_head == "sigmoid":
            out = dc.value_of(trace.output)
            t = t * out * (1.0 - out)
        return t


class BoundSensor:
    def __init__(
        self, sensor: MeasurementOperator, tape: Tape | None = None, trainable: bool = True
    ) -> None:
        self.sensor = sensor
        self._network = (
            BoundNetwork(sensor.network, tape, trainable) if sensor.network else None
        )

    @property
    def leaves(self) -> list[Node]:
        return self._network.leaves if self._network else []

    def forward(self, x: Value) -> tuple[Value, NetworkTrace | None]:
        if self._network:
            return self._network.forward(x)
        assert self.sensor.matrix is not None
        return dc.affine_forward(self.sensor.matrix, np.zeros(self.sensor.m), x), None

    def pullback(self, trace: NetworkTrace | None, g: Value) -> Value:
        if self._network:
            assert trace is not None
            return self._network.pullback(trace, g)
        assert self.sensor.matrix is not None
        return dc.affine_adjoint(self.sensor.matrix, g)

    def pushforward(self, trace: NetworkTrace | None, t: np.ndarray) -> np.ndarray:
        if self._network:
            assert trace is not None
            return self._network.pushforward(trace, t)
        assert self.sensor.matrix is not None
        return dc.affine_forward(self.sensor.matrix, np.zeros(self.sensor.m), t)
