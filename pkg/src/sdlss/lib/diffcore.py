"""Dense tensors and exact reverse-mode gradients for a fixed operator set.

Tensors are plain float64 numpy arrays marked read-only. An operation whose
operands include a `Node` is recorded on that node's `Tape`; with only
constant operands the same operation returns a plain array, so model code
runs traced and untraced through one code path.
"""

import logging
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from sdlss.lib.errors import ConfigError, ContractError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

DTYPE = np.float64
DEFAULT_NEGATIVE_SLOPE = 0.2
TRAINING_NORM_EPS = 1e-12

Forward = Callable[..., np.ndarray]
Pullback = Callable[..., tuple[np.ndarray | None, ...]]


def _check_finite(array: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{name} produced non-finite values")


def as_tensor(value: object) -> np.ndarray:
    """Copy `value` into an immutable float64 array."""
    array = np.array(value, dtype=DTYPE)
    _check_finite(array, "as_tensor")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Activation:
    """Continuous piecewise-linear activation with `len(slopes)` pieces.

    f(v) = slopes[0]·v + Σ_j (slopes[j+1] − slopes[j])·max(0, v − breakpoints[j])

    The default is leaky ReLU with negative slope 0.2.
    """

    slopes: tuple[float, ...] = (DEFAULT_NEGATIVE_SLOPE, 1.0)
    breakpoints: tuple[float, ...] = (0.0,)

    def __post_init__(self) -> None:
        if len(self.slopes) != len(self.breakpoints) + 1:
            raise ConfigError(
                f"{len(self.slopes)} slopes need {len(self.slopes) - 1} breakpoints, "
                f"got {len(self.breakpoints)}"
            )
        if not np.all(np.isfinite(self.slopes)) or not np.all(
            np.isfinite(self.breakpoints)
        ):
            raise ConfigError("activation slopes and breakpoints must be finite")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ConfigError(
                f"activation breakpoints must be strictly increasing: {self.breakpoints}"
            )

    @classmethod
    def leaky(cls, slope_neg: float = DEFAULT_NEGATIVE_SLOPE) -> "Activation":
        return cls(slopes=(float(slope_neg), 1.0), breakpoints=(0.0,))

    @property
    def pieces(self) -> int:
        return len(self.slopes)

    def apply(self, v: np.ndarray) -> np.ndarray:
        out = self.slopes[0] * v
        for b, lo, hi in zip(self.breakpoints, self.slopes, self.slopes[1:]):
            out = out + (hi - lo) * np.maximum(v - b, 0.0)
        return out

    def derivative(self, v: np.ndarray) -> np.ndarray:
        # right-hand slope at a breakpoint
        out = np.full(np.shape(v), self.slopes[0], dtype=DTYPE)
        for b, lo, hi in zip(self.breakpoints, self.slopes, self.slopes[1:]):
            out = out + (hi - lo) * (v >= b)
        return out

    def piece_index(self, v: np.ndarray) -> np.ndarray:
        return np.searchsorted(np.asarray(self.breakpoints), v, side="right")


HINGE = Activation(slopes=(0.0, 1.0), breakpoints=(0.0,))


class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int) -> None:
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(index={self.index}, shape={self.shape})"

    def __add__(self, other: "Operand") -> "Node":
        return add(self, other)

    def __radd__(self, other: "Operand") -> "Node":
        return add(other, self)

    def __sub__(self, other: "Operand") -> "Node":
        return sub(self, other)

    def __rsub__(self, other: "Operand") -> "Node":
        return sub(other, self)

    def __mul__(self, other: "Operand") -> "Node":
        return mul(self, other)

    def __rmul__(self, other: "Operand") -> "Node":
        return mul(other, self)

    def __truediv__(self, other: "Operand") -> "Node":
        return div(self, other)

    def __neg__(self) -> "Node":
        return mul(self, -1.0)

    def __matmul__(self, other: "Operand") -> "Node":
        return matmul(self, other)


Operand = Node | np.ndarray | float


@dataclass(frozen=True)
class _Record:
    name: str
    output: int
    operands: tuple[int | np.ndarray, ...]
    forward: Forward
    pullback: Pullback


class Gradients(Mapping[int, np.ndarray]):
    """Gradients of a scalar output for every leaf of a tape, keyed by node index."""

    def __init__(self, by_index: dict[int, np.ndarray]) -> None:
        self._by_index = by_index

    def __getitem__(self, key: int | Node) -> np.ndarray:
        if isinstance(key, Node):
            key = key.index
        return self._by_index[key]

    def __iter__(self) -> Iterator[int]:
        return iter(self._by_index)

    def __len__(self) -> int:
        return len(self._by_index)


class Tape:
    """Ordered record of primitive operations; single owner, never shared."""

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.records: list[_Record] = []
        self.leaves: list[int] = []

    def __len__(self) -> int:
        return len(self.values)

    def leaf(self, value: object) -> Node:
        index = self._store(as_tensor(value))
        self.leaves.append(index)
        return Node(self, index)

    def _store(self, value: np.ndarray) -> int:
        value.setflags(write=False)
        self.values.append(value)
        return len(self.values) - 1

    def record(
        self,
        name: str,
        forward: Forward,
        pullback: Pullback,
        operands: tuple[Node | np.ndarray, ...],
        value: np.ndarray,
    ) -> Node:
        refs = tuple(o.index if isinstance(o, Node) else o for o in operands)
        index = self._store(value)
        self.records.append(_Record(name, index, refs, forward, pullback))
        return Node(self, index)

    def _operand_value(self, ref: int | np.ndarray) -> np.ndarray:
        return self.values[ref] if isinstance(ref, int) else ref

    def backward(self, output: Node) -> Gradients:
        if output.tape is not self:
            raise ContractError("output node was recorded on a different tape")
        if output.value.size != 1:
            raise ContractError(
                f"backward needs a scalar output, got shape {output.value.shape}"
            )

        leaves = set(self.leaves)
        adjoints: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        for rec in reversed(self.records):
            upstream = (
                adjoints.get(rec.output)
                if rec.output in leaves
                else adjoints.pop(rec.output, None)
            )
            if upstream is None:
                continue
            inputs = [self._operand_value(ref) for ref in rec.operands]
            contributions = rec.pullback(upstream, self.values[rec.output], *inputs)
            for ref, contribution in zip(rec.operands, contributions):
                if not isinstance(ref, int) or contribution is None:
                    continue
                _check_finite(contribution, f"gradient of {rec.name}")
                previous = adjoints.get(ref)
                adjoints[ref] = (
                    contribution if previous is None else previous + contribution
                )

        return Gradients(
            {i: adjoints.get(i, np.zeros_like(self.values[i])) for i in self.leaves}
        )

    def replay(self, leaf_values: Mapping[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node from the leaves (recorded or substituted)."""
        values = list(self.values)
        for index, value in (leaf_values or {}).items():
            values[index] = as_tensor(value)
        for rec in self.records:
            inputs = [values[r] if isinstance(r, int) else r for r in rec.operands]
            values[rec.output] = np.asarray(rec.forward(*inputs), dtype=DTYPE)
        return values


def backward(tape: Tape, output: Node) -> Gradients:
    return tape.backward(output)


def value_of(x: Operand) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=DTYPE)


def _apply(name: str, forward: Forward, pullback: Pullback, *operands: Operand) -> Node | np.ndarray:
    tape: Tape | None = None
    prepared: list[Node | np.ndarray] = []
    for operand in operands:
        if isinstance(operand, Node):
            if tape is None:
                tape = operand.tape
            elif operand.tape is not tape:
                raise ContractError(f"{name}: operands were recorded on different tapes")
            prepared.append(operand)
        else:
            constant = np.asarray(operand, dtype=DTYPE)
            _check_finite(constant, name)
            prepared.append(constant)

    out = np.asarray(forward(*(value_of(o) for o in prepared)), dtype=DTYPE)
    _check_finite(out, name)
    if tape is None:
        return out
    return tape.record(name, forward, pullback, tuple(prepared), out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Operand, b: Operand) -> Node | np.ndarray:
    return _apply(
        "add",
        np.add,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        a,
        b,
    )


def sub(a: Operand, b: Operand) -> Node | np.ndarray:
    return _apply(
        "sub",
        np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        a,
        b,
    )


def mul(a: Operand, b: Operand) -> Node | np.ndarray:
    return _apply(
        "mul",
        np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        a,
        b,
    )


def div(a: Operand, b: Operand) -> Node | np.ndarray:
    return _apply(
        "div",
        np.divide,
        lambda g, out, x, y: (
            _unbroadcast(g / y, x.shape),
            _unbroadcast(-g * x / (y * y), y.shape),
        ),
        a,
        b,
    )


def total(a: Operand) -> Node | np.ndarray:
    return _apply(
        "sum",
        lambda x: np.asarray(np.sum(x)),
        lambda g, out, x: (np.full(x.shape, g, dtype=DTYPE),),
        a,
    )


def mean(a: Operand) -> Node | np.ndarray:
    return _apply(
        "mean",
        lambda x: np.asarray(np.mean(x)),
        lambda g, out, x: (np.full(x.shape, g / x.size, dtype=DTYPE),),
        a,
    )


def expand_dims(a: Operand) -> Node | np.ndarray:
    """Append a unit axis, so per-row scalars broadcast against rows."""
    return _apply(
        "expand_dims",
        lambda x: x[..., None],
        lambda g, out, x: (g.reshape(x.shape),),
        a,
    )


def sigmoid(a: Operand) -> Node | np.ndarray:
    return _apply("sigmoid", expit, lambda g, out, x: (g * out * (1.0 - out),), a)


def _matmul_pullback(g: np.ndarray, out: np.ndarray, x: np.ndarray, y: np.ndarray):
    if x.ndim == 1:
        return y @ g, np.outer(x, g)
    if y.ndim == 1:
        return np.outer(g, y), x.T @ g
    return g @ y.T, x.T @ g


def matmul(a: Operand, b: Operand) -> Node | np.ndarray:
    sa, sb = value_of(a).shape, value_of(b).shape
    if not sa or not sb or len(sa) > 2 or len(sb) > 2 or sa[-1] != sb[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {sa} and {sb}")
    return _apply("matmul", np.matmul, _matmul_pullback, a, b)


def _affine_forward(w: np.ndarray, b: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (w @ v if v.ndim == 1 else v @ w.T) + b


def _affine_pullback(g: np.ndarray, out: np.ndarray, w: np.ndarray, b: np.ndarray, v: np.ndarray):
    if v.ndim == 1:
        return np.outer(g, v), g, w.T @ g
    return g.T @ v, g.sum(axis=0), g @ w


def affine_forward(W: Operand, b: Operand, v: Operand) -> Node | np.ndarray:
    """W·v + b for a vector v, or V·Wᵀ + b row-wise for a batch V."""
    sw, sb, sv = value_of(W).shape, value_of(b).shape, value_of(v).shape
    if len(sw) != 2 or sb != (sw[0],) or len(sv) not in (1, 2) or sv[-1] != sw[1]:
        raise DimensionError(
            f"affine_forward: W{sw}, b{sb} and v{sv} do not conform"
        )
    return _apply("affine", _affine_forward, _affine_pullback, W, b, v)


def _adjoint_forward(w: np.ndarray, u: np.ndarray) -> np.ndarray:
    return w.T @ u if u.ndim == 1 else u @ w


def _adjoint_pullback(g: np.ndarray, out: np.ndarray, w: np.ndarray, u: np.ndarray):
    if u.ndim == 1:
        return np.outer(u, g), w @ g
    return u.T @ g, g @ w.T


def affine_adjoint(W: Operand, u: Operand) -> Node | np.ndarray:
    """Wᵀ·u for a vector u, or U·W row-wise for a batch U."""
    sw, su = value_of(W).shape, value_of(u).shape
    if len(sw) != 2 or len(su) not in (1, 2) or su[-1] != sw[0]:
        raise DimensionError(f"affine_adjoint: W{sw} and u{su} do not conform")
    return _apply("affine_adjoint", _adjoint_forward, _adjoint_pullback, W, u)


def leaky_pwl_forward(
    v: Operand, activation: Activation | float = DEFAULT_NEGATIVE_SLOPE
) -> Node | np.ndarray:
    if not isinstance(activation, Activation):
        activation = Activation.leaky(activation)
    return _apply(
        "leaky_pwl",
        activation.apply,
        lambda g, out, x: (g * activation.derivative(x),),
        v,
    )


def euclid_norm(v: Operand, eps: float = 0.0) -> Node | np.ndarray:
    """‖v‖₂ over the last axis, smoothed to sqrt(‖v‖² + eps²) − eps when eps > 0."""
    if eps < 0:
        raise ConfigError(f"norm smoothing eps must be >= 0, got {eps}")

    def forward(x: np.ndarray) -> np.ndarray:
        squares = np.sum(x * x, axis=-1)
        if eps > 0:
            return np.asarray(np.sqrt(squares + eps * eps) - eps)
        return np.asarray(np.sqrt(squares))

    def pullback(g: np.ndarray, out: np.ndarray, x: np.ndarray):
        denom = np.sqrt(np.sum(x * x, axis=-1) + eps * eps)
        safe = np.where(denom > 0, denom, 1.0)
        scale = np.where(denom > 0, g / safe, 0.0)
        return (np.asarray(scale)[..., None] * x,)

    return _apply("euclid_norm", forward, pullback, v)
