"""Sparsity-driven latent sampling: hard thresholding, the proximal inner loop,
losses, the meta step and the joint training loop.

Training differentiates through the unrolled inner loop. The projection is
straight-through on its kept support: the kept coordinates pass gradients
unchanged and the zeroed ones pass nothing.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, replace
from time import perf_counter

import numpy as np

from sdlss.lib import diffcore as dc
from sdlss.lib import streams
from sdlss.lib.data import iterate_batches
from sdlss.lib.diffcore import HINGE, Node, Tape
from sdlss.lib.errors import ConfigError, DimensionError, NonFiniteError
from sdlss.lib.metrics import MetricsRecord, summarize
from sdlss.lib.models import (
    BoundNetwork,
    BoundSensor,
    GeneratorModel,
    LayeredNetwork,
    MeasurementOperator,
)

logger = logging.getLogger(__name__)

SREC_FORMS = ("hinge", "literal")
STEP_SCHEDULES = ("adaptive", "fixed")
BACKTRACK_LIMIT = 30

Value = Node | np.ndarray


@dataclass(frozen=True)
class PmlConfig:
    s: int
    T: int = 5
    beta: float = 0.01
    alpha: float = 0.01
    srec_gamma: float = 1.0
    srec_delta: float = 0.001
    srec_form: str = "hinge"
    batch_size: int = 64
    eps: float = dc.TRAINING_NORM_EPS
    momentum: float = 0.0
    project: bool = True
    eval_steps: int = 10
    restarts: int = 3
    divergence_factor: float = 10.0
    tolerance: float = 1e-3
    schedule: str = "adaptive"

    def __post_init__(self) -> None:
        if self.s < 0:
            raise ConfigError(f"sparsity s must be >= 0, got {self.s}")
        if self.T < 1 or self.eval_steps < 1:
            raise ConfigError(f"inner steps must be >= 1, got T={self.T}, eval={self.eval_steps}")
        if self.beta < 0 or self.alpha < 0:
            raise ConfigError(f"step sizes must be >= 0, got β={self.beta}, α={self.alpha}")
        if self.srec_gamma <= 0:
            raise ConfigError(f"S-REC γ must be > 0, got {self.srec_gamma}")
        if self.srec_delta < 0:
            raise ConfigError(f"S-REC δ must be >= 0, got {self.srec_delta}")
        if self.srec_form not in SREC_FORMS:
            raise ConfigError(f"unknown S-REC loss form {self.srec_form!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.eps <= 0:
            raise ConfigError(f"norm smoothing eps must be > 0, got {self.eps}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")
        if self.schedule not in STEP_SCHEDULES:
            raise ConfigError(f"unknown step schedule {self.schedule!r}")

    def validate(self, k: int) -> "PmlConfig":
        if self.s > k:
            raise ConfigError(f"sparsity s={self.s} exceeds the latent dimension k={k}")
        return self

    def projects(self, k: int) -> bool:
        return self.project and self.s < k


def support_mask(v: np.ndarray, s: int) -> np.ndarray:
    """Indicator of the s largest magnitudes per row, lowest index first on ties."""
    v = np.asarray(v)
    k = v.shape[-1]
    if not 0 <= s <= k:
        raise ConfigError(f"sparsity must lie in [0, {k}], got {s}")
    order = np.argsort(-np.abs(v), axis=-1, kind="stable")
    mask = np.zeros(v.shape, dtype=dc.DTYPE)
    np.put_along_axis(mask, order[..., :s], 1.0, axis=-1)
    return mask


def hard_threshold(v: np.ndarray, s: int) -> np.ndarray:
    """P_s: keep the s largest-magnitude entries (per row) and zero the rest."""
    v = np.asarray(v, dtype=dc.DTYPE)
    return np.where(support_mask(v, s) > 0, v, 0.0)


def _bind(
    G: LayeredNetwork | BoundNetwork, M: MeasurementOperator | BoundSensor
) -> tuple[BoundNetwork, BoundSensor]:
    gen = G if isinstance(G, BoundNetwork) else BoundNetwork(G)
    sensor = M if isinstance(M, BoundSensor) else BoundSensor(M)
    return gen, sensor


def _check_dims(y: np.ndarray, z: np.ndarray, G: LayeredNetwork, M: MeasurementOperator) -> None:
    if z.shape[-1] != G.input_dim or y.shape[-1] != M.m or G.output_dim != M.n:
        raise DimensionError(
            f"y{y.shape}, z{z.shape}, G: {G.input_dim}→{G.output_dim}, M: {M.n}→{M.m}"
        )


def measurement_objective(
    y: np.ndarray,
    z: np.ndarray,
    G: LayeredNetwork,
    M: MeasurementOperator,
    eps: float = dc.TRAINING_NORM_EPS,
) -> float | np.ndarray:
    """f(y, z) = ‖y − M(G(z))‖₂ (smoothed), per row for a batch."""
    y = np.asarray(y, dtype=dc.DTYPE)
    z = np.asarray(z, dtype=dc.DTYPE)
    _check_dims(y, z, G, M)
    value = dc.euclid_norm(y - M.sense(G.forward(z)), eps)
    return float(value) if np.ndim(value) == 0 else value


@dataclass
class InnerLoopResult:
    z_hat: Value
    objective: np.ndarray
    history: np.ndarray
    diverged: np.ndarray

    @property
    def any_diverged(self) -> bool:
        return bool(np.any(self.diverged))


def _unroll(
    y: Value,
    z0: np.ndarray,
    gen: BoundNetwork,
    sensor: BoundSensor,
    cfg: PmlConfig,
    steps: int,
) -> InnerLoopResult:
    k = z0.shape[-1]
    z: Value = z0
    iterates: list[Value] = []
    history: list[np.ndarray] = []
    for _ in range(steps):
        x, gen_trace = gen.forward(z)
        y_hat, sensor_trace = sensor.forward(x)
        r = dc.sub(y, y_hat)
        f = dc.euclid_norm(r, cfg.eps)
        history.append(dc.value_of(f))
        # −∇_z f = J_Gᵀ J_Mᵀ r / sqrt(‖r‖² + eps²)
        direction = dc.div(r, dc.expand_dims(dc.add(f, cfg.eps)))
        descent = gen.pullback(gen_trace, sensor.pullback(sensor_trace, direction))
        z = dc.add(z, dc.mul(cfg.beta, descent))
        if cfg.projects(k):
            z = dc.mul(z, support_mask(dc.value_of(z), cfg.s))
        iterates.append(z)

    final = np.atleast_1d(
        measurement_objective(
            dc.value_of(y), dc.value_of(z), gen.network, sensor.sensor, cfg.eps
        )
    )
    history.append(final)
    trajectory = np.stack(history)
    diverged = final > cfg.divergence_factor * trajectory[0]
    if not np.any(diverged):
        return InnerLoopResult(z, final, trajectory, diverged)

    # fall back to the best projected iterate of every diverged sample
    best = np.argmin(trajectory[1:], axis=0)
    chosen = np.where(diverged, best, steps - 1)
    logger.warning(
        f"Inner loop diverged for {int(diverged.sum())} of {len(diverged)} samples, "
        "using best-so-far iterates"
    )
    z_hat: Value = np.zeros_like(z0)
    for j, iterate in enumerate(iterates):
        rows = chosen == j
        if np.any(rows):
            z_hat = dc.add(z_hat, dc.mul(iterate, rows[:, None].astype(dc.DTYPE)))
    objective = trajectory[1:][chosen, np.arange(len(chosen))]
    return InnerLoopResult(z_hat, objective, trajectory, diverged)


def pml_inner_loop(
    y: np.ndarray,
    z0: np.ndarray,
    G: LayeredNetwork | BoundNetwork,
    M: MeasurementOperator | BoundSensor,
    cfg: PmlConfig,
    steps: int | None = None,
) -> InnerLoopResult:
    """T proximal gradient steps ẑ ← P_s(z − β∇_z f(y, z)) from z0.

    Rows of a 2-D `y`/`z0` are independent samples. With bound models on a
    tape the returned ẑ is a node that carries gradients to their parameters.
    """
    gen, sensor = _bind(G, M)
    z0 = np.asarray(z0, dtype=dc.DTYPE)
    single = z0.ndim == 1
    _check_dims(dc.value_of(y), z0, gen.network, sensor.sensor)
    cfg.validate(z0.shape[-1])
    if single:
        y = dc.value_of(y)[None, :]
        z0 = z0[None, :]
    result = _unroll(y, z0, gen, sensor, cfg, steps or cfg.T)
    if single and not isinstance(result.z_hat, Node):
        result.z_hat = result.z_hat[0]
    return result


def adaptive_inner_loop(
    y: np.ndarray,
    z0: np.ndarray,
    G: LayeredNetwork,
    M: MeasurementOperator,
    cfg: PmlConfig,
    steps: int | None = None,
) -> InnerLoopResult:
    """Proximal gradient steps whose length is chosen per step and per row.

    Starts from P_s(z0). Each step size is the exact line minimiser of
    ½‖r‖² along the gradient restricted to the current support, halved until
    the projected step lowers the residual. A row that cannot descend within
    BACKTRACK_LIMIT halvings is stationary and stays where it is. Works on
    plain values only: nothing is recorded for meta-gradients.
    """
    y = np.atleast_2d(np.asarray(y, dtype=dc.DTYPE))
    z0 = np.atleast_2d(np.asarray(z0, dtype=dc.DTYPE))
    _check_dims(y, z0, G, M)
    k = z0.shape[-1]
    cfg.validate(k)
    project = cfg.projects(k)
    gen, sensor = BoundNetwork(G), BoundSensor(M)

    def evaluate(z: np.ndarray):
        x, gen_trace = gen.forward(z)
        y_hat, sensor_trace = sensor.forward(x)
        r = y - dc.value_of(y_hat)
        return r, np.sum(r * r, axis=-1), gen_trace, sensor_trace

    z = hard_threshold(z0, cfg.s) if project else z0.copy()
    r, f, gen_trace, sensor_trace = evaluate(z)
    history = [np.sqrt(f)]
    moving = np.ones(len(z), dtype=bool)
    for _ in range(steps or cfg.eval_steps):
        # −∇_z ½‖r‖²
        g = dc.value_of(gen.pullback(gen_trace, sensor.pullback(sensor_trace, r)))
        on_support = np.where(z != 0, g, 0.0)
        empty = ~np.any(on_support != 0, axis=-1)
        on_support[empty] = g[empty]
        image = sensor.pushforward(sensor_trace, gen.pushforward(gen_trace, on_support))
        curvature = np.sum(image * image, axis=-1)
        mu = np.divide(
            np.sum(on_support * on_support, axis=-1),
            curvature,
            out=np.zeros(len(z)),
            where=curvature > 0,
        )
        moving &= mu > 0

        candidate = z.copy()
        accepted = np.zeros(len(z), dtype=bool)
        for _ in range(BACKTRACK_LIMIT):
            pending = moving & ~accepted
            if not np.any(pending):
                break
            trial = z + mu[:, None] * g
            if project:
                trial = hard_threshold(trial, cfg.s)
            _, f_trial, _, _ = evaluate(trial)
            better = pending & (f_trial < f)
            candidate[better] = trial[better]
            accepted |= better
            mu = np.where(pending & ~better, mu / 2, mu)
        moving &= accepted
        if not np.any(moving):
            break
        z = candidate
        r, f, gen_trace, sensor_trace = evaluate(z)
        history.append(np.sqrt(f))

    objective = np.atleast_1d(measurement_objective(y, z, G, M, cfg.eps))
    return InnerLoopResult(z, objective, np.stack(history), np.zeros(len(z), dtype=bool))


def srec_loss(
    x1: Value,
    x2: Value,
    M: MeasurementOperator | BoundSensor,
    gamma: float = 1.0,
    delta: float = 0.001,
    form: str = "hinge",
    eps: float = 0.0,
) -> Value:
    """Penalty on pairs that break ‖M(x1) − M(x2)‖ ≥ γ‖x1 − x2‖ − δ.

    "hinge" averages max(0, γ‖x1 − x2‖ − δ − ‖M(x1) − M(x2)‖); "literal"
    averages ‖M(x1) − M(x2)‖ + δ − γ‖x1 − x2‖.
    """
    if gamma <= 0:
        raise ConfigError(f"S-REC γ must be > 0, got {gamma}")
    if form not in SREC_FORMS:
        raise ConfigError(f"unknown S-REC loss form {form!r}")
    sensor = M if isinstance(M, BoundSensor) else BoundSensor(M)
    y1, _ = sensor.forward(x1)
    y2, _ = sensor.forward(x2)
    measured = dc.euclid_norm(dc.sub(y1, y2), eps)
    distance = dc.euclid_norm(dc.sub(x1, x2), eps)
    if form == "hinge":
        gap = dc.sub(dc.sub(dc.mul(gamma, distance), delta), measured)
        return dc.mean(dc.leaky_pwl_forward(gap, HINGE))
    return dc.mean(dc.sub(dc.add(measured, delta), dc.mul(gamma, distance)))


@dataclass
class GeneratorLoss:
    residual: Value
    l0: float

    @property
    def total(self) -> float:
        return float(dc.value_of(self.residual)) + self.l0


def generator_loss(
    y: Value,
    z_hat: Value,
    G: LayeredNetwork | BoundNetwork,
    M: MeasurementOperator | BoundSensor,
    eps: float = dc.TRAINING_NORM_EPS,
) -> GeneratorLoss:
    """Batch mean of ‖y_i − M(G(ẑ_i))‖₂; the mean ‖ẑ_i‖₀ is reported without a gradient."""
    gen, sensor = _bind(G, M)
    x, _ = gen.forward(z_hat)
    y_hat, _ = sensor.forward(x)
    residual = dc.mean(dc.euclid_norm(dc.sub(y, y_hat), eps))
    l0 = float(np.mean(np.count_nonzero(np.atleast_2d(dc.value_of(z_hat)), axis=-1)))
    return GeneratorLoss(residual=residual, l0=l0)


@dataclass
class EpochRecord:
    epoch: int
    loss_g: float
    loss_a: float
    l0: float
    train_residual: float
    val_residual: float | None = None
    metrics: MetricsRecord | None = None
    diverged_samples: int = 0
    seconds: float = 0.0


@dataclass(frozen=True)
class TrainState:
    generator: GeneratorModel
    sensor: MeasurementOperator
    seed: int
    epoch: int = 0
    step: int = 0
    velocity: tuple[np.ndarray, ...] = ()
    history: tuple[EpochRecord, ...] = ()
    converged: bool = False
    diverged: bool = False

    def parameters(self) -> list[np.ndarray]:
        return self.generator.parameters() + self.sensor.parameters()


def init_state(
    generator: GeneratorModel, sensor: MeasurementOperator, seed: int
) -> TrainState:
    return TrainState(generator=generator, sensor=sensor, seed=seed)


def meta_update(
    state: TrainState,
    total_loss: Node,
    gen: BoundNetwork,
    sensor: BoundSensor,
    alpha: float,
    momentum: float = 0.0,
) -> TrainState:
    """One SGD step θ ← θ − α ∂L/∂θ (and φ for a trainable sensor)."""
    gradients = total_loss.tape.backward(total_loss)
    leaves = gen.leaves + sensor.leaves
    grads = [gradients[leaf] for leaf in leaves]
    params = [dc.value_of(leaf) for leaf in leaves]

    velocity = state.velocity
    if momentum:
        previous = velocity or tuple(np.zeros_like(p) for p in params)
        velocity = tuple(momentum * v + g for v, g in zip(previous, grads))
        steps = list(velocity)
    else:
        steps = grads
    updated = [p - alpha * g for p, g in zip(params, steps)]
    for p in updated:
        if not np.all(np.isfinite(p)):
            raise NonFiniteError(f"meta step at step {state.step} produced non-finite parameters")

    n_gen = len(gen.leaves)
    generator = state.generator
    if gen.leaves:
        generator = state.generator.with_parameters(updated[:n_gen])
    sensor_op = state.sensor
    if sensor.leaves:
        sensor_op = state.sensor.with_parameters(updated[n_gen:])
    return replace(
        state,
        generator=generator,
        sensor=sensor_op,
        step=state.step + 1,
        velocity=velocity,
    )


def _relative(residuals: np.ndarray, y: np.ndarray) -> np.ndarray:
    return residuals / np.maximum(np.linalg.norm(np.atleast_2d(y), axis=-1), 1e-300)


def _latents(rng: np.random.Generator, count: int, k: int) -> np.ndarray:
    return rng.standard_normal((count, k))


def _train_batch(
    state: TrainState, x: np.ndarray, cfg: PmlConfig, rng: np.random.Generator
) -> tuple[TrainState, dict[str, float]]:
    k = state.generator.latent_dim
    tape = Tape()
    gen = BoundNetwork(state.generator, tape)
    sensor = BoundSensor(state.sensor, tape)

    y, _ = sensor.forward(x)
    result = _unroll(y, _latents(rng, len(x), k), gen, sensor, cfg, cfg.T)
    loss_g = generator_loss(y, result.z_hat, gen, sensor, cfg.eps)

    z2 = _latents(rng, len(x), k)
    if cfg.projects(k):
        z2 = hard_threshold(z2, cfg.s)
    if state.sensor.trainable:
        x2, _ = gen.forward(z2)
        loss_a = srec_loss(x, x2, sensor, cfg.srec_gamma, cfg.srec_delta, cfg.srec_form, cfg.eps)
        total = dc.add(loss_g.residual, loss_a)
    else:
        # a fixed sensor has nothing to learn from the S-REC term
        loss_a = srec_loss(
            x,
            state.generator.forward(z2),
            state.sensor,
            cfg.srec_gamma,
            cfg.srec_delta,
            cfg.srec_form,
            cfg.eps,
        )
        total = loss_g.residual
    assert isinstance(total, Node)

    stats = {
        "loss_g": float(dc.value_of(loss_g.residual)),
        "loss_a": float(dc.value_of(loss_a)),
        "l0": loss_g.l0,
        "relative": float(np.mean(_relative(result.objective, dc.value_of(y)))),
        "diverged": float(np.sum(result.diverged)),
    }
    return meta_update(state, total, gen, sensor, cfg.alpha, cfg.momentum), stats


def default_image_shape(n: int) -> tuple[int, ...]:
    side = math.isqrt(n)
    return (side, side) if side * side == n else (1, n)


def validate_epoch(
    state: TrainState,
    images: np.ndarray,
    cfg: PmlConfig,
    image_shape: tuple[int, ...],
    experiment: str,
) -> tuple[float, MetricsRecord]:
    """Recover a held-out batch with the same latent start every epoch."""
    y = state.sensor.sense(images)
    z0 = _latents(streams.rng(state.seed, "validation"), len(images), state.generator.latent_dim)
    result = pml_inner_loop(y, z0, state.generator, state.sensor, cfg)
    x_hat = state.generator.forward(result.z_hat)
    residual = float(np.mean(dc.euclid_norm(y - state.sensor.sense(x_hat))))
    record = summarize(
        images,
        np.clip(x_hat, 0.0, 1.0),
        image_shape,
        experiment=experiment,
        epoch=state.epoch,
        m=state.sensor.m,
        k=state.generator.latent_dim,
        s=cfg.s,
    )
    return residual, record


def train(
    images: np.ndarray,
    cfg: PmlConfig,
    state: TrainState,
    max_epochs: int,
    validation: np.ndarray | None = None,
    image_shape: tuple[int, ...] | None = None,
    experiment: str = "sdlss",
    on_epoch: Callable[[EpochRecord], None] | None = None,
    divergence_patience: int = 3,
) -> TrainState:
    """Joint training of the generator (and a network sensor) by proximal meta-learning.

    Stops after `max_epochs`, once the mean relative residual of an epoch is
    within `cfg.tolerance`, or when the epoch loss stays above
    `cfg.divergence_factor` times the first epoch's for `divergence_patience`
    epochs in a row.
    """
    images = np.atleast_2d(np.asarray(images, dtype=dc.DTYPE))
    if len(images) == 0:
        raise ConfigError("training needs at least one image")
    if images.shape[1] != state.generator.signal_dim:
        raise DimensionError(
            f"images have {images.shape[1]} pixels, generator emits {state.generator.signal_dim}"
        )
    cfg.validate(state.generator.latent_dim)
    image_shape = image_shape or default_image_shape(images.shape[1])

    data_seed = streams.stream_seed(state.seed, "data")
    latent_seed = streams.stream_seed(state.seed, "latent")
    initial_loss: float | None = None
    strikes = 0

    for _ in range(max_epochs):
        epoch = state.epoch + 1
        start = perf_counter()
        epoch_start = state
        totals: dict[str, list[float]] = {}
        try:
            order = iterate_batches(
                len(images), cfg.batch_size, np.random.default_rng([data_seed, epoch])
            )
            for b, batch in enumerate(order):
                rng = np.random.default_rng([latent_seed, epoch, b])
                state, stats = _train_batch(state, images[batch], cfg, rng)
                for key, value in stats.items():
                    totals.setdefault(key, []).append(value)
        except NonFiniteError as e:
            logger.error(f"Epoch {epoch} aborted: {e}")
            return replace(epoch_start, diverged=True)

        state = replace(state, epoch=epoch)
        record = EpochRecord(
            epoch=epoch,
            loss_g=float(np.mean(totals["loss_g"])),
            loss_a=float(np.mean(totals["loss_a"])),
            l0=float(np.mean(totals["l0"])),
            train_residual=float(np.mean(totals["relative"])),
            diverged_samples=int(np.sum(totals["diverged"])),
        )
        if validation is not None and len(validation):
            record.val_residual, record.metrics = validate_epoch(
                state, validation, cfg, image_shape, experiment
            )
        record.seconds = perf_counter() - start
        state = replace(state, history=state.history + (record,))
        logger.info(
            f"Epoch {epoch} took {record.seconds:.1f} s: L_G={record.loss_g:.4f} "
            f"L_A={record.loss_a:.4f} ℓ0={record.l0:.1f} rel. residual={record.train_residual:.2e}"
        )
        if on_epoch:
            on_epoch(record)

        if record.train_residual <= cfg.tolerance:
            logger.info(f"Converged after epoch {epoch}")
            return replace(state, converged=True)
        if initial_loss is None:
            initial_loss = record.loss_g
        elif record.loss_g > cfg.divergence_factor * initial_loss:
            strikes += 1
            if strikes >= divergence_patience:
                logger.error(f"Training diverged: L_G={record.loss_g:.4g} at epoch {epoch}")
                return replace(state, diverged=True)
        else:
            strikes = 0
    return state


@dataclass
class Recovery:
    x_hat: np.ndarray
    z_hat: np.ndarray
    objective: np.ndarray


def recover(
    y: np.ndarray,
    G: LayeredNetwork,
    M: MeasurementOperator,
    cfg: PmlConfig,
    restarts: int | None = None,
    seed: int = 0,
) -> Recovery:
    """Best of `restarts` inner-loop runs (cfg.eval_steps each) from N(0, I) starts.

    cfg.schedule picks the loop: "adaptive" sizes every step by line search,
    "fixed" repeats the training loop with step β.

    Restart r draws its start from the r-th child of `seed`, so adding restarts
    only adds candidates; earlier restarts win ties.
    """
    restarts = cfg.restarts if restarts is None else restarts
    if restarts < 1:
        raise ConfigError(f"restarts must be >= 1, got {restarts}")
    y = np.asarray(y, dtype=dc.DTYPE)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    k = G.input_dim

    start = perf_counter()
    best_z = np.zeros((len(y2), k))
    best_f = np.full(len(y2), np.inf)
    inner_loop = adaptive_inner_loop if cfg.schedule == "adaptive" else pml_inner_loop
    for rng in streams.spawn(seed, restarts):
        result = inner_loop(y2, _latents(rng, len(y2), k), G, M, cfg, steps=cfg.eval_steps)
        z_hat = dc.value_of(result.z_hat)
        better = result.objective < best_f
        best_z = np.where(better[:, None], z_hat, best_z)
        best_f = np.where(better, result.objective, best_f)
    x_hat = G.forward(best_z)
    logger.debug(
        f"Recovered {len(y2)} signals with {restarts} restarts in "
        f"{(perf_counter() - start) * 1000:.0f} ms"
    )
    if single:
        return Recovery(x_hat=x_hat[0], z_hat=best_z[0], objective=best_f[:1])
    return Recovery(x_hat=x_hat, z_hat=best_z, objective=best_f)
