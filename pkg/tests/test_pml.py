import itertools

import numpy as np
import pytest

from sdlss.lib import diffcore as dc
from sdlss.lib import streams
from sdlss.lib.diffcore import Tape
from sdlss.lib.errors import ConfigError, NonFiniteError
from sdlss.lib.models import (
    BoundNetwork,
    BoundSensor,
    GeneratorModel,
    MeasurementOperator,
    build_generator,
    build_linear_sensor,
    build_network_sensor,
)
from sdlss.lib.pml import (
    PmlConfig,
    _unroll,
    adaptive_inner_loop,
    generator_loss,
    hard_threshold,
    init_state,
    measurement_objective,
    meta_update,
    pml_inner_loop,
    recover,
    srec_loss,
    train,
)


def make_instance(seed: int, k: int = 3, n: int = 6, hidden: int = 8):
    G = build_generator([k, hidden, n], seed)
    rng = np.random.default_rng(seed)
    return G, rng.standard_normal(k), rng.standard_normal(k)


def make_images(count: int, n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(count, n))


def test_hard_threshold_examples():
    assert np.array_equal(hard_threshold(np.array([0.5, -2.0, 1.0, 0.0]), 2), [0, -2.0, 1.0, 0])
    v = np.array([0.3, -0.1, 4.0])
    assert np.array_equal(hard_threshold(v, 3), v)
    assert np.array_equal(hard_threshold(v, 0), np.zeros(3))
    assert np.array_equal(hard_threshold(np.array([1.0, -1.0, 1.0]), 2), [1.0, -1.0, 0.0])


def test_hard_threshold_rejects_s_above_k():
    with pytest.raises(ConfigError):
        hard_threshold(np.ones(3), 4)


def test_hard_threshold_is_an_idempotent_projection():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(1, 9))
        s = int(rng.integers(0, k + 1))
        v = rng.standard_normal(k)
        projected = hard_threshold(v, s)
        assert np.count_nonzero(projected) <= s
        assert np.array_equal(hard_threshold(projected, s), projected)
        # the best w on support S is v restricted to S
        best = min(
            np.linalg.norm(np.delete(v, list(support)))
            for support in itertools.combinations(range(k), s)
        )
        assert np.linalg.norm(v - projected) <= best + 1e-12


def test_hard_threshold_works_per_row():
    V = np.array([[3.0, -1.0, 2.0], [0.0, 5.0, -6.0]])
    assert np.array_equal(hard_threshold(V, 1), [[3.0, 0, 0], [0, 0, -6.0]])


def test_config_validation():
    with pytest.raises(ConfigError):
        PmlConfig(s=2, T=0)
    with pytest.raises(ConfigError):
        PmlConfig(s=2, srec_gamma=0.0)
    with pytest.raises(ConfigError):
        PmlConfig(s=2, momentum=1.0)
    with pytest.raises(ConfigError):
        PmlConfig(s=2, schedule="decaying")
    with pytest.raises(ConfigError):
        PmlConfig(s=5).validate(4)
    assert not PmlConfig(s=4).projects(4)
    assert not PmlConfig(s=2, project=False).projects(4)


def test_measurement_objective_examples():
    G, z, _ = make_instance(1)
    M = build_linear_sensor(4, 6, seed=2)
    assert measurement_objective(M.sense(G.forward(z)), z, G, M) == pytest.approx(0.0, abs=1e-12)

    zero = GeneratorModel(weights=(np.zeros((6, 3)),), biases=(np.zeros(6),))
    assert measurement_objective(np.zeros(4), z, zero, M) == pytest.approx(0.0, abs=1e-12)

    y = np.random.default_rng(0).standard_normal(4)
    x = G.forward(z)
    A = M.matrix
    residual = [y[i] - sum(A[i, j] * x[j] for j in range(6)) for i in range(4)]
    expected = np.sqrt(sum(r * r for r in residual))
    assert measurement_objective(y, z, G, M) == pytest.approx(expected, rel=1e-9)


def test_zero_step_size_returns_the_start():
    G, z_star, z0 = make_instance(2)
    M = build_linear_sensor(4, 6, seed=3)
    result = pml_inner_loop(M.sense(G.forward(z_star)), z0, G, M, PmlConfig(s=3, beta=0.0))
    assert np.array_equal(result.z_hat, z0)


def test_inner_loop_descends_on_planted_instances():
    cfg = PmlConfig(s=3, T=5, beta=0.05)
    identity = MeasurementOperator.linear(np.eye(6))
    improved = 0
    for seed in range(100):
        G, z_star, z0 = make_instance(seed)
        y = G.forward(z_star)
        result = pml_inner_loop(y, z0, G, identity, cfg)
        improved += result.objective[0] < measurement_objective(y, z0, G, identity)
    assert improved >= 95


def test_inner_loop_output_is_s_sparse():
    G = build_generator([8, 16, 12], seed=0)
    M = build_network_sensor(5, 12, seed=1)
    rng = np.random.default_rng(2)
    y = M.sense(G.forward(rng.standard_normal((10, 8))))
    for s in range(9):
        result = pml_inner_loop(y, rng.standard_normal((10, 8)), G, M, PmlConfig(s=s, beta=0.1))
        assert np.all(np.count_nonzero(result.z_hat, axis=1) <= s)


def test_diverging_samples_fall_back_to_their_best_iterate():
    G = GeneratorModel(weights=(np.eye(3),), biases=(np.zeros(3),))
    M = MeasurementOperator.linear(np.eye(3))
    result = pml_inner_loop(np.zeros(3), np.array([0.1, 0.0, 0.0]), G, M, PmlConfig(s=3, T=3, beta=100.0))
    assert result.any_diverged
    assert result.objective[0] == pytest.approx(0.1, abs=1e-6)
    np.testing.assert_allclose(result.z_hat, [0.1, 0.0, 0.0], atol=1e-6)


def test_srec_loss_examples():
    rng = np.random.default_rng(0)
    x1, x2 = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    M = build_linear_sensor(3, 5, seed=1)
    assert srec_loss(x1, x1, M, gamma=1.0, delta=0.01) == 0.0

    identity = MeasurementOperator.linear(np.eye(5))
    assert srec_loss(x1, x2, identity, gamma=1.0, delta=0.0) == pytest.approx(0.0, abs=1e-12)

    expected = np.mean(
        [
            np.linalg.norm(M.sense(a) - M.sense(b)) + 0.01 - 0.5 * np.linalg.norm(a - b)
            for a, b in zip(x1, x2)
        ]
    )
    literal = srec_loss(x1, x2, M, gamma=0.5, delta=0.01, form="literal")
    assert literal == pytest.approx(expected, rel=1e-12)

    with pytest.raises(ConfigError):
        srec_loss(x1, x2, M, gamma=0.0)


def test_generator_loss_of_one_sample():
    G, z_star, z0 = make_instance(4)
    M = build_linear_sensor(4, 6, seed=5)
    y = M.sense(G.forward(z_star))
    z_hat = hard_threshold(z0, 2)
    loss = generator_loss(y[None, :], z_hat[None, :], G, M)
    assert loss.l0 == 2
    assert loss.total == pytest.approx(measurement_objective(y, z_hat, G, M) + 2)


def unrolled_loss(G, M, y, z0, cfg):
    result = _unroll(y, z0, BoundNetwork(G), BoundSensor(M), cfg, cfg.T)
    loss = generator_loss(y, result.z_hat, G, M, cfg.eps)
    return float(loss.residual), np.asarray(result.z_hat) != 0


@pytest.mark.parametrize("sensing", ["linear", "network"])
@pytest.mark.parametrize("seed", range(50))
def test_meta_gradient_matches_finite_differences(sensing, seed):
    cfg = PmlConfig(s=2, T=3, beta=0.05)
    G = build_generator([3, 5, 4], seed)
    M = (
        build_linear_sensor(2, 4, seed + 10)
        if sensing == "linear"
        else build_network_sensor(2, 4, seed + 10, hidden=(3,))
    )
    rng = np.random.default_rng(seed)
    y = M.sense(G.forward(hard_threshold(rng.standard_normal((2, 3)), 2)))
    z0 = rng.standard_normal((2, 3))

    tape = Tape()
    gen, sensor = BoundNetwork(G, tape), BoundSensor(M, tape)
    result = _unroll(y, z0, gen, sensor, cfg, cfg.T)
    loss = generator_loss(y, result.z_hat, gen, sensor, cfg.eps).residual
    gradients = tape.backward(loss)
    _, support = unrolled_loss(G, M, y, z0, cfg)

    params = G.parameters() + M.parameters()
    n_gen = len(G.parameters())
    h = 1e-6
    checked = 0
    for p, leaf in enumerate(gen.leaves + sensor.leaves):
        for index in np.ndindex(params[p].shape):
            values = []
            for sign in (1.0, -1.0):
                shifted = [q.copy() for q in params]
                shifted[p][index] += sign * h
                value, shifted_support = unrolled_loss(
                    G.with_parameters(shifted[:n_gen]),
                    M.with_parameters(shifted[n_gen:]),
                    y,
                    z0,
                    cfg,
                )
                if not np.array_equal(shifted_support, support):
                    break
                values.append(value)
            if len(values) < 2:
                continue
            numeric = (values[0] - values[1]) / (2 * h)
            assert gradients[leaf][index] == pytest.approx(numeric, rel=1e-4, abs=1e-7)
            checked += 1
    assert checked > 0


def make_quadratic_state():
    G = GeneratorModel(weights=(np.array([[1.0, -2.0]]),), biases=(np.array([0.5]),))
    M = MeasurementOperator.linear(np.eye(1))
    return init_state(G, M, seed=0), np.array([[3.0, 1.0]])


def quadratic_loss(state, target):
    tape = Tape()
    gen, sensor = BoundNetwork(state.generator, tape), BoundSensor(state.sensor, tape)
    W = gen.leaves[0]
    return dc.mul(0.5, dc.total(dc.mul(dc.sub(W, target), dc.sub(W, target)))), gen, sensor


def test_meta_update_takes_a_gradient_step():
    state, target = make_quadratic_state()
    loss, gen, sensor = quadratic_loss(state, target)
    updated = meta_update(state, loss, gen, sensor, alpha=0.1)
    W = state.generator.weights[0]
    np.testing.assert_allclose(updated.generator.weights[0], W - 0.1 * (W - target))
    assert np.array_equal(updated.generator.biases[0], state.generator.biases[0])
    assert updated.step == 1


def test_meta_update_with_zero_step_keeps_parameters():
    state, target = make_quadratic_state()
    loss, gen, sensor = quadratic_loss(state, target)
    updated = meta_update(state, loss, gen, sensor, alpha=0.0)
    assert np.array_equal(updated.generator.weights[0], state.generator.weights[0])


def test_meta_update_accumulates_momentum():
    state, target = make_quadratic_state()
    loss, gen, sensor = quadratic_loss(state, target)
    first = meta_update(state, loss, gen, sensor, alpha=0.1, momentum=0.5)
    loss, gen, sensor = quadratic_loss(first, target)
    second = meta_update(first, loss, gen, sensor, alpha=0.1, momentum=0.5)
    g1 = state.generator.weights[0] - target
    g2 = first.generator.weights[0] - target
    np.testing.assert_allclose(
        second.generator.weights[0], first.generator.weights[0] - 0.1 * (0.5 * g1 + g2)
    )


def test_meta_update_refuses_non_finite_parameters():
    state, target = make_quadratic_state()
    loss, gen, sensor = quadratic_loss(state, target)
    with pytest.raises(NonFiniteError):
        meta_update(state, loss, gen, sensor, alpha=float("inf"))


def test_tolerance_stops_training_once_the_residual_vanishes():
    x = np.array([[0.2, 0.9, 0.4, 0.6]])
    G = GeneratorModel(weights=(np.zeros((4, 3)),), biases=(x[0],))
    M = MeasurementOperator.linear(np.eye(4))
    state = train(x, PmlConfig(s=2, batch_size=1), init_state(G, M, seed=1), max_epochs=5)
    assert state.converged
    assert state.epoch == 1
    assert state.history[0].train_residual <= 1e-3


@pytest.mark.timeout(600)
def test_realizable_sample_settles_near_its_fixed_point():
    G = build_generator([4, 8, 6], seed=0)
    z_star = hard_threshold(np.random.default_rng(0).standard_normal((1, 4)), 2)
    x = G.forward(z_star)
    M = MeasurementOperator.linear(np.eye(6))
    cfg = PmlConfig(s=2, batch_size=1, tolerance=0.0)
    state = train(x, cfg, init_state(G, M, seed=1), max_epochs=3000)
    assert not state.diverged
    residuals = [record.train_residual for record in state.history]
    assert len(residuals) == 3000
    # constant-α steps on a norm loss keep a band of width O(α) around zero
    assert np.mean(residuals[-200:]) < 0.5 * residuals[0]
    assert min(residuals) < 0.25 * residuals[0]


def train_small(s: int, project: bool, epochs: int = 3, count: int = 20):
    G = build_generator([4, 6, 9], seed=1)
    M = build_network_sensor(3, 9, seed=2)
    cfg = PmlConfig(s=s, batch_size=8, project=project, tolerance=0.0)
    images = make_images(count + 4, 9)
    return train(
        images[:count], cfg, init_state(G, M, seed=5), epochs, validation=images[count:]
    )


def test_dense_latents_match_training_without_projection():
    dense = train_small(s=4, project=True)
    unprojected = train_small(s=4, project=False)
    for p, q in zip(dense.parameters(), unprojected.parameters()):
        assert np.array_equal(p, q)
    sparse = train_small(s=2, project=True)
    assert not all(np.array_equal(p, q) for p, q in zip(sparse.parameters(), dense.parameters()))


@pytest.mark.timeout(600)
def test_dense_latents_match_training_without_projection_on_a_full_dataset():
    dense = train_small(s=4, project=True, epochs=3, count=256)
    unprojected = train_small(s=4, project=False, epochs=3, count=256)
    assert dense.epoch == unprojected.epoch == 3
    for p, q in zip(dense.parameters(), unprojected.parameters()):
        assert np.array_equal(p, q)
    assert [r.train_residual for r in dense.history] == [
        r.train_residual for r in unprojected.history
    ]


def test_training_records_every_epoch():
    records = []
    G = build_generator([4, 6, 9], seed=1)
    M = build_linear_sensor(3, 9, seed=2)
    images = make_images(12, 9)
    state = train(
        images[:8],
        PmlConfig(s=2, batch_size=4, tolerance=0.0),
        init_state(G, M, seed=0),
        2,
        validation=images[8:],
        on_epoch=records.append,
    )
    assert state.epoch == 2
    assert [r.epoch for r in records] == [1, 2]
    assert records[-1].metrics is not None
    assert records[-1].val_residual is not None
    assert records[-1].l0 <= 2
    assert state.history == tuple(records)


def test_training_stops_when_the_loss_keeps_exploding(mocker):
    losses = iter([1.0, 20.0, 30.0, 40.0, 50.0])

    def fake_batch(state, x, cfg, rng):
        stats = {"loss_g": next(losses), "loss_a": 0.0, "l0": 1.0, "relative": 1.0, "diverged": 0.0}
        return state, stats

    mocker.patch("sdlss.lib.pml._train_batch", side_effect=fake_batch)
    G = build_generator([4, 9], seed=0)
    state = train(
        make_images(4, 9),
        PmlConfig(s=2, batch_size=4),
        init_state(G, build_linear_sensor(3, 9, seed=0), seed=0),
        10,
    )
    assert state.diverged
    assert state.epoch == 4


def test_non_finite_epoch_rolls_back(mocker):
    mocker.patch("sdlss.lib.pml._train_batch", side_effect=NonFiniteError("boom"))
    G = build_generator([4, 9], seed=0)
    start = init_state(G, build_linear_sensor(3, 9, seed=0), seed=0)
    state = train(make_images(4, 9), PmlConfig(s=2, batch_size=4), start, 3)
    assert state.diverged
    assert state.epoch == 0
    assert state.generator is start.generator


def test_more_restarts_never_increase_the_objective():
    G = build_generator([6, 12, 10], seed=3)
    M = build_linear_sensor(5, 10, seed=4)
    y = M.sense(G.forward(hard_threshold(np.random.default_rng(0).standard_normal((8, 6)), 2)))
    cfg = PmlConfig(s=2, beta=0.05, eval_steps=20)
    previous = None
    for restarts in (1, 2, 4):
        result = recover(y, G, M, cfg, restarts=restarts, seed=7)
        assert np.all(np.count_nonzero(result.z_hat, axis=1) <= 2)
        if previous is not None:
            assert np.all(result.objective <= previous)
        previous = result.objective


def test_recover_is_deterministic_given_a_seed():
    G = build_generator([6, 12, 10], seed=3)
    M = build_linear_sensor(5, 10, seed=4)
    y = np.random.default_rng(1).standard_normal(5)
    cfg = PmlConfig(s=3, beta=0.05)
    a = recover(y, G, M, cfg, restarts=1, seed=2)
    b = recover(y, G, M, cfg, restarts=1, seed=2)
    assert np.array_equal(a.x_hat, b.x_hat)
    assert a.x_hat.shape == (10,)
    with pytest.raises(ConfigError):
        recover(y, G, M, cfg, restarts=0)


def test_adaptive_steps_never_increase_the_residual():
    G = build_generator([8, 16, 12], seed=0)
    M = build_network_sensor(6, 12, seed=1)
    rng = np.random.default_rng(2)
    y = M.sense(G.forward(hard_threshold(rng.standard_normal((10, 8)), 3)))
    result = adaptive_inner_loop(y, rng.standard_normal((10, 8)), G, M, PmlConfig(s=3), steps=50)
    assert np.all(np.diff(result.history, axis=0) <= 1e-12)
    assert np.all(np.count_nonzero(result.z_hat, axis=1) <= 3)
    assert not result.any_diverged
    assert np.allclose(result.objective, measurement_objective(y, result.z_hat, G, M))


def test_adaptive_steps_recover_sparse_latents_of_a_linear_generator():
    G = build_generator([6, 10], seed=4)
    M = build_linear_sensor(8, 10, seed=5)
    z_star = hard_threshold(np.random.default_rng(6).standard_normal((10, 6)), 2)
    x = G.forward(z_star)
    result = recover(M.sense(x), G, M, PmlConfig(s=2, eval_steps=500), seed=0)
    errors = np.linalg.norm(result.x_hat - x, axis=1) / np.linalg.norm(x, axis=1)
    assert np.median(errors) < 1e-6


def test_fixed_schedule_recovers_with_the_training_loop():
    G = build_generator([6, 12, 10], seed=3)
    M = build_linear_sensor(5, 10, seed=4)
    y = np.random.default_rng(1).standard_normal((3, 5))
    cfg = PmlConfig(s=2, beta=0.05, eval_steps=7, schedule="fixed")
    result = recover(y, G, M, cfg, restarts=1, seed=2)
    z0 = streams.spawn(2, 1)[0].standard_normal((3, 6))
    expected = pml_inner_loop(y, z0, G, M, cfg, steps=7)
    assert np.array_equal(result.z_hat, expected.z_hat)
    assert np.array_equal(result.objective, expected.objective)
