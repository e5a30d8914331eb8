"""Small-scale checks of the counting and measurement-count claims.

Region counts are exact: cells of a hyperplane arrangement are enumerated by
depth-first search over sign prefixes, each prefix kept only when its open
polyhedron has an interior point (one LP). For k ≤ 3 a second, independent
count perturbs every flat intersection point into all its neighbouring cells.
"""

import itertools
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from time import perf_counter

import numpy as np
from scipy.optimize import linprog

from sdlss.lib import streams
from sdlss.lib.data import PlantedInstance, sparse_latents
from sdlss.lib.errors import BudgetExceeded, ConfigError, ContractError
from sdlss.lib.models import LayeredNetwork, build_linear_sensor
from sdlss.lib.pml import PmlConfig, recover

logger = logging.getLogger(__name__)

GENERAL_POSITION_TOL = 1e-9
INTERIOR_TOL = 1e-9
MAX_HYPERPLANES = 12
MAX_VERTEX_DIM = 3
RESTRICTED_BUDGET = 2**20
MAX_REJECTIONS = 1000
SREC_CHUNKS = 16


@dataclass(frozen=True)
class ArrangementSpec:
    """h affine hyperplanes {x : a_i·x = b_i} in R^k, restricted to s-coordinate subspaces."""

    normals: np.ndarray
    offsets: np.ndarray
    s: int | None = None

    def __post_init__(self) -> None:
        normals = np.atleast_2d(np.asarray(self.normals, dtype=np.float64))
        offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1)
        if normals.shape[0] != offsets.shape[0]:
            raise ConfigError(f"{normals.shape[0]} normals but {offsets.shape[0]} offsets")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        if self.s is not None and not 1 <= self.s <= self.k:
            raise ConfigError(f"subspace dimension must lie in [1, {self.k}], got {self.s}")

    @property
    def k(self) -> int:
        return self.normals.shape[1]

    @property
    def h(self) -> int:
        return self.normals.shape[0]

    @property
    def subspace_dim(self) -> int:
        return self.k if self.s is None else self.s

    def restricted(self, coordinates: Sequence[int]) -> "ArrangementSpec":
        return ArrangementSpec(self.normals[:, list(coordinates)], self.offsets)


def is_general_position(
    normals: np.ndarray, offsets: np.ndarray, tol: float = GENERAL_POSITION_TOL
) -> bool:
    """Every j ≤ k normals independent and no k+1 hyperplanes through one point."""
    h, k = normals.shape
    for j in range(1, min(h, k) + 1):
        for rows in itertools.combinations(range(h), j):
            if np.linalg.svd(normals[list(rows)], compute_uv=False)[-1] < tol:
                return False
    if h > k:
        augmented = np.hstack([normals, offsets[:, None]])
        for rows in itertools.combinations(range(h), k + 1):
            if abs(np.linalg.det(augmented[list(rows)])) < tol:
                return False
    return True


def random_arrangement(k: int, h: int, seed: int, s: int | None = None) -> ArrangementSpec:
    """Gaussian normals and offsets, resampled until in general position
    (in R^k and in every s-coordinate subspace when `s` is given)."""
    if k < 1 or h < 0:
        raise ConfigError(f"need k >= 1 and h >= 0, got k={k}, h={h}")
    rng = np.random.default_rng(seed)
    for attempt in range(MAX_REJECTIONS):
        normals = rng.standard_normal((h, k))
        offsets = rng.standard_normal(h)
        subspaces = (
            itertools.combinations(range(k), s) if s is not None else [tuple(range(k))]
        )
        if all(is_general_position(normals[:, list(c)], offsets) for c in subspaces):
            if attempt:
                logger.debug(f"Rejected {attempt} degenerate arrangements")
            return ArrangementSpec(normals, offsets, s)
    raise ContractError(f"no general-position arrangement after {MAX_REJECTIONS} draws")


def general_position_count(h: int, k: int) -> int:
    """Σ_{i=0}^{k} C(h, i): cells of h hyperplanes in general position in R^k."""
    return sum(math.comb(h, i) for i in range(k + 1))


def _has_interior(normals: np.ndarray, offsets: np.ndarray, signs: np.ndarray) -> bool:
    # maximise t subject to σ_i (a_i·x − b_i) ≥ t, t ≤ 1
    k = normals.shape[1]
    a_ub = np.hstack([-signs[:, None] * normals, np.ones((len(signs), 1))])
    b_ub = -signs * offsets
    cost = np.zeros(k + 1)
    cost[-1] = -1.0
    bounds = [(None, None)] * k + [(None, 1.0)]
    result = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if result.status != 0:
        raise ContractError(f"cell feasibility LP failed: {result.message}")
    return -result.fun > INTERIOR_TOL


def _count_by_search(normals: np.ndarray, offsets: np.ndarray) -> int:
    h = normals.shape[0]
    count = 0
    stack: list[tuple[float, ...]] = [()]
    while stack:
        prefix = stack.pop()
        if len(prefix) == h:
            count += 1
            continue
        depth = len(prefix) + 1
        for sign in (1.0, -1.0):
            signs = np.array(prefix + (sign,))
            if _has_interior(normals[:depth], offsets[:depth], signs):
                stack.append(prefix + (sign,))
    return count


def _count_by_vertices(normals: np.ndarray, offsets: np.ndarray) -> int:
    """Sign vectors of points pushed off every flat intersection into each adjacent cell."""
    h, k = normals.shape
    patterns: set[bytes] = set()
    for j in range(min(h, k) + 1):
        for rows in itertools.combinations(range(h), j):
            chosen = list(rows)
            others = [i for i in range(h) if i not in rows]
            if j:
                a = normals[chosen]
                point = np.linalg.lstsq(a, offsets[chosen], rcond=None)[0]
                pinv = np.linalg.pinv(a)
            else:
                point = np.zeros(k)
                pinv = np.zeros((k, 0))
            residual = normals[others] @ point - offsets[others]
            for signs in itertools.product((1.0, -1.0), repeat=j):
                step = pinv @ np.array(signs)
                drift = np.abs(normals[others] @ step)
                scale = 1.0
                if others and drift.max() > 0:
                    scale = min(1.0, 0.5 * np.abs(residual).min() / drift.max())
                x = point + scale * step
                patterns.add((normals @ x - offsets > 0).tobytes())
    return len(patterns)


def count_regions_exact(spec: ArrangementSpec, max_hyperplanes: int = MAX_HYPERPLANES) -> int:
    """Number of nonempty open cells of the arrangement in R^k."""
    if spec.h > max_hyperplanes and spec.k > MAX_VERTEX_DIM:
        raise BudgetExceeded(
            f"exact counting of {spec.h} hyperplanes in R^{spec.k} exceeds the budget "
            f"(k <= {MAX_VERTEX_DIM} or h <= {max_hyperplanes})"
        )
    if spec.h == 0:
        return 1
    start = perf_counter()
    count = _count_by_search(spec.normals, spec.offsets)
    if spec.k <= MAX_VERTEX_DIM:
        by_vertices = _count_by_vertices(spec.normals, spec.offsets)
        if by_vertices != count:
            raise ContractError(
                f"cell counts disagree: {count} by search, {by_vertices} by vertices"
            )
    logger.debug(
        f"Counted {count} cells of {spec.h} hyperplanes in R^{spec.k} "
        f"in {(perf_counter() - start) * 1000:.0f} ms"
    )
    return count


def count_regions_restricted(
    spec: ArrangementSpec, budget: int = RESTRICTED_BUDGET
) -> int:
    """Total cells over all C(k, s) coordinate subspaces, each partitioned on its own."""
    s = spec.subspace_dim
    subspaces = math.comb(spec.k, s)
    if subspaces * 2**spec.h > budget:
        raise BudgetExceeded(
            f"C({spec.k},{s})·2^{spec.h} = {subspaces * 2**spec.h} exceeds the budget {budget}"
        )
    return sum(
        count_regions_exact(spec.restricted(c)) for c in itertools.combinations(range(spec.k), s)
    )


def count_generator_pieces(
    G: LayeredNetwork,
    s: int,
    samples: int,
    seed: int,
    box: float = 3.0,
    constant: float = 1.0,
) -> int:
    """Distinct hidden-unit activation patterns over sampled s-sparse inputs in [−box, box]^k.

    A lower bound on the number of linear pieces of G over s-sparse latents.
    Raises ContractError when it exceeds pieces_ceiling(k, width, pieces, s,
    depth, constant).
    """
    k = G.input_dim
    if not 1 <= s <= k:
        raise ConfigError(f"sparsity must lie in [1, {k}], got {s}")
    rng = np.random.default_rng(seed)
    latents = np.zeros((samples, k))
    for row in latents:
        support = rng.choice(k, size=s, replace=False)
        row[support] = rng.uniform(-box, box, size=s)
    patterns = G.activation_patterns(latents)
    count = len({p.tobytes() for p in patterns})
    ceiling = pieces_ceiling(k, G.width, G.pieces, s, G.depth, constant)
    if count > ceiling:
        raise ContractError(
            f"{count} linear pieces over {s}-sparse latents exceed the ceiling {ceiling:.4g}"
        )
    logger.debug(f"{count} linear pieces over {s}-sparse latents, ceiling {ceiling:.4g}")
    return count


def pieces_ceiling(k: int, h: int, t: int, s: int, d: int, constant: float = 1.0) -> float:
    """C·(kht/s)^(sd): ceiling on the linear pieces of G over s-sparse latents."""
    return constant * (k * h * t / s) ** (s * d)


def measurement_count(k: int, h: int, t: int, s: int, d: int, alpha: float) -> float:
    """s·d·log(kht/s)/α²; measurements suffice up to an unknown constant factor."""
    return s * d * math.log(k * h * t / s) / alpha**2


@dataclass
class SrecReport:
    m: int
    alpha: float
    trials: int
    violations: int
    bound_note: str = ""

    @property
    def gamma_target(self) -> float:
        return 1.0 - self.alpha

    @property
    def empirical_rate(self) -> float:
        return self.violations / self.trials if self.trials else 0.0

    @property
    def stderr(self) -> float:
        p = self.empirical_rate
        return math.sqrt(p * (1.0 - p) / self.trials) if self.trials else 0.0


def _srec_chunk(
    G: LayeredNetwork, s: int, m: int, alpha: float, delta: float, trials: int, rng: np.random.Generator
) -> int:
    k, n = G.input_dim, G.output_dim
    violations = 0
    for _ in range(trials):
        A = rng.normal(0.0, 1.0 / math.sqrt(m), size=(m, n))
        x1, x2 = G.forward(sparse_latents(2, k, s, rng))
        gap = x1 - x2
        if np.linalg.norm(A @ gap) < (1.0 - alpha) * np.linalg.norm(gap) - delta:
            violations += 1
    return violations


def verify_srec(
    G: LayeredNetwork,
    s: int,
    m: int,
    alpha: float,
    trials: int,
    seed: int,
    delta: float = 0.0,
    threads: int = 1,
) -> SrecReport:
    """Monte-Carlo rate of ‖A(x1 − x2)‖ < (1 − α)‖x1 − x2‖ − δ with a fresh
    A ~ N(0, 1/m) and fresh s-sparse latents per trial.

    Trials run in fixed chunks with their own streams, so `threads` never
    changes the result.
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"α must lie in (0, 1), got {alpha}")
    if m < 1 or trials < 1:
        raise ConfigError(f"need m >= 1 and trials >= 1, got m={m}, trials={trials}")
    sizes = [len(c) for c in np.array_split(np.arange(trials), SREC_CHUNKS) if len(c)]
    rngs = streams.spawn([seed, m], len(sizes))
    start = perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        counts = list(
            pool.map(
                lambda job: _srec_chunk(G, s, m, alpha, delta, job[0], job[1]),
                zip(sizes, rngs),
            )
        )
    t = G.pieces
    d = G.depth
    needed = measurement_count(G.input_dim, G.width, t, s, d, alpha)
    report = SrecReport(
        m=m,
        alpha=alpha,
        trials=trials,
        violations=int(sum(counts)),
        bound_note=f"s*d*log(kht/s)/alpha^2={needed:.1f}",
    )
    logger.info(
        f"S-REC m={m}: {report.violations}/{trials} violations "
        f"(rate {report.empirical_rate:.4f} ± {report.stderr:.4f}) "
        f"in {perf_counter() - start:.1f} s"
    )
    return report


def srec_sweep(
    G: LayeredNetwork,
    s: int,
    m_values: Sequence[int],
    alpha: float,
    trials: int,
    seed: int,
    threads: int = 1,
) -> list[SrecReport]:
    return [verify_srec(G, s, m, alpha, trials, seed, threads=threads) for m in m_values]


def is_non_increasing(values: Sequence[float], errors: Sequence[float], width: float = 2.0) -> bool:
    """No value exceeds an earlier one by more than `width` combined standard errors."""
    for i in range(1, len(values)):
        for j in range(i):
            slack = width * math.hypot(errors[i], errors[j])
            if values[i] > values[j] + slack:
                return False
    return True


@dataclass
class SweepRow:
    m: int
    median_rel_err: float
    q25: float
    q75: float
    instances: int


def sample_complexity_sweep(
    planted: PlantedInstance,
    m_values: Sequence[int],
    cfg: PmlConfig,
    seed: int,
    restarts: int | None = None,
) -> list[SweepRow]:
    """Median relative recovery error ‖x̂ − x‖/‖x‖ per measurement count.

    One sensing matrix per m is shared by all instances; recovery uses the
    planted sparsity.
    """
    if len(planted) < 30:
        logger.warning(f"Sweeping over only {len(planted)} planted instances")
    cfg = replace(cfg, s=planted.s_true)
    rows = []
    norms = np.linalg.norm(planted.signals, axis=1)
    for m in m_values:
        start = perf_counter()
        sensor = build_linear_sensor(
            m, planted.n, streams.stream_seed(seed + m, "sensor"), allow_expansion=True
        )
        result = recover(
            sensor.sense(planted.signals),
            planted.generator,
            sensor,
            cfg,
            restarts=restarts,
            seed=streams.stream_seed(seed + m, "latent"),
        )
        errors = np.linalg.norm(result.x_hat - planted.signals, axis=1) / np.maximum(
            norms, 1e-300
        )
        q25, median, q75 = np.percentile(errors, [25, 50, 75])
        rows.append(SweepRow(m, float(median), float(q25), float(q75), len(errors)))
        logger.info(
            f"Sweep m={m}: median relative error {median:.4f} "
            f"[{q25:.4f}, {q75:.4f}] in {perf_counter() - start:.1f} s"
        )
    return rows
