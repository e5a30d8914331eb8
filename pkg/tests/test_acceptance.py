"""Full-scale runs: deselected by default, run with `pytest -m slow`."""

import math
import os
from pathlib import Path

import numpy as np
import pytest

from sdlss.evaluate import EvaluateCommand
from sdlss.lib.data import DATA_DIR_ENV, FASHION_MNIST_FILES, make_planted
from sdlss.lib.models import build_generator
from sdlss.lib.pml import PmlConfig
from sdlss.lib.reporting import read_csv
from sdlss.lib.theory import (
    count_regions_exact,
    count_regions_restricted,
    general_position_count,
    is_non_increasing,
    random_arrangement,
    sample_complexity_sweep,
    srec_sweep,
)
from sdlss.train import TrainCommand

pytestmark = pytest.mark.slow


def fashion_mnist_available() -> bool:
    root = os.getenv(DATA_DIR_ENV)
    return bool(root) and all((Path(root) / name).exists() for name in FASHION_MNIST_FILES.values())


needs_fashion_mnist = pytest.mark.skipif(
    not fashion_mnist_available(), reason=f"{DATA_DIR_ENV} does not hold Fashion-MNIST"
)


def make_training(output: Path, **overrides: object) -> Path:
    values = {
        "k": 784,
        "s": 200,
        "m": 10,
        "train_size": 10000,
        "batch_size": 64,
        "epochs": 10,
    } | overrides
    argv = ["--output-dir", str(output)]
    for key, value in values.items():
        argv += [f"--{key.replace('_', '-')}", str(value)]
    assert TrainCommand(argv).run() == 0
    return output / "checkpoint.sdls"


def make_evaluation(output: Path, checkpoints: list[Path], *extra: str) -> list[dict[str, str]]:
    argv = [
        "--checkpoints", ",".join(str(p) for p in checkpoints),
        "--test-size", "64",
        "--output-dir", str(output),
        *extra,
    ]
    assert EvaluateCommand(argv).run() == 0
    return read_csv(output / "evaluation.csv")


def test_region_counts_of_random_arrangements():
    rng = np.random.default_rng(0)
    for seed in range(50):
        k, h = int(rng.integers(1, 4)), int(rng.integers(1, 11))
        spec = random_arrangement(k, h, seed)
        assert count_regions_exact(spec) == general_position_count(h, k)

    spec = random_arrangement(4, 6, seed=7, s=2)
    assert count_regions_restricted(spec) == math.comb(4, 2) * general_position_count(6, 2)


@pytest.mark.timeout(1800)
def test_srec_violation_rate_falls_with_m():
    G = build_generator([16, 32, 64], seed=0)
    reports = srec_sweep(G, 4, [2, 4, 8, 16, 32, 64], alpha=0.5, trials=10000, seed=0, threads=4)
    assert is_non_increasing([r.empirical_rate for r in reports], [r.stderr for r in reports])
    assert reports[-1].empirical_rate < 0.01


@pytest.mark.timeout(3600)
def test_recovery_phase_behaviour_on_planted_instances():
    planted = make_planted(k=20, s_true=3, n=100, count=50, seed=0, hidden=(32,))
    cfg = PmlConfig(s=3, beta=0.01, eval_steps=1000, restarts=3)
    low, high = sample_complexity_sweep(planted, [2, 40], cfg, seed=0)
    assert high.median_rel_err < 0.05
    assert low.median_rel_err > 0.2


@needs_fashion_mnist
@pytest.mark.timeout(7200)
def test_fashion_mnist_sdlss_beats_dcs(tmp_path):
    sdlss = make_training(tmp_path / "sdlss")
    dcs = make_training(tmp_path / "dcs", s=784)
    rows = make_evaluation(tmp_path / "eval", [sdlss, dcs])
    batch = {row["checkpoint"]: row for row in rows if row["scope"] == "batch"}

    psnr = float(batch[str(sdlss)]["psnr"])
    assert abs(psnr - 18.71) <= 2.0
    assert float(batch[str(sdlss)]["ssim"]) >= 0.70
    assert psnr >= float(batch[str(dcs)]["psnr"])


@needs_fashion_mnist
@pytest.mark.timeout(6 * 3600)
def test_reconstruction_error_has_an_interior_minimum_in_sparsity(tmp_path):
    checkpoints = [
        make_training(tmp_path / f"s{s}", s=s) for s in (10, 50, 100, 200, 400, 784)
    ]
    make_evaluation(tmp_path / "eval", checkpoints, "--sparsity-sweep", "on")
    sweep = read_csv(tmp_path / "eval" / "sparsity_sweep.csv")
    re = [float(row["re"]) for row in sweep]
    assert min(re[0], re[-1]) - min(re[1:-1]) >= 0.3


@needs_fashion_mnist
@pytest.mark.timeout(12 * 3600)
@pytest.mark.parametrize("k", [100, 784])
def test_nonlinear_sensing_validates_better_than_linear(tmp_path, k):
    final_re = {}
    for sensing in ("linear", "network"):
        output = tmp_path / sensing
        make_training(output, k=k, s=k, m=5, epochs=50, sensing=sensing, tolerance=0.0)
        final_re[sensing] = float(read_csv(output / "epochs.csv")[-1]["val_re"])
    assert final_re["network"] < final_re["linear"]
