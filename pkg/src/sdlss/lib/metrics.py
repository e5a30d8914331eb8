import logging
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from sdlss.lib.errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

CLAMP_DB = 120.0
PSNR_FORMS = ("per-pixel", "literal")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricsRecord:
    experiment: str
    epoch: int
    m: int
    k: int
    s: int
    psnr_db: float
    ssim: float
    re_db: float
    n_images: int
    psnr_se: float = 0.0
    ssim_se: float = 0.0
    re_se: float = 0.0


def _squared_error(x: np.ndarray, x_hat: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DimensionError(f"images differ in shape: {x.shape} vs {x_hat.shape}")
    return float(np.sum((x - x_hat) ** 2))


def _to_db(ratio: float, sign: float) -> float:
    if ratio <= 0:
        logger.warning(f"Identical images, clamping to {-sign * CLAMP_DB:+.0f} dB")
        return -sign * CLAMP_DB
    value = sign * 10.0 * np.log10(ratio)
    if abs(value) > CLAMP_DB:
        logger.warning(f"{value:.1f} dB is beyond the ±{CLAMP_DB:.0f} dB clamp")
        return float(np.clip(value, -CLAMP_DB, CLAMP_DB))
    return float(value)


def reconstruction_error_db(x: np.ndarray, x_hat: np.ndarray, n: int | None = None) -> float:
    """Per-pixel reconstruction error 10·log10(‖x − x̂‖²/n)."""
    sse = _squared_error(x, x_hat)
    return _to_db(sse / (n or np.size(x)), 1.0)


def psnr_db(
    x: np.ndarray, x_hat: np.ndarray, n: int | None = None, form: str = "per-pixel"
) -> float:
    """PSNR with unit peak; per-pixel MSE unless `form` is "literal" (total SSE)."""
    if form not in PSNR_FORMS:
        raise ConfigError(f"unknown PSNR form {form!r}")
    sse = _squared_error(x, x_hat)
    if form == "literal":
        return _to_db(sse, -1.0)
    return _to_db(sse / (n or np.size(x)), -1.0)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    y, x = np.ogrid[-half : half + 1, -half : half + 1]
    window = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return window / window.sum()


def _ssim_terms(
    mu1: np.ndarray,
    mu2: np.ndarray,
    var1: np.ndarray,
    var2: np.ndarray,
    cov: np.ndarray,
    c1: float,
    c2: float,
) -> np.ndarray:
    return ((2 * mu1 * mu2 + c1) * (2 * cov + c2)) / (
        (mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2)
    )


def _ssim_channel(
    a: np.ndarray, b: np.ndarray, window: np.ndarray, c1: float, c2: float
) -> float:
    if a.shape[0] < window.shape[0] or a.shape[1] < window.shape[1]:
        mu1, mu2 = a.mean(), b.mean()
        return float(
            _ssim_terms(
                mu1, mu2, a.var(), b.var(), ((a - mu1) * (b - mu2)).mean(), c1, c2
            )
        )

    def filt(img: np.ndarray) -> np.ndarray:
        return convolve2d(img, np.rot90(window, 2), mode="valid")

    mu1, mu2 = filt(a), filt(b)
    var1 = filt(a * a) - mu1 * mu1
    var2 = filt(b * b) - mu2 * mu2
    cov = filt(a * b) - mu1 * mu2
    return float(np.mean(_ssim_terms(mu1, mu2, var1, var2, cov, c1, c2)))


def ssim(
    x: np.ndarray,
    x_hat: np.ndarray,
    window: int = SSIM_WINDOW,
    K1: float = SSIM_K1,
    K2: float = SSIM_K2,
    sigma: float = SSIM_SIGMA,
    data_range: float = 1.0,
) -> float:
    """Mean local SSIM of 2-D (or rows×cols×channels) images.

    Images smaller than the window fall back to one global SSIM.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"images differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise DimensionError(f"SSIM needs 2-D images, got shape {a.shape}")
    if min(a.shape[:2]) < window:
        logger.warning(
            f"Image {a.shape[:2]} smaller than the {window}×{window} window, using one global SSIM"
        )
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    kernel = gaussian_window(window, sigma)
    values = [
        _ssim_channel(a[..., c], b[..., c], kernel, c1, c2) for c in range(a.shape[2])
    ]
    return float(np.mean(values))


def batch_summary(values: np.ndarray | list[float]) -> tuple[float, float]:
    """Mean and population standard error."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        return float("nan"), float("nan")
    return float(array.mean()), float(array.std() / np.sqrt(array.size))


def per_image_metrics(
    x: np.ndarray,
    x_hat: np.ndarray,
    image_shape: tuple[int, ...],
    psnr_form: str = "per-pixel",
) -> dict[str, np.ndarray]:
    """PSNR, SSIM and RE for every row of a batch of flattened images."""
    x = np.atleast_2d(x)
    x_hat = np.atleast_2d(x_hat)
    psnr = [psnr_db(a, b, form=psnr_form) for a, b in zip(x, x_hat)]
    re = [reconstruction_error_db(a, b) for a, b in zip(x, x_hat)]
    structural = [
        ssim(a.reshape(image_shape), b.reshape(image_shape)) for a, b in zip(x, x_hat)
    ]
    return {"psnr": np.array(psnr), "ssim": np.array(structural), "re": np.array(re)}


def summarize(
    x: np.ndarray,
    x_hat: np.ndarray,
    image_shape: tuple[int, ...],
    experiment: str,
    epoch: int,
    m: int,
    k: int,
    s: int,
    psnr_form: str = "per-pixel",
) -> MetricsRecord:
    values = per_image_metrics(x, x_hat, image_shape, psnr_form)
    psnr, psnr_se = batch_summary(values["psnr"])
    structural, ssim_se = batch_summary(values["ssim"])
    re, re_se = batch_summary(values["re"])
    return MetricsRecord(
        experiment=experiment,
        epoch=epoch,
        m=m,
        k=k,
        s=s,
        psnr_db=psnr,
        ssim=structural,
        re_db=re,
        n_images=len(values["psnr"]),
        psnr_se=psnr_se,
        ssim_se=ssim_se,
        re_se=re_se,
    )
