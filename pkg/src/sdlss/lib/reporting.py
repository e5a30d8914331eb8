import csv
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

from sdlss.lib.metrics import MetricsRecord

logger = logging.getLogger(__name__)


class CsvSchema:
    """Column order of every CSV artifact; bump VERSION on any change."""

    VERSION = 1

    TrainEpochs = (
        "experiment",
        "epoch",
        "m",
        "k",
        "s",
        "loss_g",
        "loss_a",
        "l0",
        "train_rel_residual",
        "val_residual",
        "val_psnr",
        "val_ssim",
        "val_re",
    )
    Reconstruction = ("index", "psnr", "ssim", "re", "objective", "nnz")
    Evaluation = (
        "checkpoint",
        "scope",
        "m",
        "k",
        "s",
        "n_images",
        "psnr",
        "psnr_se",
        "ssim",
        "ssim_se",
        "re",
        "re_se",
    )
    SparsitySweep = ("checkpoint", "m", "k", "s", "re", "re_se", "psnr", "ssim")
    Regions = ("k", "h", "s", "seed", "count", "expected", "status")
    Srec = ("m", "alpha", "trials", "violations", "rate", "stderr", "bound_note")
    Sweep = ("m", "median_rel_err", "q25", "q75", "instances")


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict[str, Any]]) -> Path:
    """UTF-8, comma separated, header row, cells in `columns` order."""
    count = 0
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])
            count += 1
    logger.info(f"Wrote {count} rows to {path}")
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def metrics_row(record: MetricsRecord) -> dict[str, Any]:
    return {
        "m": record.m,
        "k": record.k,
        "s": record.s,
        "n_images": record.n_images,
        "psnr": record.psnr_db,
        "psnr_se": record.psnr_se,
        "ssim": record.ssim,
        "ssim_se": record.ssim_se,
        "re": record.re_db,
        "re_se": record.re_se,
    }


def table_line(label: str, record: MetricsRecord) -> str:
    return (
        f"{label}: PSNR {record.psnr_db:.2f} ± {record.psnr_se:.2f} dB, "
        f"SSIM {record.ssim:.3f} ± {record.ssim_se:.3f}, "
        f"RE {record.re_db:.2f} ± {record.re_se:.2f} dB (n={record.n_images})"
    )
