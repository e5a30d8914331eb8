import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from sdlss.lib import streams
from sdlss.lib.checkpoint import Checkpoint, image_shape, require_sensor
from sdlss.lib.command import BaseCommand, switch
from sdlss.lib.data import iterate_batches, load_dataset
from sdlss.lib.errors import ConfigError, FormatError
from sdlss.lib.metrics import MetricsRecord, batch_summary, per_image_metrics
from sdlss.lib.pml import PmlConfig, default_image_shape, recover
from sdlss.lib.reporting import CsvSchema, metrics_row, table_line, write_csv
from sdlss.reconstruct import add_recovery_arguments, open_checkpoint, recovery_config
from sdlss.train import add_dataset_arguments

logger = logging.getLogger(__name__)


def _record(values: dict[str, np.ndarray], checkpoint: Checkpoint, s: int, experiment: str) -> MetricsRecord:
    psnr, psnr_se = batch_summary(values["psnr"])
    ssim, ssim_se = batch_summary(values["ssim"])
    re, re_se = batch_summary(values["re"])
    assert checkpoint.sensor is not None
    return MetricsRecord(
        experiment=experiment,
        epoch=int(checkpoint.config.get("epochs_run", "0") or 0),
        m=checkpoint.sensor.m,
        k=checkpoint.generator.latent_dim,
        s=s,
        psnr_db=psnr,
        ssim=ssim,
        re_db=re,
        n_images=len(values["psnr"]),
        psnr_se=psnr_se,
        ssim_se=ssim_se,
        re_se=re_se,
    )


class EvaluateCommand(BaseCommand):
    name = "eval"
    description = "Report PSNR, SSIM and RE of trained checkpoints on test images."

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--checkpoints", help="comma-separated checkpoint files")
        add_dataset_arguments(parser, "test")
        parser.add_argument("--test-size", type=int, help="number of test images (default all)")
        parser.add_argument("--batch-size", type=int, default=64)
        parser.add_argument("--sparsity-sweep", choices=("on", "off"), default="off")
        add_recovery_arguments(parser)

    def evaluate(
        self, path: str, images: np.ndarray, shape: tuple[int, ...] | None
    ) -> tuple[MetricsRecord, MetricsRecord]:
        """Metrics of the first batch and batch-granular metrics of the full set."""
        args = self.args
        checkpoint = open_checkpoint(path)
        sensor = require_sensor(checkpoint, Path(path))
        if images.shape[1] != checkpoint.generator.signal_dim:
            raise FormatError(
                f"{path} generates {checkpoint.generator.signal_dim} pixels, "
                f"the test images have {images.shape[1]}"
            )
        cfg: PmlConfig = recovery_config(args, checkpoint)
        shape = shape or image_shape(checkpoint) or default_image_shape(images.shape[1])
        seed = streams.stream_seed(args.seed, "latent")

        batch_means: dict[str, list[float]] = {"psnr": [], "ssim": [], "re": []}
        first: dict[str, np.ndarray] = {}
        for b, batch in enumerate(iterate_batches(len(images), args.batch_size)):
            x = images[batch]
            result = recover(sensor.sense(x), checkpoint.generator, sensor, cfg, seed=seed + b)
            values = per_image_metrics(
                x, np.clip(result.x_hat, 0.0, 1.0), shape, args.psnr_form
            )
            if not first:
                first = values
            for key in batch_means:
                batch_means[key].append(float(values[key].mean()))

        batch_record = _record(first, checkpoint, cfg.s, f"{path}:batch")
        full_record = _record(
            {key: np.array(v) for key, v in batch_means.items()}, checkpoint, cfg.s, f"{path}:full"
        )
        full_record.n_images = len(images)
        return batch_record, full_record

    def execute(self) -> None:
        args = self.args
        paths = [p.strip() for p in (args.checkpoints or "").split(",") if p.strip()]
        if not paths:
            raise ConfigError("no checkpoints given")
        if args.batch_size < 1:
            raise ConfigError(f"--batch-size must be >= 1, got {args.batch_size}")
        dataset = load_dataset(args.dataset, args.data_path, args.split).subset(args.test_size)

        rows, sweep = [], []
        for path in paths:
            batch, full = self.evaluate(path, dataset.images, dataset.shape)
            for scope, record in (("batch", batch), ("full", full)):
                rows.append({"checkpoint": path, "scope": scope} | metrics_row(record))
                print(table_line(f"{path} [{scope}]", record))
            sweep.append(
                {
                    "checkpoint": path,
                    "m": full.m,
                    "k": full.k,
                    "s": full.s,
                    "re": full.re_db,
                    "re_se": full.re_se,
                    "psnr": full.psnr_db,
                    "ssim": full.ssim,
                }
            )

        write_csv(self.artifact("evaluation.csv"), CsvSchema.Evaluation, rows)
        if switch(args.sparsity_sweep):
            sweep.sort(key=lambda row: row["s"])
            write_csv(self.artifact("sparsity_sweep.csv"), CsvSchema.SparsitySweep, sweep)
            interior = [row["re"] for row in sweep[1:-1]]
            if len(sweep) >= 3 and interior:
                best = min(interior)
                margin = min(sweep[0]["re"], sweep[-1]["re"]) - best
                print(f"Interior RE minimum beats both endpoints by {margin:.2f} dB")


def main() -> None:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s"
    )
    sys.exit(EvaluateCommand().run())


if __name__ == "__main__":
    main()
