import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from sdlss.lib import streams
from sdlss.lib.checkpoint import (
    Checkpoint,
    image_shape,
    load_checkpoint,
    require_sensor,
    trained_sparsity,
)
from sdlss.lib.command import BaseCommand, int_list
from sdlss.lib.data import grid_suffix, load_dataset, write_image_grid
from sdlss.lib.errors import ConfigError, FormatError
from sdlss.lib.metrics import per_image_metrics
from sdlss.lib.pml import STEP_SCHEDULES, PmlConfig, default_image_shape, recover
from sdlss.lib.reporting import CsvSchema, write_csv
from sdlss.train import add_dataset_arguments

logger = logging.getLogger(__name__)


def add_recovery_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--s", type=int, help="latent sparsity (default: the trained s)")
    parser.add_argument("--eval-steps", type=int, default=10)
    parser.add_argument("--restarts", type=int, default=3)
    parser.add_argument("--beta", type=float, default=0.01)
    parser.add_argument("--step-schedule", choices=STEP_SCHEDULES, default="adaptive")
    parser.add_argument("--psnr-form", choices=("per-pixel", "literal"), default="per-pixel")


def open_checkpoint(path: str | None) -> Checkpoint:
    if not path:
        raise ConfigError("no checkpoint given")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    return load_checkpoint(Path(path))


def recovery_config(args: argparse.Namespace, checkpoint: Checkpoint) -> PmlConfig:
    k = checkpoint.generator.latent_dim
    return PmlConfig(
        s=trained_sparsity(checkpoint) if args.s is None else args.s,
        beta=args.beta,
        eval_steps=args.eval_steps,
        restarts=args.restarts,
        schedule=args.step_schedule,
    ).validate(k)


class ReconstructCommand(BaseCommand):
    name = "reconstruct"
    description = "Recover signals from measurements with a trained checkpoint."

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--checkpoint")
        add_dataset_arguments(parser, "test")
        parser.add_argument("--measurements", help=".npy file of measurement rows")
        parser.add_argument("--count", type=int, default=64)
        parser.add_argument("--image-shape", help="rows,cols[,channels] for the image grid")
        add_recovery_arguments(parser)

    def signals(self, checkpoint: Checkpoint) -> tuple[np.ndarray | None, np.ndarray]:
        args = self.args
        sensor = require_sensor(checkpoint, Path(args.checkpoint))
        if args.measurements:
            try:
                y = np.atleast_2d(np.load(Path(args.measurements), allow_pickle=False))
            except (OSError, ValueError) as e:
                raise FormatError(f"cannot read measurements {args.measurements}: {e}") from e
            if y.shape[1] != sensor.m:
                raise FormatError(
                    f"{args.measurements} holds {y.shape[1]} measurements per row, "
                    f"the checkpoint senses {sensor.m}"
                )
            return None, y.astype(np.float64)[: args.count]

        dataset = load_dataset(args.dataset, args.data_path, args.split).subset(args.count)
        if dataset.n != checkpoint.generator.signal_dim:
            raise FormatError(
                f"{args.checkpoint} generates {checkpoint.generator.signal_dim} pixels, "
                f"the dataset has {dataset.n}"
            )
        return dataset.images, sensor.sense(dataset.images)

    def execute(self) -> None:
        args = self.args
        checkpoint = open_checkpoint(args.checkpoint)
        cfg = recovery_config(args, checkpoint)
        truth, y = self.signals(checkpoint)
        assert checkpoint.sensor is not None

        result = recover(
            y,
            checkpoint.generator,
            checkpoint.sensor,
            cfg,
            seed=streams.stream_seed(args.seed, "latent"),
        )
        x_hat = np.atleast_2d(result.x_hat)
        z_hat = np.atleast_2d(result.z_hat)
        shape = (
            tuple(int_list(args.image_shape))
            if args.image_shape
            else image_shape(checkpoint) or default_image_shape(x_hat.shape[1])
        )

        suffix = grid_suffix(shape)
        write_image_grid(
            np.clip(x_hat, 0.0, 1.0), shape, self.artifact(f"reconstructions{suffix}")
        )
        metrics: dict[str, np.ndarray] = {}
        if truth is not None:
            write_image_grid(truth, shape, self.artifact(f"originals{suffix}"))
            metrics = per_image_metrics(truth, np.clip(x_hat, 0.0, 1.0), shape, args.psnr_form)
        else:
            logger.info("No ground truth supplied, metric columns stay empty")

        rows = [
            {
                "index": i,
                "psnr": float(metrics["psnr"][i]) if metrics else None,
                "ssim": float(metrics["ssim"][i]) if metrics else None,
                "re": float(metrics["re"][i]) if metrics else None,
                "objective": float(result.objective[i]),
                "nnz": int(np.count_nonzero(z_hat[i])),
            }
            for i in range(len(x_hat))
        ]
        write_csv(self.artifact("reconstruction.csv"), CsvSchema.Reconstruction, rows)


def main() -> None:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s"
    )
    sys.exit(ReconstructCommand().run())


if __name__ == "__main__":
    main()
