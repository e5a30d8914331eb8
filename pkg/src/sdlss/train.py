import argparse
import logging
import sys

from sdlss.lib import streams
from sdlss.lib.checkpoint import Checkpoint, save_checkpoint
from sdlss.lib.command import BaseCommand, int_list, switch
from sdlss.lib.data import ImageDataset, load_dataset
from sdlss.lib.diffcore import Activation
from sdlss.lib.errors import ConfigError
from sdlss.lib.models import (
    OUTPUT_HEADS,
    SENSING_KINDS,
    build_generator,
    build_linear_sensor,
    build_network_sensor,
)
from sdlss.lib.pml import SREC_FORMS, EpochRecord, PmlConfig, init_state, train
from sdlss.lib.reporting import CsvSchema, write_csv

logger = logging.getLogger(__name__)


def add_dataset_arguments(parser: argparse.ArgumentParser, split: str) -> None:
    parser.add_argument("--dataset", choices=("fashion-mnist", "raw"), default="fashion-mnist")
    parser.add_argument("--data-path", help="dataset file or directory (default: $SDLSS_DATA_DIR)")
    parser.add_argument("--split", choices=("train", "test"), default=split)


def split_holdout(
    dataset: ImageDataset, train_size: int | None, val_size: int
) -> tuple[ImageDataset, ImageDataset]:
    """Hold out the last `val_size` images; train on up to `train_size` of the rest."""
    if val_size < 0 or len(dataset) <= val_size:
        raise ConfigError(f"{len(dataset)} images cannot hold out {val_size} for validation")
    cut = len(dataset) - val_size
    train_images = dataset.images[: min(cut, train_size) if train_size else cut]
    return (
        ImageDataset(train_images, dataset.shape, "train"),
        ImageDataset(dataset.images[cut:], dataset.shape, "validation"),
    )


class TrainCommand(BaseCommand):
    name = "train"
    description = "Jointly train the generator and sensing operator."

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        add_dataset_arguments(parser, "train")
        parser.add_argument("--train-size", type=int, default=10000)
        parser.add_argument("--val-size", type=int, default=64)
        parser.add_argument("--experiment", default="sdlss")

        parser.add_argument("--k", type=int, default=784)
        parser.add_argument("--hidden", default="500,500")
        parser.add_argument("--s", type=int, help="latent sparsity (default k)")
        parser.add_argument("--m", type=int, default=10)
        parser.add_argument("--sensing", choices=SENSING_KINDS, default="network")
        parser.add_argument("--sensor-hidden", help="hidden widths of A_φ (default 2m)")
        parser.add_argument("--negative-slope", type=float, default=0.2)
        parser.add_argument("--output-head", choices=OUTPUT_HEADS, default="raw")

        parser.add_argument("--T", type=int, default=5)
        parser.add_argument("--alpha", type=float, default=0.01)
        parser.add_argument("--beta", type=float, default=0.01)
        parser.add_argument("--gamma", type=float, default=1.0)
        parser.add_argument("--delta", type=float, default=0.001)
        parser.add_argument("--srec-form", choices=SREC_FORMS, default="hinge")
        parser.add_argument("--batch-size", type=int, default=64)
        parser.add_argument("--epochs", type=int, default=10)
        parser.add_argument("--momentum", type=float, default=0.0)
        parser.add_argument("--projection", choices=("on", "off"), default="on")
        parser.add_argument("--tolerance", type=float, default=1e-3)

    def pml_config(self) -> PmlConfig:
        args = self.args
        if args.alpha <= 0 or args.beta <= 0:
            raise ConfigError(f"--alpha and --beta must be > 0, got {args.alpha}, {args.beta}")
        return PmlConfig(
            s=args.k if args.s is None else args.s,
            T=args.T,
            beta=args.beta,
            alpha=args.alpha,
            srec_gamma=args.gamma,
            srec_delta=args.delta,
            srec_form=args.srec_form,
            batch_size=args.batch_size,
            momentum=args.momentum,
            project=switch(args.projection),
            tolerance=args.tolerance,
        ).validate(args.k)

    def execute(self) -> None:
        args = self.args
        cfg = self.pml_config()
        if args.epochs < 1:
            raise ConfigError(f"--epochs must be >= 1, got {args.epochs}")
        dataset = load_dataset(args.dataset, args.data_path, args.split)
        train_set, validation = split_holdout(dataset, args.train_size, args.val_size)
        n = train_set.n

        activation = Activation.leaky(args.negative_slope)
        generator = build_generator(
            [args.k, *int_list(args.hidden), n],
            streams.stream_seed(args.seed, "model"),
            activation=activation,
            output_head=args.output_head,
        )
        sensor_seed = streams.stream_seed(args.seed, "sensor")
        if args.sensing == "linear":
            sensor = build_linear_sensor(args.m, n, sensor_seed)
        else:
            hidden = int_list(args.sensor_hidden) if args.sensor_hidden else None
            sensor = build_network_sensor(args.m, n, sensor_seed, hidden, activation)

        logger.info(
            f"Training on {len(train_set)} images, validating on {len(validation)}: "
            f"k={args.k} s={cfg.s} m={args.m} sensing={args.sensing}"
        )
        rows: list[dict[str, object]] = []

        def on_epoch(record: EpochRecord) -> None:
            metrics = record.metrics
            rows.append(
                {
                    "experiment": args.experiment,
                    "epoch": record.epoch,
                    "m": args.m,
                    "k": args.k,
                    "s": cfg.s,
                    "loss_g": record.loss_g,
                    "loss_a": record.loss_a,
                    "l0": record.l0,
                    "train_rel_residual": record.train_residual,
                    "val_residual": record.val_residual,
                    "val_psnr": metrics.psnr_db if metrics else None,
                    "val_ssim": metrics.ssim if metrics else None,
                    "val_re": metrics.re_db if metrics else None,
                }
            )

        state = train(
            train_set.images,
            cfg,
            init_state(generator, sensor, args.seed),
            args.epochs,
            validation=validation.images,
            image_shape=train_set.shape,
            experiment=args.experiment,
            on_epoch=on_epoch,
        )
        if state.diverged:
            logger.warning(f"Training stopped on divergence after epoch {state.epoch}")

        write_csv(self.artifact("epochs.csv"), CsvSchema.TrainEpochs, rows)
        echo = self.config.echo() | {
            "s": str(cfg.s),
            "image_shape": ",".join(str(d) for d in train_set.shape),
            "epochs_run": str(state.epoch),
        }
        save_checkpoint(
            self.artifact("checkpoint.sdls"),
            Checkpoint(generator=state.generator, sensor=state.sensor, config=echo),
        )


def main() -> None:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s"
    )
    sys.exit(TrainCommand().run())


if __name__ == "__main__":
    main()
