import argparse
import logging
import sys
from collections.abc import Sequence

from sdlss.evaluate import EvaluateCommand
from sdlss.lib.command import BaseCommand
from sdlss.reconstruct import ReconstructCommand
from sdlss.train import TrainCommand
from sdlss.verify import VerifyCommand

COMMANDS: dict[str, type[BaseCommand]] = {
    "train": TrainCommand,
    "reconstruct": ReconstructCommand,
    "eval": EvaluateCommand,
    "verify": VerifyCommand,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sdlss", description="Sparsity-driven latent sampling for compressed sensing."
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("args", nargs=argparse.REMAINDER)
    parsed = parser.parse_args(argv)
    return COMMANDS[parsed.command](parsed.args).run()


def main() -> None:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s"
    )
    sys.exit(run())


if __name__ == "__main__":
    main()
