import argparse
import logging
from collections.abc import Sequence
from pathlib import Path
from time import perf_counter

from sdlss.lib.config import (
    ExperimentConfig,
    artifact_hashes,
    compare_artifacts,
    manifest_artifacts,
    parse_with_config,
    read_kv_file,
    write_manifest,
)
from sdlss.lib.errors import ConfigError, SdlssError
from sdlss.lib.reporting import CsvSchema

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class ReproductionMismatch(SdlssError):
    pass


class BaseCommand:
    name = ""
    description = ""
    seeded = True

    def __init__(self, argv: Sequence[str] | None = None) -> None:
        self.parser = argparse.ArgumentParser(
            prog=f"sdlss {self.name}".strip(), description=self.description
        )
        self.add_common_arguments(self.parser)
        self.add_arguments(self.parser)
        self.args = parse_with_config(self.parser, argv)
        self.config = ExperimentConfig.from_namespace(self.name, self.args)
        self.artifacts: list[Path] = []

        if self.args.output_dir:
            self.output_dir = Path(self.args.output_dir)
        elif self.args.reproduce:
            self.output_dir = Path(self.args.reproduce).parent / "reproduce"
        else:
            self.output_dir = Path("runs") / self.name

    def add_common_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--config", help="key=value file applied below command-line flags")
        parser.add_argument("--reproduce", metavar="MANIFEST", help="re-run a recorded manifest")
        parser.add_argument("--output-dir")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--threads", type=int, default=1)

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        pass

    def execute(self) -> None:
        raise NotImplementedError

    def artifact(self, name: str) -> Path:
        """Path of an output file that the manifest will hash."""
        path = self.output_dir / name
        self.artifacts.append(path)
        return path

    def check_reproduction(self) -> None:
        recorded = manifest_artifacts(read_kv_file(Path(self.args.reproduce)))
        fresh = artifact_hashes(self.output_dir, self.artifacts)
        diff = compare_artifacts(recorded, fresh)
        if diff:
            raise ReproductionMismatch(f"artifacts differ from {self.args.reproduce}: {diff}")
        logger.info(f"Reproduced all {len(fresh)} artifacts of {self.args.reproduce}")

    def run(self) -> int:
        try:
            if self.args.threads < 1:
                raise ConfigError(f"--threads must be >= 1, got {self.args.threads}")
            self.output_dir.mkdir(parents=True, exist_ok=True)
            start = perf_counter()
            self.execute()
            write_manifest(
                self.output_dir,
                self.config,
                self.args.seed if self.seeded else None,
                CsvSchema.VERSION,
                self.artifacts,
            )
            if self.args.reproduce:
                self.check_reproduction()
            logger.info(f"{self.name} took {perf_counter() - start:.1f} s")
            return EXIT_OK
        except ConfigError as e:
            logger.critical(f"{type(e).__name__}: {e}")
            return EXIT_USAGE
        except SdlssError as e:
            logger.critical(f"{type(e).__name__}: {e}")
            return EXIT_FAILURE


def int_list(text: str) -> list[int]:
    """Parse "500,500" into [500, 500]; empty text gives an empty list."""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from e


def m_values(sweep: str | None, listed: str | None, single: int | None = None) -> list[int]:
    """Measurement counts from "a:b" (doubling from a up to b), a list, or one value."""
    if sweep:
        low, sep, high = sweep.partition(":")
        if not sep:
            raise ConfigError(f"--m-sweep expects a:b, got {sweep!r}")
        start, stop = int(low), int(high)
        if start < 1 or stop < start:
            raise ConfigError(f"--m-sweep needs 1 <= a <= b, got {sweep!r}")
        values = []
        while start <= stop:
            values.append(start)
            start *= 2
        return values
    if listed:
        return int_list(listed)
    if single is not None:
        return [single]
    raise ConfigError("give --m, --m-list or --m-sweep")


def switch(text: str) -> bool:
    if text not in ("on", "off"):
        raise ConfigError(f"expected on or off, got {text!r}")
    return text == "on"
