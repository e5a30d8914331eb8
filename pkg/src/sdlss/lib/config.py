import argparse
import hashlib
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from deepdiff import DeepDiff

from sdlss.lib import streams
from sdlss.lib.errors import ConfigError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
MANIFEST_HASH_NAME = "manifest_hash.txt"

# flags that locate a run rather than define it
RUN_LOCATION_KEYS = ("config", "reproduce", "output_dir", "threads")


def read_kv_file(path: Path) -> dict[str, str]:
    """Flat `key=value` lines; blank lines and `#` comments are skipped."""
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    values: dict[str, str] = {}
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{number}: expected key=value, got {line!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def format_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_with_config(
    parser: argparse.ArgumentParser, argv: Sequence[str] | None = None
) -> argparse.Namespace:
    """Parse `argv` with defaults < config file (or manifest) < flags."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("--reproduce")
    known, _ = pre.parse_known_args(argv)

    overrides: dict[str, str] = {}
    try:
        if known.reproduce:
            overrides.update(manifest_config(read_kv_file(Path(known.reproduce))))
        if known.config:
            overrides.update(read_kv_file(Path(known.config)))
    except ConfigError as e:
        parser.error(str(e))

    dests = {a.dest for a in parser._actions}
    unknown = sorted(set(overrides) - dests)
    if unknown:
        parser.error(f"unknown configuration keys: {', '.join(unknown)}")
    for key in RUN_LOCATION_KEYS:
        overrides.pop(key, None)
    parser.set_defaults(**overrides)
    return parser.parse_args(argv)


@dataclass
class ExperimentConfig:
    """The resolved parameters of one command run."""

    command: str
    values: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_namespace(cls, command: str, args: argparse.Namespace) -> "ExperimentConfig":
        return cls(
            command=command,
            values={
                k: format_value(v) for k, v in sorted(vars(args).items()) if v is not None
            },
        )

    def echo(self) -> dict[str, str]:
        """Parameters that define the numbers, without where the run was written."""
        return {k: v for k, v in self.values.items() if k not in RUN_LOCATION_KEYS}


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def artifact_hashes(directory: Path, artifacts: Iterable[Path]) -> dict[str, str]:
    return {
        str(path.relative_to(directory)): sha256_file(path) for path in sorted(artifacts)
    }


def write_manifest(
    directory: Path,
    config: ExperimentConfig,
    seed: int | None,
    schema_version: int,
    artifacts: Iterable[Path],
) -> Path:
    lines = [f"command={config.command}"]
    lines += [f"{k}={v}" for k, v in config.values.items()]
    if seed is not None:
        lines += [f"stream.{name}={value}" for name, value in streams.stream_seeds(seed).items()]
    lines.append(f"csv_schema={schema_version}")
    lines += [f"artifact.{k}={v}" for k, v in artifact_hashes(directory, artifacts).items()]

    path = directory / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    (directory / MANIFEST_HASH_NAME).write_text(sha256_file(path) + "\n", encoding="utf-8")
    logger.info(f"Wrote {path}")
    return path


def manifest_config(entries: dict[str, str]) -> dict[str, str]:
    return {
        k: v
        for k, v in entries.items()
        if k != "command" and k != "csv_schema" and "." not in k
    }


def manifest_artifacts(entries: dict[str, str]) -> dict[str, str]:
    return {
        k.removeprefix("artifact."): v for k, v in entries.items() if k.startswith("artifact.")
    }


def compare_artifacts(recorded: dict[str, str], fresh: dict[str, str]) -> DeepDiff:
    return DeepDiff(recorded, fresh)
