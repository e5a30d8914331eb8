from collections.abc import Sequence

import numpy as np

# Order is part of the reproducibility contract: a stream's seed depends on its position.
STREAM_NAMES = ("data", "latent", "sensor", "model", "validation", "verify")


def stream_seed(seed: int, name: str) -> int:
    """Integer seed of the named stream split from `seed`."""
    if name not in STREAM_NAMES:
        raise KeyError(f"unknown random stream {name!r}")
    child = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))[
        STREAM_NAMES.index(name)
    ]
    return int(child.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))


def stream_seeds(seed: int) -> dict[str, int]:
    return {name: stream_seed(seed, name) for name in STREAM_NAMES}


def spawn(seed: int | Sequence[int], count: int) -> list[np.random.Generator]:
    """`count` independent generators; the first j are the same for every count >= j."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]
