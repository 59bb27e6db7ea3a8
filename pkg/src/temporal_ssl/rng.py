"""Named, splittable random streams derived from one integer seed."""

import zlib

import numpy as np
import torch

STREAMS = ("data", "sampler", "model-init", "augmentation", "probe", "eval")


def stream_key(name: str) -> int:
    # crc32 is stable across platforms and interpreter runs, unlike hash()
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Return an independent PCG64 generator for ``(seed, stream, *extra)``."""
    ss = np.random.SeedSequence([int(seed), stream_key(stream), *map(int, extra)])
    return np.random.Generator(np.random.PCG64(ss))


def torch_generator(seed: int, stream: str, *extra: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed), stream_key(stream), *map(int, extra)]).generate_state(2, np.uint32)
    g = torch.Generator()
    g.manual_seed(int(state[0]) << 32 | int(state[1]))
    return g


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit integer seed from ``rng`` for handing to a sub-task."""
    return int(rng.integers(0, 2**63 - 1))
