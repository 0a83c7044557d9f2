"""Named random substreams derived from one experiment seed.

Each stochastic source (model init, data order, diffusion noise, timestep
draws, evaluation draws, ...) gets its own stream keyed by name and, for
per-step draws, by step index. Streams are independent: changing how one is
consumed never shifts another, and any step can be replayed without
replaying its predecessors (which makes resumption exact).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch

STREAMS = ("init", "data", "noise", "timestep", "diffloss", "eval", "probe", "hspace", "sample")


@dataclass(frozen=True)
class RngBundle:
    seed: int

    def seed_for(self, stream: str, *keys: int) -> int:
        seq = np.random.SeedSequence([int(self.seed), zlib.crc32(stream.encode()), *map(int, keys)])
        return int(seq.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 1 << 31], np.uint64))

    def numpy(self, stream: str, *keys: int) -> np.random.Generator:
        return np.random.default_rng(self.seed_for(stream, *keys))

    def torch(self, stream: str, *keys: int) -> torch.Generator:
        return torch.Generator().manual_seed(self.seed_for(stream, *keys))

    def init_module(self, factory, *args, stream: str = "init"):
        """Build a module with parameters drawn from the ``init`` stream only."""
        with torch.random.fork_rng():
            torch.manual_seed(self.seed_for(stream))
            return factory(*args)


def set_global_seed(seed: int) -> RngBundle:
    """Seed the global generators (as a guard) and return the substream bundle."""
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    bundle = RngBundle(int(seed))
    torch.manual_seed(bundle.seed_for("global"))
    np.random.seed(bundle.seed_for("global") % (2**32))
    return bundle


def epoch_batch(rngs: RngBundle, step: int, n: int, batch_size: int) -> np.ndarray:
    """Indices of the batch used at ``step`` (epoch-wise permutations, last partial batch dropped)."""
    per_epoch = max(n // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    perm = rngs.numpy("data", epoch).permutation(n)
    return perm[pos * batch_size : (pos + 1) * batch_size]
