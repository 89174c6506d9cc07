"""Counter-based random streams on top of numpy's Philox generator.

Every draw in the toolkit is addressed by (seed, draw_index, substream,
replica).  The Philox key is derived from the seed once; the 256-bit counter
carries the coordinates in its three high words:

    counter = [0, draw_index, block_index, substream]

with the low word left at 0 for Philox's own block advance.  Replicas are
grouped into fixed blocks of ``BLOCK`` rows, so the values seen by replica r
are a pure function of (seed, draw_index, substream, r): they do not depend
on how many replicas run alongside it or how the work is chunked over
processes.  Extracting a single replica costs at most one block.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from functools import lru_cache

import numpy as np

BLOCK = 256  # replicas per counter block


class Substream(IntEnum):
    SCHEME_XI = 0
    SCHEME_XI_PRIME = 1
    NOISE_U = 2
    NOISE_U_PRIME = 3
    ALPHA = 4
    BRIDGE = 5
    METRIC = 6


@dataclass(frozen=True)
class StreamKey:
    """Addressable stream identity: (seed, replica_id, substream)."""

    seed: int
    replica_id: int = 0
    substream: Substream = Substream.SCHEME_XI

    def with_substream(self, substream: Substream) -> "StreamKey":
        return replace(self, substream=Substream(substream))

    def with_replica(self, replica_id: int) -> "StreamKey":
        return replace(self, replica_id=replica_id)

    def generator(self, draw_index: int = 0) -> np.random.Generator:
        """Free-form generator for this key (estimators, reference draws).

        Uses replica_id in the block-index word, so it never collides with
        the block streams used by the sampling engine for the same substream
        unless the same coordinates are reused deliberately.
        """
        return _generator(self.seed, draw_index, self.replica_id, self.substream)


@lru_cache(maxsize=None)
def _philox_key(seed: int) -> bytes:
    return np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64).tobytes()


def _generator(seed: int, draw_index: int, block: int, substream: int) -> np.random.Generator:
    key = np.frombuffer(_philox_key(seed), dtype=np.uint64)
    counter = np.array([0, draw_index, block, int(substream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def normal_block(seed: int, draw_index: int, substream: Substream, block: int,
                 tail: tuple) -> np.ndarray:
    """One (BLOCK, *tail) block of standard normals."""
    g = _generator(seed, draw_index, block, substream)
    return g.standard_normal((BLOCK,) + tuple(tail))


def uniform_block(seed: int, draw_index: int, substream: Substream, block: int) -> np.ndarray:
    g = _generator(seed, draw_index, block, substream)
    return g.random(BLOCK)


def _assemble(block_fn, lo: int, hi: int) -> np.ndarray:
    """Stack the blocks covering replica rows [lo, hi) and slice them out."""
    b0, b1 = lo // BLOCK, (hi - 1) // BLOCK + 1
    parts = [block_fn(b) for b in range(b0, b1)]
    out = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)
    return out[lo - b0 * BLOCK: hi - b0 * BLOCK]


def normals(seed: int, draw_index: int, substream: Substream, tail: tuple,
            lo: int, hi: int) -> np.ndarray:
    """Standard normals for replicas lo..hi-1, shape (hi-lo, *tail)."""
    return _assemble(lambda b: normal_block(seed, draw_index, substream, b, tail), lo, hi)


def uniforms(seed: int, draw_index: int, substream: Substream, lo: int, hi: int) -> np.ndarray:
    return _assemble(lambda b: uniform_block(seed, draw_index, substream, b), lo, hi)


def normal_row(seed: int, draw_index: int, substream: Substream, replica: int,
               tail: tuple) -> np.ndarray:
    """The single replica's draw; identical to its row in any batched call."""
    block, row = divmod(replica, BLOCK)
    return normal_block(seed, draw_index, substream, block, tail)[row]


def uniform_row(seed: int, draw_index: int, substream: Substream, replica: int) -> float:
    block, row = divmod(replica, BLOCK)
    return float(uniform_block(seed, draw_index, substream, block)[row])
