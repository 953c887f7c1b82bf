"""Counter-based random streams for reproducible simulation.

Every random draw in the simulator comes from a Philox generator keyed by
``(master_seed, label, round_index, substream)``.  Because the key fully
determines the stream, any component can be re-run in isolation (or in
parallel) and produce the same draws: there is no shared generator state to
advance in the right order.

Label conventions used across the package:

* ``SAMPLING``      - per-round Poisson client selection,
* ``UPDATE_NOISE``  - Gaussian noise added to the summed model updates,
* ``COUNT_NOISE``   - Gaussian noise added to the clipped-bit count,
* ``DATA_GEN``      - synthetic data (substream 0: global truth, substream
  ``1``: per-user draws keyed by ``round_index = user index``, substream
  ``2``: model parameter initialisation).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class StreamLabel(enum.IntEnum):
    """Stable integer codes mixed into the Philox key."""

    SAMPLING = 1
    UPDATE_NOISE = 2
    COUNT_NOISE = 3
    DATA_GEN = 4


@dataclass(frozen=True)
class RngStream:
    """Address of one independent random stream.

    Streams with different key tuples are statistically independent; the
    same tuple always reproduces the same draws.
    """

    master_seed: int
    label: StreamLabel
    round_index: int = 0
    substream: int = 0

    def __post_init__(self) -> None:
        for name in ("master_seed", "round_index", "substream"):
            value = getattr(self, name)
            if not 0 <= value < 2**64:
                raise ValueError(f"{name} must fit in an unsigned 64-bit word, got {value}")

    def generator(self) -> np.random.Generator:
        # Philox-4x64 takes a 2-word key and a 4-word little-endian
        # counter.  Placing (round, substream) in the counter's high words
        # offsets each stream by a multiple of 2^128 draws, so streams
        # from the same key can never overlap.
        key = np.array([self.master_seed, int(self.label)], dtype=np.uint64)
        counter = np.array([0, 0, self.round_index, self.substream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))


def gaussian_vector(stream: RngStream, dim: int, stddev: float) -> np.ndarray:
    """Draw ``dim`` i.i.d. centered Gaussians with the given stddev.

    Uses an explicit Box-Muller transform over uniform pairs so that the
    number of consumed uniforms depends only on ``dim``, never on the
    values drawn.  ``stddev = 0`` returns zeros without touching the
    stream, so noiseless ablations leave all other draws unchanged.
    """
    if dim < 0:
        raise ValueError(f"dim must be nonnegative, got {dim}")
    if stddev < 0:
        raise ValueError(f"stddev must be nonnegative, got {stddev}")
    if dim == 0:
        return np.zeros(0)
    if stddev == 0.0:
        return np.zeros(dim)
    pairs = (dim + 1) // 2
    u = stream.generator().random(2 * pairs)
    # 1 - u lies in (0, 1], keeping the log finite.
    radius = np.sqrt(-2.0 * np.log(1.0 - u[:pairs]))
    angle = 2.0 * np.pi * u[pairs:]
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return stddev * out[:dim]
