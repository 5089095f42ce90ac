"""Counter-based random streams.

Each (seed, rank, particle) triple owns an independent Philox stream, so
draws do not depend on scheduling or on how many particles run. Draw
order within a stream is part of the sampler contract:

  rank >= 2:        one resampling uniform
  CSMC:             one pair uniform (only if more than one pair), two normals
  NCSMC:            pairs x M x 2 normals, one selection uniform (only if
                    more than one candidate)
"""

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def particle_stream(seed, rank, particle) -> np.random.Generator:
    key = np.array([np.uint64(seed) & _MASK,
                    (np.uint64(rank) << np.uint64(32)) ^ np.uint64(particle)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
