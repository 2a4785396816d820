"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by the
user seed plus a tuple of integer stream identifiers (purpose tag, block or
iteration index, ...).  Results therefore depend only on the seed and the
logical position of a draw, never on batch sizes or scheduling.
"""

import numpy as np

# purpose tags
CORE = 1
MEAN = 2
CHAIN = 3
CHAIN_INIT = 4
DIAGNOSTICS = 5
SUBSAMPLE = 6

BLOCK = 1024


def stream(seed, *ids):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, ids)])))
