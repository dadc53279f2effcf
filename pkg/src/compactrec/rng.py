"""Counter-based random generators keyed by small integer tuples.

Seeding Philox from the (seed, context...) tuple makes every stream a
pure function of its key, so shuffles and samples stay stable under
resumption and parallel ingestion.
"""

import numpy as np

__all__ = ["generator"]


def generator(*parts) -> np.random.Generator:
    entropy = [int(p) & 0xFFFFFFFF for p in parts]
    return np.random.Generator(np.random.Philox(seed=np.random.SeedSequence(entropy)))
