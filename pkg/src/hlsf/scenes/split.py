from __future__ import annotations

import numpy as np

from hlsf.errors import ConfigError


def split_dataset(items, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle ``items`` with ``seed`` and cut into train/val/test lists.

    Sizes are floor(n * fraction) for train and val; test takes the rest.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    items = list(items)
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(n * fractions[0] + 1e-9))
    n_val = int(np.floor(n * fractions[1] + 1e-9))
    n_val = min(n_val, n - n_train)
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple([items[i] for i in part] for part in parts)
