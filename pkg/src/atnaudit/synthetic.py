"""Synthetic ``ratings.dat`` logs with MovieLens-1M's shape.

Users and items get latent factor vectors; each user rates a Gumbel-top-k
sample of items under ``taste * <u, v> + popularity``, so co-consumption is
structured and an item-based recommender has something to learn. Every user
rates at least ``min_history`` items, and raw ids are sparse like the real
dataset's MovieIDs.
"""
from __future__ import annotations

import numpy as np

from ._rng import substream


def synthetic_ratings(n_users: int = 500, n_items: int = 400, mean_history: int = 40,
                      min_history: int = 20, n_factors: int = 4, taste: float = 2.5,
                      seed: int = 0) -> str:
    """Return the text of a ``UserID::MovieID::Rating::Timestamp`` file."""
    if min_history > n_items - 100:
        raise ValueError("n_items must leave at least 100 unrated items per user")
    rng = substream(seed, "synthetic")
    users = rng.normal(size=(n_users, n_factors))
    items = rng.normal(size=(n_items, n_factors))
    popularity = rng.gumbel(size=n_items)
    raw_items = np.sort(rng.choice(np.arange(1, 3 * n_items + 1), n_items, replace=False))
    extra = max(mean_history - min_history, 1)
    counts = np.minimum(min_history + rng.geometric(1.0 / extra, size=n_users) - 1, n_items - 100)

    lines = []
    clock = 956_703_932  # first ML-1M timestamp
    for u in range(n_users):
        affinity = taste * items @ users[u] / np.sqrt(n_factors) + popularity
        chosen = np.argsort(-(affinity + rng.gumbel(size=n_items)), kind="stable")[:counts[u]]
        rng.shuffle(chosen)
        stamps = clock + np.cumsum(rng.integers(1, 5_000, size=len(chosen)))
        clock = int(stamps[-1])
        stars = np.clip(np.round(3 + affinity[chosen] / 2 + rng.normal(size=len(chosen))), 1, 5)
        lines.extend(f"{u + 1}::{raw_items[i]}::{int(r)}::{t}"
                     for i, r, t in zip(chosen, stars, stamps))
    return "\n".join(lines) + "\n"
