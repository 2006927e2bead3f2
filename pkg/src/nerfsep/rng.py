"""Counter-based RNG derivation: independent streams per (seed, iteration, purpose).

Philox keyed by the triple means any iteration's random draws can be
reproduced without replaying earlier iterations, which is what makes
checkpoint resume bit-exact.
"""

from __future__ import annotations

import numpy as np

# Stable purpose ids; appending is fine, reordering is not.
PURPOSES = {
    "init": 0,
    "batch_fg": 1,
    "batch_bg": 2,
    "stratified_fg": 3,
    "stratified_bg": 4,
    "importance_fg": 5,
    "importance_bg": 6,
    "perturb_fg_coarse": 7,
    "perturb_fg_fine": 8,
    "perturb_bg_coarse": 9,
    "perturb_bg_fine": 10,
    "dataset": 11,
    "jitter": 12,
    "perturb_only_bg_coarse": 13,
    "perturb_only_bg_fine": 14,
}


def derive(seed: int, iteration: int, purpose: str) -> np.random.Generator:
    # Philox keys are two uint64 words: (seed, iteration*64 + purpose id).
    sub = np.uint64(iteration) * np.uint64(64) + np.uint64(PURPOSES[purpose])
    return np.random.Generator(np.random.Philox(key=(np.uint64(seed), sub)))
