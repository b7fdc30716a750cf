"""Deterministic seed derivation.

Randomness anywhere in a run is a pure function of the run seed and a path of
integer keys (epoch, sample id, block, ...), so results never depend on batch
composition or call order.
"""
from __future__ import annotations

import numpy as np

# stream tags
PROMPTER = 1
TOKENIZER = 2
PROPAGATION = 3
TRAIN = 4
EVAL = 5
AUGMENT = 6
SHUFFLE = 7
INIT = 8
DATA = 9


def derive_seed(*keys: int) -> int:
    seq = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def derive_seeds(seeds, *keys: int) -> list[int]:
    return [derive_seed(int(s), *keys) for s in seeds]
