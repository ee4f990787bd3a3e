"""Deterministic seed derivation.

Every stochastic routine derives its own child seed from (base_seed, *indices)
instead of consuming a shared generator, so any stage can be replayed or
resumed mid-stream without replaying everything before it.
"""

import numpy as np
import torch


def derive_seed(*parts: int) -> int:
    """Mix integer parts into a single 63-bit seed."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def torch_gen(*parts: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen


def np_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
