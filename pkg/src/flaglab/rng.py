"""Deterministic seed derivation.

Every stochastic routine in the package takes either an explicit generator
or an integer seed from which it derives sub-seeds with `derive_seed`.
Nothing reads global RNG state, so any artifact is reproducible from
(config, seed, data) alone.
"""

from __future__ import annotations

import numpy as np
import torch

_U32 = 2**32


def derive_seed(base: int, *keys: int | str) -> int:
    """Derive a child seed from a base seed and a path of keys.

    String keys are folded into stable integers so call sites can use
    readable labels ("genes", "prior", ...) instead of magic numbers.
    """
    ints = []
    for k in keys:
        if isinstance(k, str):
            ints.append(int.from_bytes(k.encode("utf-8")[:8].ljust(8, b"\0"), "little") % _U32)
        else:
            ints.append(int(k) % _U32)
    ss = np.random.SeedSequence([int(base) % _U32, *ints])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def numpy_gen(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


def torch_gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2**63))
    return g
