import hashlib

import numpy as np


def derive_seed(seed: int, *names) -> int:
    """64-bit seed from (seed, name, ...) so every operation/state pair gets an
    independent stream that does not depend on evaluation order."""
    key = ":".join([str(int(seed)), *(str(n) for n in names)])
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
