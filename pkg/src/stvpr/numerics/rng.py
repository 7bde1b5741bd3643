"""Named, seedable random streams.

Each stream is a counter-based Philox generator keyed by ``(seed, name)``,
so draws in one subsystem never shift draws in another. Streams in use:

    params.<module>   parameter initialization (encoder, attn, ffn, vlad, ...)
    dropout           dropout masks during training
    data.<part>       synthetic dataset (trajectory, latents, condition, noise)
    train.order       batch ordering
    vlad.kmeans       cluster-center initialization
"""

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def split(seed: int, name: str, count: int) -> list[np.random.Generator]:
    return [stream(seed, f"{name}/{i}") for i in range(count)]
