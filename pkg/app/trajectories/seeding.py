"""Per-trajectory seed derivation.

Trajectory i of a parameter point is simulated with the 64-bit seed

    mix64(master_seed, point_hash(point_id), i)
    = splitmix64(splitmix64(splitmix64(master_seed) ^ point_hash) ^ i)

where ``splitmix64`` is the SplitMix64 output function (golden-gamma
increment followed by the 30/27/31 xor-shift-multiply avalanche) and
``point_hash`` is the little-endian 8-byte BLAKE2b digest of the UTF-8
point id. Each seed drives its own ``numpy.random.Generator(PCG64(seed))``,
so trajectory i never depends on how many others exist or which worker
simulated them.
"""
import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(value: int) -> int:
    z = (value + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix64(a: int, b: int, c: int) -> int:
    return splitmix64(splitmix64(splitmix64(a & MASK64) ^ (b & MASK64)) ^ (c & MASK64))


def point_hash(point_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(point_id.encode('utf-8'), digest_size=8).digest(), 'little')


def trajectory_seed(master_seed: int, point_id: str, index: int) -> int:
    return mix64(master_seed, point_hash(point_id), index)


def trajectory_seeds(master_seed: int, point_id: str, count: int) -> np.ndarray:
    h = point_hash(point_id)
    return np.array([mix64(master_seed, h, i) for i in range(count)], dtype=np.uint64)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(base: int, *labels: int) -> int:
    """Chain extra integer labels (member index, repetition...) into a seed."""
    seed = base & MASK64
    for label in labels:
        seed = splitmix64(seed ^ (label & MASK64))
    return seed
