"""Record layouts fed to the networks.

The convolutional branches see each channel blocked by the brickwork period:
X row t goes to (channel t % 6, time t // 6), ZZ row r to (r % 3, r // 3) and
ZXZ row r to (r % 2, r // 2), so all three share T/6 time steps. The MLP sees
one flat vector per trajectory: X, then ZZ, then ZXZ, each row-major.
"""
from typing import Dict, Sequence

import numpy as np

from app.core.exceptions import DomainError
from app.trajectories.records import CHANNELS, RecordBatch

SUBLAYERS = {'x': 6, 'zz': 3, 'zxz': 2}


def channel_widths(L: int) -> Dict[str, int]:
    return {'x': L, 'zz': L - 1, 'zxz': L - 2}


def _check_geometry(batch: RecordBatch):
    T, L = batch.T, batch.L
    if T % 6:
        raise DomainError(f"classifier input needs T divisible by 6, got T={T}")
    expected = {'x': (T, L), 'zz': (T // 2, L - 1), 'zxz': (T // 3, L - 2)}
    for name, shape in expected.items():
        grid = batch.channel(name)
        # a cropped window may have dropped a channel entirely
        if grid.shape[2] == 0 and shape[1] <= 0:
            continue
        if grid.shape[1:] != shape:
            raise DomainError(f"{name} records have shape {grid.shape[1:]}, expected {shape} for T={T}, L={L}")


def reshape_records(batch: RecordBatch, channels: Sequence[str] = CHANNELS) -> Dict[str, np.ndarray]:
    """[N,T,L] -> [N,6,T/6,L], [N,T/2,L-1] -> [N,3,T/6,L-1], [N,T/3,L-2] -> [N,2,T/6,L-2]."""
    _check_geometry(batch)
    N, blocks = len(batch), batch.T // 6
    out = {}
    for name in channels:
        grid = batch.channel(name)
        sublayers = SUBLAYERS[name]
        out[name] = (
            grid.reshape(N, blocks, sublayers, grid.shape[2])
            .transpose(0, 2, 1, 3)
            .astype(np.float64)
        )
    return out


def flatten_records(batch: RecordBatch, channels: Sequence[str] = CHANNELS) -> np.ndarray:
    """[N, D] with D = TL + (T/2)(L-1) + (T/3)(L-2) for the full channel set."""
    N = len(batch)
    return np.concatenate([batch.channel(name).reshape(N, -1) for name in channels], axis=1).astype(np.float64)
