"""Circuit configuration and measurement-record containers.

Outcome grids are ``int8`` arrays holding +1 (Kraus operator M1) or -1 (M2).
A dataset keeps its M records stacked along a leading axis so that sets of
trajectories can be sliced without copying record by record.
"""
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import DomainError

SIMPLEX_TOLERANCE = 1e-12
# sums of user-supplied strengths within this of 1 are rescaled onto the simplex
INPUT_TOLERANCE = 1e-9
CHANNELS = ('x', 'zz', 'zxz')


def default_point_id(gamma_x: float, gamma_zz: float, gamma_zxz: float) -> str:
    return f"gx{gamma_x:.4f}_gzz{gamma_zz:.4f}_gzxz{gamma_zxz:.4f}"


def grid_shapes(T: int, L: int) -> Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]:
    """Record shapes of the X, ZZ and ZXZ channels for a depth-T run on L qubits.

    When T is not a multiple of 2 (or 3) the last ZZ (or ZXZ) row is only
    partly scheduled; its unscheduled cells hold +1.
    """
    return (
        (T, L),
        (math.ceil(T / 2), max(L - 1, 0)),
        (math.ceil(T / 3), max(L - 2, 0)),
    )


def record_dimension(T: int, L: int) -> int:
    """Total outcome count D = TL + (T/2)(L-1) + (T/3)(L-2)."""
    return sum(rows * cols for rows, cols in grid_shapes(T, L))


def normalized_gammas(gamma_x: float, gamma_zz: float, gamma_zxz: float,
                      tolerance: float = INPUT_TOLERANCE) -> Tuple[float, float, float]:
    total = gamma_x + gamma_zz + gamma_zxz
    if not abs(total - 1.0) <= tolerance:
        raise DomainError(f"measurement strengths must sum to 1 within {tolerance}, got {total!r}")
    gx, gzxz = gamma_x / total, gamma_zxz / total
    return gx, max(1.0 - gx - gzxz, 0.0), gzxz


@dataclass(frozen=True)
class CircuitConfig:
    L: int
    T: int
    gamma_x: float
    gamma_zz: float
    gamma_zxz: float
    master_seed: int = 0
    point_id: str = ''

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 3:
            raise DomainError(f"L must be an integer >= 3, got {self.L}")
        if int(self.T) != self.T or self.T < 1:
            raise DomainError(f"T must be an integer >= 1, got {self.T}")
        for name in ('gamma_x', 'gamma_zz', 'gamma_zxz'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {value}")
        total = self.gamma_x + self.gamma_zz + self.gamma_zxz
        if abs(total - 1.0) > SIMPLEX_TOLERANCE:
            raise DomainError(f"measurement strengths must sum to 1, got {total!r}")
        if not 0 <= self.master_seed < 2 ** 64:
            raise DomainError(f"master_seed must be a 64-bit unsigned integer, got {self.master_seed}")
        if not self.point_id:
            object.__setattr__(self, 'point_id', default_point_id(self.gamma_x, self.gamma_zz, self.gamma_zxz))

    @property
    def gammas(self) -> Tuple[float, float, float]:
        return (self.gamma_x, self.gamma_zz, self.gamma_zxz)

    @property
    def nn_compatible(self) -> bool:
        return self.T % 6 == 0

    def with_depth(self, T: int) -> 'CircuitConfig':
        return replace(self, T=T)


@dataclass(frozen=True)
class TrajectoryRecord:
    x_outcomes: np.ndarray
    zz_outcomes: np.ndarray
    zxz_outcomes: np.ndarray
    seed: int

    def __eq__(self, other):
        if not isinstance(other, TrajectoryRecord):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.x_outcomes, other.x_outcomes)
            and np.array_equal(self.zz_outcomes, other.zz_outcomes)
            and np.array_equal(self.zxz_outcomes, other.zxz_outcomes)
        )


@dataclass
class RecordBatch:
    """N trajectories stacked along axis 0: x [N,T,L], zz [N,T/2,L-1], zxz [N,T/3,L-2]."""
    x: np.ndarray
    zz: np.ndarray
    zxz: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def L(self) -> int:
        return self.x.shape[2]

    @classmethod
    def from_records(cls, records: Sequence[TrajectoryRecord]) -> 'RecordBatch':
        if not records:
            raise DomainError("a record batch needs at least one trajectory")
        try:
            return cls(
                x=np.stack([r.x_outcomes for r in records]),
                zz=np.stack([r.zz_outcomes for r in records]),
                zxz=np.stack([r.zxz_outcomes for r in records]),
            )
        except ValueError as e:
            raise DomainError(f"records do not share one geometry: {e}") from e

    def take(self, indices) -> 'RecordBatch':
        return RecordBatch(self.x[indices], self.zz[indices], self.zxz[indices])

    def channel(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass
class Dataset:
    config: CircuitConfig
    x: np.ndarray
    zz: np.ndarray
    zxz: np.ndarray
    seeds: np.ndarray
    window: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        M = self.x.shape[0]
        if self.zz.shape[0] != M or self.zxz.shape[0] != M or len(self.seeds) != M:
            raise DomainError("dataset channels disagree on the trajectory count")

    @property
    def M(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    @property
    def L(self) -> int:
        return self.x.shape[2]

    def __len__(self):
        return self.M

    def __getitem__(self, i: int) -> TrajectoryRecord:
        return TrajectoryRecord(self.x[i], self.zz[i], self.zxz[i], int(self.seeds[i]))

    @property
    def trajectories(self) -> List[TrajectoryRecord]:
        return [self[i] for i in range(self.M)]

    def __iter__(self) -> Iterator[TrajectoryRecord]:
        for i in range(self.M):
            yield self[i]

    def batch(self, indices=None) -> RecordBatch:
        if indices is None:
            return RecordBatch(self.x, self.zz, self.zxz)
        return RecordBatch(self.x[indices], self.zz[indices], self.zxz[indices])

    @classmethod
    def from_records(cls, config: CircuitConfig, records: Sequence[TrajectoryRecord]) -> 'Dataset':
        batch = RecordBatch.from_records(records)
        seeds = np.array([r.seed for r in records], dtype=np.uint64)
        return cls(config, batch.x, batch.zz, batch.zxz, seeds)


def crop_dataset(dataset: Dataset, width: int) -> Dataset:
    """Keep the central ``width`` qubits, from (L-width)/2 to (L+width-2)/2.

    ZZ bonds and ZXZ triplets survive only if they lie entirely inside the
    window; at width 2 the ZXZ grid is empty.
    """
    L = dataset.L
    if width < 1 or width > L or (L - width) % 2:
        raise DomainError(f"cannot take a central window of {width} qubits from L={L}")
    start = (L - width) // 2
    x = dataset.x[:, :, start:start + width]
    zz = dataset.zz[:, :, start:start + max(width - 1, 0)]
    zxz = dataset.zxz[:, :, start:start + max(width - 2, 0)]
    offset = dataset.window[0] if dataset.window else 0
    return Dataset(dataset.config, x, zz, zxz, dataset.seeds, window=(offset + start, width))


def truncate_dataset(dataset: Dataset, T: int) -> Dataset:
    """Keep the first T steps of every record (equal to a depth-T run)."""
    if T < 1 or T > dataset.T or T % 6:
        raise DomainError(f"truncation depth must be a multiple of 6 in [6, {dataset.T}], got {T}")
    return Dataset(
        dataset.config.with_depth(T),
        dataset.x[:, :T],
        dataset.zz[:, :T // 2],
        dataset.zxz[:, :T // 3],
        dataset.seeds,
        window=dataset.window,
    )


@dataclass
class EntropyReport:
    times: List[int]
    s_half: List[float]
    s_half_se: List[float]
    mi: float
    mi_se: float
    s_topo: Optional[float]
    s_topo_se: Optional[float]
    n_traj: int
    config: Optional[CircuitConfig] = field(default=None, repr=False)
