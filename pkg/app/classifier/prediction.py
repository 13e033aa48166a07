"""Set-level and dataset-level inference."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.exceptions import DomainError, ModelError
from app.trajectories.records import Dataset, RecordBatch, TrajectoryRecord
from app.trajectories.seeding import make_rng
from .architectures import ArchHyper, MlpModel, ModelFactory, PhaseModel

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-9


@dataclass
class SetPrediction:
    y: np.ndarray
    n: int
    sets: int = 1
    dropped: int = 0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.shape != (3,) or abs(self.y.sum() - 1.0) > SIMPLEX_TOLERANCE or self.y.min() < -SIMPLEX_TOLERANCE:
            raise ModelError(f"prediction {self.y} is not a probability 3-vector")

    @property
    def label(self) -> int:
        """1-based argmax; ties go to the lowest class."""
        return int(np.argmax(self.y)) + 1


def init_model(arch: ArchHyper, seed: int = 0) -> PhaseModel:
    return ModelFactory.create_model(arch, seed)


def forward_set(model: PhaseModel, records, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> SetPrediction:
    batch = records if isinstance(records, RecordBatch) else RecordBatch.from_records(records)
    y = model.forward_set(batch, training=training, rng=rng)
    return SetPrediction(y.data.copy(), n=len(batch))


def mlp_forward(model: MlpModel, record: TrajectoryRecord) -> np.ndarray:
    """Probability 3-vector of the baseline for a single trajectory."""
    batch = RecordBatch.from_records([record])
    return model.trajectory_predictions(batch).data[0].copy()


def predict_dataset(model: PhaseModel, dataset: Dataset, N: int) -> SetPrediction:
    """y(M): the mean of eval-mode y(N) over consecutive sets of N trajectories."""
    if N < 1:
        raise DomainError(f"set size must be at least 1, got {N}")
    M = dataset.M
    if M < N:
        raise DomainError(f"dataset holds {M} trajectories, fewer than one set of {N}")
    sets, dropped = divmod(M, N)
    if dropped:
        logger.warning(f"Dropping the last {dropped} of {M} trajectories for {dataset.config.point_id}: N={N} does not divide M")
    total = np.zeros(3)
    for j in range(sets):
        batch = dataset.batch(slice(j * N, (j + 1) * N))
        total += model.forward_set(batch, training=False).data
    return SetPrediction(total / sets, n=N, sets=sets, dropped=dropped)


def predict_resampled(model: PhaseModel, dataset: Dataset, N: int, n_step: int, seed: int) -> SetPrediction:
    """Mean of eval-mode y(N) over n_step sets drawn with replacement."""
    if N < 1 or n_step < 1:
        raise DomainError(f"N and n_step must be at least 1, got N={N}, n_step={n_step}")
    rng = make_rng(seed)
    total = np.zeros(3)
    for _ in range(n_step):
        batch = dataset.batch(rng.integers(0, dataset.M, size=N))
        total += model.forward_set(batch, training=False).data
    return SetPrediction(total / n_step, n=N, sets=n_step)
