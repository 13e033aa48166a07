"""Ensemble voting, accuracy statistics and phase-diagram reconstruction.

Every model casts one vote per point, the argmax of its dataset prediction
y(M). The ensemble label is the majority vote; a tie in vote count goes to
the tied class with the larger summed probability mass, then to the lowest
class index. Labels are 1-based.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.classifier.architectures import ArchHyper, PhaseModel
from app.classifier.prediction import predict_dataset
from app.core.circuit_breaker import PointCircuitBreaker, capture, raise_or_return
from app.core.exceptions import DomainError, StatisticsError
from app.training.services import LabeledPool, TrainConfig, member_seeds, train_ensemble
from app.trajectories.records import CircuitConfig, Dataset, default_point_id, normalized_gammas

logger = logging.getLogger(__name__)

GRID_TOLERANCE = 1e-9
ROLES = ('vertex', 'inner', 'outer', 'grid')


@dataclass(frozen=True)
class GridPoint:
    gamma_x: float
    gamma_zz: float
    gamma_zxz: float
    role: str = 'grid'
    point_id: str = ''

    def __post_init__(self):
        if min(self.gammas) < 0:
            raise DomainError(f"measurement strengths must be nonnegative, got {self.gammas}")
        if abs(sum(self.gammas) - 1.0) > GRID_TOLERANCE:
            raise DomainError(f"measurement strengths must sum to 1, got {sum(self.gammas)!r}")
        if self.role not in ROLES:
            raise DomainError(f"unknown point role {self.role!r}; expected one of {ROLES}")
        if not self.point_id:
            object.__setattr__(self, 'point_id', default_point_id(*self.gammas))

    @property
    def gammas(self) -> Tuple[float, float, float]:
        return (self.gamma_x, self.gamma_zz, self.gamma_zxz)

    def circuit(self, L: int, T: int, master_seed: int = 0) -> CircuitConfig:
        return CircuitConfig(L, T, *normalized_gammas(*self.gammas, tolerance=GRID_TOLERANCE),
                             master_seed=master_seed, point_id=self.point_id)


@dataclass
class VoteRecord:
    votes: List[int]
    majority: int
    agreement: float
    predictions: List[np.ndarray] = field(default_factory=list, repr=False)
    point_id: str = ''


@dataclass
class DiagramEntry:
    point: GridPoint
    label: Optional[int] = None
    agreement: Optional[float] = None

    @property
    def is_hole(self) -> bool:
        return self.label is None


@dataclass
class PhaseDiagram:
    entries: List[DiagramEntry]

    @property
    def holes(self) -> List[GridPoint]:
        return [e.point for e in self.entries if e.is_hole]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'gamma_x': [e.point.gamma_x for e in self.entries],
            'gamma_zz': [e.point.gamma_zz for e in self.entries],
            'gamma_zxz': [e.point.gamma_zxz for e in self.entries],
            'label': pd.array([e.label for e in self.entries], dtype='Int64'),
            'agreement': [e.agreement for e in self.entries],
        })


@dataclass
class RepetitionResult:
    votes: Dict[str, VoteRecord]
    correct: Dict[str, bool]

    def accuracy(self, point_ids: Optional[Sequence[str]] = None) -> float:
        ids = list(self.correct) if point_ids is None else [p for p in point_ids if p in self.correct]
        if not ids:
            raise StatisticsError("no labelled test point to score")
        return float(np.mean([self.correct[p] for p in ids]))


@dataclass
class AccuracyReport:
    P_r: List[float]
    mean: float
    se: Optional[float]
    R: int
    points: str
    per_point: Dict[str, List[bool]] = field(default_factory=dict)


def vote_of(y: np.ndarray) -> int:
    """1-based argmax; ties go to the lowest class."""
    return int(np.argmax(y)) + 1


def model_vote(model: PhaseModel, dataset: Dataset, N: int) -> int:
    return predict_dataset(model, dataset, N).label


def majority_vote(predictions: Sequence[np.ndarray], point_id: str = '') -> VoteRecord:
    if not len(predictions):
        raise DomainError("a majority vote needs at least one model")
    predictions = [np.asarray(y, dtype=np.float64) for y in predictions]
    votes = [vote_of(y) for y in predictions]
    counts = np.bincount(votes, minlength=4)[1:]
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) > 1:
        mass = np.sum(predictions, axis=0)
        # argmax keeps the lowest index among equal masses
        winner = int(tied[np.argmax(mass[tied])])
    else:
        winner = int(tied[0])
    majority = winner + 1
    return VoteRecord(
        votes=votes,
        majority=majority,
        agreement=float(counts[winner]) / len(votes),
        predictions=predictions,
        point_id=point_id,
    )


def ensemble_majority(models: Sequence[PhaseModel], dataset: Dataset, N: int) -> VoteRecord:
    if not models:
        raise DomainError("an ensemble needs at least one model")
    predictions = [predict_dataset(model, dataset, N).y for model in models]
    record = majority_vote(predictions, point_id=dataset.config.point_id)
    logger.info(f"Point {record.point_id}: votes {record.votes} -> class {record.majority} "
                f"(agreement {record.agreement:.2f})")
    return record


def accuracy_P(predicted: Mapping[str, object], truth: Mapping[str, int]) -> float:
    """Fraction of test points whose ensemble label matches the ground truth.

    ``predicted`` maps point ids to a label or a ``VoteRecord``; points with
    no ground-truth label are skipped.
    """
    hits = []
    for point_id, value in predicted.items():
        if point_id not in truth:
            logger.warning(f"No ground-truth label for {point_id}; skipping")
            continue
        label = value.majority if isinstance(value, VoteRecord) else int(value)
        hits.append(label == int(truth[point_id]))
    if not hits:
        raise DomainError("accuracy needs at least one labelled test point")
    return float(np.mean(hits))


def mean_and_standard_error(P_r: Sequence[float]) -> Tuple[float, float]:
    """P-bar and SE = sqrt(sum (P_r - P-bar)^2 / (R (R - 1)))."""
    R = len(P_r)
    if R < 2:
        raise StatisticsError(f"the standard error needs at least 2 repetitions, got {R}")
    values = np.asarray(P_r, dtype=np.float64)
    mean = float(values.mean())
    return mean, math.sqrt(float(np.sum((values - mean) ** 2)) / (R * (R - 1)))


def accuracy_report(results: Sequence[RepetitionResult], points: str = 'all',
                    point_ids: Optional[Sequence[str]] = None) -> AccuracyReport:
    """Folds repetition results in order; SE is left empty for a single repetition."""
    P_r = [r.accuracy(point_ids) for r in results]
    if len(P_r) >= 2:
        mean, se = mean_and_standard_error(P_r)
    else:
        mean, se = float(P_r[0]), None
    ids = point_ids if point_ids is not None else list(results[0].correct)
    per_point = {p: [r.correct[p] for r in results] for p in ids if p in results[0].correct}
    return AccuracyReport(P_r=P_r, mean=mean, se=se, R=len(P_r), points=points, per_point=per_point)


def repeated_accuracy(protocol: Callable[[int], RepetitionResult], R: int, points: str = 'all',
                      point_ids: Optional[Sequence[str]] = None) -> AccuracyReport:
    if R < 2:
        raise StatisticsError(f"repeated accuracy needs R >= 2 for a standard error, got {R}")
    results = []
    for repetition in range(R):
        result = protocol(repetition)
        results.append(result)
        logger.info(f"Repetition {repetition + 1}/{R}: P={result.accuracy(point_ids):.4f}")
    report = accuracy_report(results, points, point_ids)
    logger.info(f"Accuracy over {R} repetitions on {points} points: {report.mean:.4f} +/- {report.se:.4f}")
    return report


def sample_grid() -> List[GridPoint]:
    """gamma_zxz from 0.025 to 0.925 in steps of 0.1; for each, gamma_x from
    0.025 to 0.95 - gamma_zxz in steps of 0.1; gamma_zz takes the rest."""
    points = []
    for k in range(10):
        for j in range(10 - k):
            # values in fortieths keep the coordinates exact to float rounding
            ax, azxz = 1 + 4 * j, 1 + 4 * k
            points.append(GridPoint(ax / 40, (40 - ax - azxz) / 40, azxz / 40, role='grid'))
    return points


def vote_points(models: Sequence[PhaseModel], datasets: Sequence[Dataset], N: int,
                threads: int = 1) -> List[VoteRecord]:
    """Ensemble votes for several points; results keep the input order."""
    return Parallel(n_jobs=max(1, threads))(
        delayed(ensemble_majority)(models, dataset, N) for dataset in datasets
    )


def reconstruct_phase_diagram(models: Sequence[PhaseModel], grid: Sequence[GridPoint],
                              datasets: Mapping[str, Dataset], N: int, threads: int = 1,
                              guard: Optional[PointCircuitBreaker] = None) -> PhaseDiagram:
    """One ensemble reused for every grid point.

    Points without a dataset become holes. With a ``guard`` a failing point
    also becomes a hole until the guard gives up on the run.
    """
    present = [p for p in grid if p.point_id in datasets]
    for point in grid:
        if point.point_id not in datasets:
            logger.warning(f"No dataset for grid point {point.point_id}; leaving a hole")

    outcomes = Parallel(n_jobs=max(1, threads))(
        delayed(capture)(ensemble_majority, models, datasets[p.point_id], N) for p in present
    )
    records = {}
    for point, outcome in zip(present, outcomes):
        if guard is None:
            records[point.point_id] = raise_or_return(outcome)
        else:
            records[point.point_id] = guard.call(point.point_id, raise_or_return, outcome)

    entries = []
    for point in grid:
        record = records.get(point.point_id)
        if record is None:
            entries.append(DiagramEntry(point))
        else:
            entries.append(DiagramEntry(point, record.majority, float(record.agreement)))
    diagram = PhaseDiagram(entries)
    logger.info(f"Phase diagram: {len(entries)} points, {len(diagram.holes)} hole(s)")
    return diagram


class VotingProtocol(ABC):
    """A repetition of the voting protocol.

    Subclasses supply the ensemble for repetition ``r``; the call scores its
    majority labels on the labelled test points.
    """

    def __init__(self, test_points: Sequence[Tuple[GridPoint, Dataset]], truth: Mapping[str, int],
                 N: int, threads: int = 1):
        self.test_points = list(test_points)
        self.truth = dict(truth)
        self.N = N
        self.threads = threads
        self.skipped = [p.point_id for p, _ in self.test_points if p.point_id not in self.truth]
        for point_id in self.skipped:
            logger.warning(f"No ground-truth label for {point_id}; skipping")
        self.test_points = [(p, d) for p, d in self.test_points if p.point_id in self.truth]
        if not self.test_points:
            raise DomainError("no test point has a ground-truth label")

    @abstractmethod
    def ensemble(self, repetition: int) -> Sequence[PhaseModel]:
        pass

    def __call__(self, repetition: int) -> RepetitionResult:
        models = self.ensemble(repetition)
        datasets = [d for _, d in self.test_points]
        records = vote_points(models, datasets, self.N, self.threads)
        votes, correct = {}, {}
        for (point, _), record in zip(self.test_points, records):
            votes[point.point_id] = record
            correct[point.point_id] = record.majority == int(self.truth[point.point_id])
        return RepetitionResult(votes=votes, correct=correct)


class RetrainingProtocol(VotingProtocol):
    """Trains a fresh ensemble of ``n_models`` members for every repetition."""

    def __init__(self, arch: ArchHyper, pool: LabeledPool, config: TrainConfig, n_models: int,
                 test_points, truth, N: Optional[int] = None, threads: int = 1):
        super().__init__(test_points, truth, N or config.N, threads)
        if n_models < 1:
            raise DomainError(f"an ensemble needs at least one model, got {n_models}")
        self.arch = arch
        self.pool = pool
        self.config = config
        self.n_models = n_models

    def ensemble(self, repetition: int) -> List[PhaseModel]:
        seeds = member_seeds(self.config.seed, self.n_models, offset=repetition * self.n_models)
        reports = train_ensemble(self.arch, self.pool, self.config, seeds, self.threads)
        return [report.model for report in reports]


class FixedEnsembleProtocol(VotingProtocol):
    """Repetition ``r`` votes with the ``r``-th group of already trained models."""

    def __init__(self, groups: Sequence[Sequence[PhaseModel]], test_points, truth, N: int, threads: int = 1):
        super().__init__(test_points, truth, N, threads)
        if not groups or any(len(g) == 0 for g in groups):
            raise DomainError("every repetition needs at least one model")
        self.groups = [list(g) for g in groups]

    def ensemble(self, repetition: int) -> List[PhaseModel]:
        return self.groups[repetition]


def split_into_groups(models: Sequence[PhaseModel], R: int) -> List[List[PhaseModel]]:
    if R < 1 or len(models) % R:
        raise DomainError(f"{len(models)} model(s) cannot be split into {R} equal repetition groups")
    size = len(models) // R
    return [list(models[r * size:(r + 1) * size]) for r in range(R)]
