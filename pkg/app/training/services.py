"""Training protocols.

``train`` reshuffles every class each epoch, cuts it into sets of N and
interleaves the labelled sets of all classes in one global random order;
one optimizer step consumes one set. ``train_resampled`` instead draws each
set with replacement from its class pool, cycling through the classes.
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from django.conf import settings
from joblib import Parallel, delayed

from app.classifier.architectures import ArchHyper, PhaseModel
from app.classifier.prediction import init_model
from app.core.exceptions import DomainError, TrainingError
from app.core.storage import PathLike, atomic_write_text
from app.neural.optim import AdamState, adam_step
from app.trajectories.records import Dataset
from app.trajectories.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

CLASS_NAMES = {1: 'trivial', 2: 'lr', 3: 'spt'}

# stream labels chained into the run seed
SHUFFLE_STREAM = 1
DROPOUT_STREAM = 2
MODEL_STREAM = 3


@dataclass
class TrainConfig:
    lr: float = 2e-5
    epochs: int = 30
    N: int = 25
    seed: int = 0
    dropout_p: float = 0.2
    resample: bool = False
    n_step: int = 150

    def __post_init__(self):
        if not self.lr > 0:
            raise DomainError(f"lr must be positive, got {self.lr}")
        if self.N < 1:
            raise DomainError(f"N must be at least 1, got {self.N}")
        if self.epochs < 0:
            raise DomainError(f"epochs must be nonnegative, got {self.epochs}")
        if self.n_step < 1:
            raise DomainError(f"n_step must be at least 1, got {self.n_step}")

    @classmethod
    def from_settings(cls, **overrides) -> 'TrainConfig':
        defaults = getattr(settings, 'MIPT_TRAINING', {})
        values = {
            'lr': defaults.get('lr', 2e-5),
            'epochs': defaults.get('epochs', 30),
            'N': defaults.get('set_size', 25),
            'dropout_p': defaults.get('dropout_p', 0.2),
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class LabeledPool:
    """Vertex datasets keyed by 1-based class label."""
    datasets: Dict[int, Dataset]

    @property
    def T(self) -> int:
        return next(iter(self.datasets.values())).T

    @property
    def L(self) -> int:
        return next(iter(self.datasets.values())).L

    @property
    def size(self) -> int:
        return sum(d.M for d in self.datasets.values())

    def labels(self) -> List[int]:
        return sorted(self.datasets)


@dataclass
class TrainReport:
    model: PhaseModel
    epoch_losses: List[float] = field(default_factory=list)
    epoch_wall_ms: List[float] = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0
    dropped: int = 0

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'epoch': np.arange(1, len(self.epoch_losses) + 1),
            'mean_loss': self.epoch_losses,
            'wall_ms': self.epoch_wall_ms,
        })


def vertex_label(dataset: Dataset) -> int:
    """Class of the dominant measurement: X trivial, ZZ long-range, ZXZ SPT."""
    return int(np.argmax(dataset.config.gammas)) + 1


def build_pool(*datasets: Dataset, labels: Optional[Sequence[int]] = None) -> LabeledPool:
    """Attach labels 1, 2, 3; without explicit labels each dataset is tagged by its dominant strength."""
    if len(datasets) != 3:
        raise DomainError(f"a training pool needs three vertex datasets, got {len(datasets)}")
    geometry = {(d.T, d.L) for d in datasets}
    if len(geometry) != 1:
        raise DomainError(f"vertex datasets disagree on geometry: {sorted(geometry)}")
    labels = list(labels) if labels is not None else [vertex_label(d) for d in datasets]
    if sorted(labels) != [1, 2, 3]:
        raise DomainError(f"vertex datasets must cover classes 1, 2 and 3 once each, got labels {labels}")
    pool = LabeledPool({label: dataset for label, dataset in sorted(zip(labels, datasets), key=lambda p: p[0])})
    logger.info(f"Built training pool of {pool.size} trajectories (T={pool.T}, L={pool.L})")
    return pool


def _check_model(model: PhaseModel, pool: LabeledPool):
    if (model.arch.T, model.arch.L) != (pool.T, pool.L):
        raise DomainError(
            f"model geometry T={model.arch.T}, L={model.arch.L} does not match pool T={pool.T}, L={pool.L}"
        )


def _optimizer_step(model: PhaseModel, opt: AdamState, dataset: Dataset, indices, label: int,
                    dropout_rng: np.random.Generator, epoch: int, step: int) -> float:
    loss = model.training_loss(dataset.batch(indices), label - 1, dropout_rng)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value} at epoch {epoch}, step {step} "
            f"(class {label}, point {dataset.config.point_id})"
        )
    loss.backward()
    adam_step(model.parameters(), opt)
    return value


def train(model: PhaseModel, pool: LabeledPool, config: TrainConfig,
          progress: Optional[Callable[[int, float], None]] = None) -> TrainReport:
    _check_model(model, pool)
    shuffle_rng = make_rng(derive_seed(config.seed, SHUFFLE_STREAM))
    dropout_rng = make_rng(derive_seed(config.seed, DROPOUT_STREAM))
    opt = AdamState.from_settings(config.lr)
    report = TrainReport(model=model)
    started = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        epoch_started = time.perf_counter()
        labelled_sets = []
        for label in pool.labels():
            dataset = pool.datasets[label]
            sets, remainder = divmod(dataset.M, config.N)
            if sets == 0:
                raise DomainError(f"class {label} holds {dataset.M} trajectories, fewer than one set of {config.N}")
            if remainder and epoch == 1:
                logger.warning(f"Class {label}: dropping {remainder} trajectories per epoch (N={config.N}, M={dataset.M})")
            report.dropped += remainder
            order = shuffle_rng.permutation(dataset.M)
            labelled_sets.extend((label, order[j * config.N:(j + 1) * config.N]) for j in range(sets))

        losses = []
        for position in shuffle_rng.permutation(len(labelled_sets)):
            label, indices = labelled_sets[position]
            losses.append(_optimizer_step(model, opt, pool.datasets[label], indices, label,
                                          dropout_rng, epoch, report.steps + 1))
            report.steps += 1

        mean_loss = float(np.mean(losses))
        report.epoch_losses.append(mean_loss)
        report.epoch_wall_ms.append((time.perf_counter() - epoch_started) * 1000.0)
        logger.info(f"Epoch {epoch}/{config.epochs}: mean loss {mean_loss:.5f} over {len(losses)} steps")
        if progress:
            progress(epoch, mean_loss)

    report.wall_time = time.perf_counter() - started
    return report


def train_resampled(model: PhaseModel, pool: LabeledPool, config: TrainConfig,
                    progress: Optional[Callable[[int, float], None]] = None) -> TrainReport:
    """Each epoch runs n_step iterations; an iteration draws N trajectories with
    replacement from every class in turn and takes one step per class."""
    _check_model(model, pool)
    draw_rng = make_rng(derive_seed(config.seed, SHUFFLE_STREAM))
    dropout_rng = make_rng(derive_seed(config.seed, DROPOUT_STREAM))
    opt = AdamState.from_settings(config.lr)
    report = TrainReport(model=model)
    started = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        epoch_started = time.perf_counter()
        losses = []
        for _ in range(config.n_step):
            for label in pool.labels():
                dataset = pool.datasets[label]
                indices = draw_rng.integers(0, dataset.M, size=config.N)
                losses.append(_optimizer_step(model, opt, dataset, indices, label,
                                              dropout_rng, epoch, report.steps + 1))
                report.steps += 1
        mean_loss = float(np.mean(losses))
        report.epoch_losses.append(mean_loss)
        report.epoch_wall_ms.append((time.perf_counter() - epoch_started) * 1000.0)
        logger.info(f"Resampled epoch {epoch}/{config.epochs}: mean loss {mean_loss:.5f} "
                    f"({config.n_step} draws of {config.N} per class)")
        if progress:
            progress(epoch, mean_loss)

    report.wall_time = time.perf_counter() - started
    return report


def run_protocol(model: PhaseModel, pool: LabeledPool, config: TrainConfig) -> TrainReport:
    return train_resampled(model, pool, config) if config.resample else train(model, pool, config)


def _train_member(arch: ArchHyper, pool: LabeledPool, config: TrainConfig, seed: int) -> TrainReport:
    member_config = replace(config, seed=seed)
    model = init_model(replace(arch, dropout_p=config.dropout_p), derive_seed(seed, MODEL_STREAM))
    return run_protocol(model, pool, member_config)


def train_ensemble(arch: ArchHyper, pool: LabeledPool, config: TrainConfig, seeds: Sequence[int],
                   threads: int = 1) -> List[TrainReport]:
    """Independent members, one per seed; results do not depend on ``threads``."""
    if not seeds:
        raise DomainError("an ensemble needs at least one member seed")
    logger.info(f"Training {len(seeds)} {arch.kind} member(s) on {threads} worker(s)")
    return Parallel(n_jobs=max(1, threads))(
        delayed(_train_member)(arch, pool, config, int(seed)) for seed in seeds
    )


def member_seeds(base_seed: int, count: int, offset: int = 0) -> List[int]:
    return [derive_seed(base_seed, offset + i) for i in range(count)]


def write_training_log(report: TrainReport, path: PathLike):
    return atomic_write_text(path, report.log_frame().to_csv(index=False))
