"""Hyperparameter and data-size sweeps.

A sweep fixes a base configuration, varies one parameter and runs the
retraining vote protocol for each value. Datasets are simulated once at the
largest size the sweep needs; smaller values take leading trajectories,
leading time steps or a central window of qubits.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.classifier.architectures import ArchHyper
from app.core.circuit_breaker import PointCircuitBreaker
from app.core.exceptions import DomainError
from app.evaluation.services import GridPoint, RetrainingProtocol, accuracy_report
from app.training.services import TrainConfig, build_pool
from app.trajectories.records import CHANNELS, Dataset, crop_dataset, truncate_dataset
from app.trajectories.seeding import derive_seed
from app.trajectories.simulator import generate_dataset
from .services import vertex_configs

logger = logging.getLogger(__name__)

SWEEP_PARAMS = ('h1', 'h2', 'M', 'N', 'T', 'LA')
# qubits a channel needs before its grid has a column
CHANNEL_MIN_WIDTH = {'x': 1, 'zz': 2, 'zxz': 3}
TEST_STREAM = 7


@dataclass
class SweepBase:
    L: int = 12
    T: int = 72
    M: int = 10000
    N: int = 25
    h1: int = 8
    h2: int = 5
    lr: float = 2e-5
    epochs: int = 30
    seed: int = 0
    n_models: int = 10
    R: int = 10
    eval_M: int = 1000
    kind: str = 'cnn_attn'
    channels: Tuple[str, ...] = CHANNELS
    dropout_p: float = 0.2


def head(dataset: Dataset, M: int) -> Dataset:
    if M > dataset.M:
        raise DomainError(f"cannot take {M} trajectories from a dataset of {dataset.M}")
    return Dataset(dataset.config, dataset.x[:M], dataset.zz[:M], dataset.zxz[:M], dataset.seeds[:M],
                   window=dataset.window)


def channels_for_width(width: int, channels: Sequence[str] = CHANNELS) -> Tuple[str, ...]:
    kept = tuple(c for c in channels if width >= CHANNEL_MIN_WIDTH[c])
    if not kept:
        raise DomainError(f"no channel survives a window of {width} qubit(s)")
    return kept


def parse_values(param: str, values: Sequence[str]) -> List[int]:
    if param not in SWEEP_PARAMS:
        raise DomainError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    try:
        parsed = [int(v) for v in values]
    except ValueError as e:
        raise DomainError(f"sweep values for {param} must be integers: {e}") from e
    if not parsed or min(parsed) < 1:
        raise DomainError(f"sweep values for {param} must be positive, got {list(values)}")
    return parsed


class Sweep:
    def __init__(self, param: str, values: Sequence[int], base: SweepBase,
                 test_points: Sequence[GridPoint], truth: Mapping[str, int], threads: int = 1):
        self.param = param
        self.values = list(values)
        self.base = base
        self.test_points = list(test_points)
        self.truth = dict(truth)
        self.threads = threads
        self._check_values()

    def _check_values(self):
        b = self.base
        for value in self.values:
            if self.param == 'M' and value > b.M:
                raise DomainError(f"M={value} exceeds the simulated pool of {b.M}")
            if self.param == 'T' and (value % 6 or value > b.T):
                raise DomainError(f"T={value} must be a multiple of 6 not above {b.T}")
            if self.param == 'LA' and (value > b.L or (b.L - value) % 2):
                raise DomainError(f"L_A={value} needs a central window of L={b.L}")

    def simulate(self):
        b = self.base
        train_seed = b.seed
        test_seed = derive_seed(b.seed, TEST_STREAM)
        self.vertex_data = [generate_dataset(c, b.M, self.threads) for c in vertex_configs(b.L, b.T, train_seed)]
        self.test_data = {p.point_id: generate_dataset(p.circuit(b.L, b.T, test_seed), b.eval_M, self.threads)
                          for p in self.test_points}

    def _view(self, dataset: Dataset, value: int, training: bool) -> Dataset:
        if self.param == 'T':
            return truncate_dataset(dataset, value)
        if self.param == 'LA':
            return crop_dataset(dataset, value)
        if self.param == 'M' and training:
            return head(dataset, value)
        return dataset

    def run_value(self, value: int) -> Dict[str, object]:
        b = self.base
        arch_fields = dict(T=b.T, L=b.L, kind=b.kind, h1=b.h1, h2=b.h2, channels=b.channels, dropout_p=b.dropout_p)
        N = b.N
        if self.param in ('h1', 'h2'):
            arch_fields[self.param] = value
        elif self.param == 'N':
            N = value
        elif self.param == 'T':
            arch_fields['T'] = value
        elif self.param == 'LA':
            arch_fields['L'] = value
            arch_fields['channels'] = channels_for_width(value, b.channels)
        arch = ArchHyper(**arch_fields)

        pool = build_pool(*[self._view(d, value, training=True) for d in self.vertex_data])
        test_points = [(p, self._view(self.test_data[p.point_id], value, training=False)) for p in self.test_points]
        config = TrainConfig(lr=b.lr, epochs=b.epochs, N=N, seed=b.seed, dropout_p=b.dropout_p)
        protocol = RetrainingProtocol(arch, pool, config, b.n_models, test_points, self.truth, N, self.threads)
        results = [protocol(r) for r in range(b.R)]

        reports = {}
        for role in sorted({p.role for p, _ in protocol.test_points}):
            ids = [p.point_id for p, _ in protocol.test_points if p.role == role]
            reports[role] = accuracy_report(results, role, ids)
        logger.info(f"Sweep {self.param}={value}: " +
                    ", ".join(f"{role} P={r.mean:.3f}" for role, r in reports.items()))
        return {'reports': reports, 'channels': arch.channels}

    def run(self, guard: Optional[PointCircuitBreaker] = None) -> pd.DataFrame:
        self.simulate()
        rows = []
        for value in self.values:
            if guard is None:
                outcome = self.run_value(value)
            else:
                outcome = guard.call(f'{self.param}={value}', self.run_value, value)
            if outcome is None:
                rows.append({'param': self.param, 'value': value, 'role': '', 'channels': '',
                             'P_mean': np.nan, 'SE': np.nan, 'R': 0})
                continue
            for role, report in outcome['reports'].items():
                rows.append({
                    'param': self.param,
                    'value': value,
                    'role': role,
                    'channels': ','.join(outcome['channels']),
                    'P_mean': report.mean,
                    'SE': report.se if report.se is not None else np.nan,
                    'R': report.R,
                })
        return pd.DataFrame(rows, columns=['param', 'value', 'role', 'channels', 'P_mean', 'SE', 'R'])

    def snapshot(self) -> dict:
        return {'param': self.param, 'values': self.values, **asdict(self.base)}
