"""Measurement-only brickwork circuit.

Each step t applies, in order:
  1. X on every qubit i, recorded at x[t, i];
  2. ZZ on every bond i with i = t (mod 2), recorded at zz[t // 2, i];
  3. ZXZ on every triplet i with i = t (mod 3), recorded at zxz[t // 3, i].
Sites within a layer are visited left to right.
"""
import logging
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from app.core.exceptions import DomainError, ResourceError
from .kraus import CHANNEL_OBSERVABLE, kraus_pair
from .records import CircuitConfig, Dataset, TrajectoryRecord, grid_shapes
from .seeding import make_rng, trajectory_seeds
from .statevector import branch_probabilities, initial_state, measure

logger = logging.getLogger(__name__)

MAX_ENUMERATED_EVENTS = 20

StepObserver = Callable[[int, np.ndarray], None]


def step_events(t: int, L: int) -> Iterator[Tuple[str, int, int]]:
    """(channel, site, record row) for every measurement of step t, in order."""
    for i in range(L):
        yield 'x', i, t
    for i in range(t % 2, L - 1, 2):
        yield 'zz', i, t // 2
    for i in range(t % 3, L - 2, 3):
        yield 'zxz', i, t // 3


def event_schedule(T: int, L: int) -> List[Tuple[str, int, int, int]]:
    return [(channel, site, t, row) for t in range(T) for channel, site, row in step_events(t, L)]


class TrajectorySimulator:
    """Runs trajectories of one circuit configuration."""

    def __init__(self, config: CircuitConfig):
        self.config = config
        self.pairs = {
            'x': kraus_pair(CHANNEL_OBSERVABLE['x'], config.gamma_x),
            'zz': kraus_pair(CHANNEL_OBSERVABLE['zz'], config.gamma_zz),
            'zxz': kraus_pair(CHANNEL_OBSERVABLE['zxz'], config.gamma_zxz),
        }

    def run(self, seed: int, observer: Optional[StepObserver] = None) -> Tuple[TrajectoryRecord, np.ndarray]:
        """Simulate T steps from the initial product state.

        ``observer(t, state)`` is called with t = 0 before the first step and
        with t after each completed step.
        """
        L, T = self.config.L, self.config.T
        shapes = grid_shapes(T, L)
        grids = {name: np.ones(shape, dtype=np.int8) for name, shape in zip(('x', 'zz', 'zxz'), shapes)}
        rng = make_rng(seed)
        state = initial_state(L)
        if observer:
            observer(0, state)
        for t in range(T):
            for channel, site, row in step_events(t, L):
                state, outcome, _ = measure(state, self.pairs[channel], site, L, rng.random())
                grids[channel][row, site] = outcome
            if observer:
                observer(t + 1, state)
        record = TrajectoryRecord(grids['x'], grids['zz'], grids['zxz'], seed=int(seed))
        return record, state


def simulate_trajectory(config: CircuitConfig, seed: int) -> TrajectoryRecord:
    record, _ = TrajectorySimulator(config).run(seed)
    return record


def _simulate_block(config: CircuitConfig, seeds: np.ndarray):
    simulator = TrajectorySimulator(config)
    records = [simulator.run(int(seed))[0] for seed in seeds]
    return (
        np.stack([r.x_outcomes for r in records]),
        np.stack([r.zz_outcomes for r in records]),
        np.stack([r.zxz_outcomes for r in records]),
    )


def generate_dataset(config: CircuitConfig, M: int, threads: int = 1, block_size: int = 64) -> Dataset:
    """Simulate M trajectories of ``config``; record i uses trajectory_seed(..., i)."""
    if M < 1:
        raise DomainError(f"M must be at least 1, got {M}")
    if not config.nn_compatible:
        logger.warning(f"T={config.T} is not divisible by 6; {config.point_id} cannot be fed to the classifier")

    seeds = trajectory_seeds(config.master_seed, config.point_id, M)
    blocks = [seeds[start:start + block_size] for start in range(0, M, block_size)]
    logger.info(f"Simulating {M} trajectories for {config.point_id} (L={config.L}, T={config.T}) on {threads} worker(s)")
    parts = Parallel(n_jobs=max(1, threads))(delayed(_simulate_block)(config, block) for block in blocks)
    return Dataset(
        config=config,
        x=np.concatenate([p[0] for p in parts]),
        zz=np.concatenate([p[1] for p in parts]),
        zxz=np.concatenate([p[2] for p in parts]),
        seeds=seeds,
    )


def brute_force_outcome_distribution(config: CircuitConfig) -> Dict[Tuple[int, ...], float]:
    """Exact probability of every outcome sequence, by depth-first enumeration.

    Keys list outcomes in simulation order; zero-probability leaves are kept.
    """
    L = config.L
    schedule = event_schedule(config.T, L)
    if len(schedule) > MAX_ENUMERATED_EVENTS:
        raise ResourceError(f"{len(schedule)} measurement events exceed the enumeration limit of {MAX_ENUMERATED_EVENTS}")
    simulator = TrajectorySimulator(config)
    leaves: Dict[Tuple[int, ...], float] = {}

    def descend(depth: int, state: Optional[np.ndarray], prefix: Tuple[int, ...], probability: float):
        if depth == len(schedule):
            leaves[prefix] = probability
            return
        channel, site, _, _ = schedule[depth]
        if state is None:
            descend(depth + 1, None, prefix + (1,), 0.0)
            descend(depth + 1, None, prefix + (-1,), 0.0)
            return
        for outcome, (branch, p) in zip((1, -1), branch_probabilities(state, simulator.pairs[channel], site, L)):
            if p <= 0.0:
                descend(depth + 1, None, prefix + (outcome,), 0.0)
            else:
                descend(depth + 1, branch / np.sqrt(p), prefix + (outcome,), probability * p)

    descend(0, initial_state(L), (), 1.0)
    return leaves
