"""Entanglement diagnostics used as ground-truth oracles.

All entropies are in bits.
"""
import logging
import math
from typing import Iterable, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import svdvals

from app.core.exceptions import DomainError
from .records import CircuitConfig, EntropyReport
from .seeding import trajectory_seeds
from .simulator import TrajectorySimulator
from .statevector import qubit_count

logger = logging.getLogger(__name__)

EIGENVALUE_CLAMP = 1e-14


def _validated_subsystem(subsystem: Iterable[int], L: int) -> List[int]:
    qubits = sorted(set(int(q) for q in subsystem))
    if not qubits:
        raise DomainError("subsystem must be nonempty")
    if qubits[0] < 0 or qubits[-1] >= L:
        raise DomainError(f"subsystem {qubits} has qubits outside 0..{L - 1}")
    if len(qubits) == L:
        raise DomainError("subsystem must be a proper subset of the chain")
    return qubits


def schmidt_spectrum(state: np.ndarray, subsystem: Iterable[int]) -> np.ndarray:
    """Eigenvalues of the reduced density operator of ``subsystem``."""
    L = qubit_count(state)
    qubits = _validated_subsystem(subsystem, L)
    rest = [q for q in range(L) if q not in qubits]
    matrix = state.reshape([2] * L).transpose(qubits + rest).reshape(1 << len(qubits), -1)
    return svdvals(matrix, check_finite=False) ** 2


def von_neumann_entropy(state: np.ndarray, subsystem: Iterable[int]) -> float:
    spectrum = schmidt_spectrum(state, subsystem)
    # eigenvalues within the clamp of 0 or 1 contribute nothing
    spectrum = spectrum[(spectrum >= EIGENVALUE_CLAMP) & (spectrum <= 1.0 - EIGENVALUE_CLAMP)]
    return float(-np.sum(spectrum * np.log2(spectrum)))


def _region_entropy(state: np.ndarray, region: Sequence[int], L: int) -> float:
    # a pure state has zero entropy on the whole chain
    if len(set(region)) == L:
        return 0.0
    return von_neumann_entropy(state, region)


def mutual_information(state: np.ndarray, A: Iterable[int], B: Iterable[int]) -> float:
    """S_A + S_B - S_AB"""
    L = qubit_count(state)
    A, B = set(A), set(B)
    if not A or not B:
        raise DomainError("mutual information needs two nonempty regions")
    if A & B:
        raise DomainError(f"regions overlap on qubits {sorted(A & B)}")
    return (
        von_neumann_entropy(state, A)
        + von_neumann_entropy(state, B)
        - _region_entropy(state, sorted(A | B), L)
    )


def end_to_end_mutual_information(state: np.ndarray) -> float:
    L = qubit_count(state)
    return mutual_information(state, [0], [L - 1])


def topological_ee(state: np.ndarray) -> float:
    """S_AB + S_BC - S_B - S_ABC over equal quarters, with A and C at the two chain ends.

    Along the chain the quarters read A, B, D, C. Entanglement shared by the
    two ends counts twice; entanglement local to a cut cancels.
    """
    L = qubit_count(state)
    if L % 4:
        raise DomainError(f"topological entanglement entropy needs L divisible by 4, got {L}")
    q = L // 4
    A, B, C = list(range(0, q)), list(range(q, 2 * q)), list(range(3 * q, L))
    return (
        von_neumann_entropy(state, A + B)
        + von_neumann_entropy(state, B + C)
        - von_neumann_entropy(state, B)
        - von_neumann_entropy(state, A + B + C)
    )


def half_chain_entropy(state: np.ndarray) -> float:
    L = qubit_count(state)
    return von_neumann_entropy(state, range(L // 2))


def _trace_trajectory(config: CircuitConfig, seed: int, times: Sequence[int], with_tee: bool):
    wanted = set(times)
    curve = {}

    def observe(t, state):
        if t in wanted:
            curve[t] = half_chain_entropy(state)

    _, final = TrajectorySimulator(config).run(seed, observer=observe)
    mi = end_to_end_mutual_information(final)
    tee = topological_ee(final) if with_tee else None
    return [curve[t] for t in times], mi, tee


def _mean_and_se(values: np.ndarray, axis: int = 0):
    n = values.shape[axis]
    mean = values.mean(axis=axis)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, values.std(axis=axis, ddof=1) / math.sqrt(n)


def entropy_curve(config: CircuitConfig, sample_times: Sequence[int], n_traj: int,
                  threads: int = 1) -> EntropyReport:
    """Trajectory-averaged half-chain entropy at each sample time.

    Mutual information (end qubits) and TEE are taken at the last sample time.
    Trajectory i reuses the dataset seed of index i, so the curve describes the
    same trajectories a dataset of this configuration contains.
    """
    if n_traj < 1:
        raise DomainError(f"n_traj must be at least 1, got {n_traj}")
    times = sorted(set(int(t) for t in sample_times))
    if not times or times[0] < 0:
        raise DomainError(f"sample times must be nonnegative step indices, got {list(sample_times)}")
    run_config = config.with_depth(max(times[-1], 1))
    with_tee = config.L % 4 == 0
    if not with_tee:
        logger.warning(f"L={config.L} is not divisible by 4; skipping topological entanglement entropy")

    seeds = trajectory_seeds(config.master_seed, config.point_id, n_traj)
    rows = Parallel(n_jobs=max(1, threads))(
        delayed(_trace_trajectory)(run_config, int(seed), times, with_tee) for seed in seeds
    )
    s_half, s_half_se = _mean_and_se(np.array([r[0] for r in rows], dtype=np.float64))
    mi, mi_se = _mean_and_se(np.array([r[1] for r in rows], dtype=np.float64))
    s_topo = s_topo_se = None
    if with_tee:
        s_topo, s_topo_se = _mean_and_se(np.array([r[2] for r in rows], dtype=np.float64))
        s_topo, s_topo_se = float(s_topo), float(s_topo_se)
    logger.info(f"Entropy curve for {config.point_id}: S({times[-1]})={s_half[-1]:.4f} bits, I={float(mi):.4f} bits")
    return EntropyReport(
        times=times,
        s_half=[float(v) for v in s_half],
        s_half_se=[float(v) for v in s_half_se],
        mi=float(mi),
        mi_se=float(mi_se),
        s_topo=s_topo,
        s_topo_se=s_topo_se,
        n_traj=n_traj,
        config=config,
    )
