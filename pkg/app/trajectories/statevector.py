"""Dense statevector kernels.

Qubit 0 is the most significant bit of the basis index, so an operator on
the contiguous qubits [site, site + a) acts on the middle axis of the state
reshaped to (2**site, 2**a, 2**(L - site - a)).
"""
import logging
import math
from typing import Tuple

import numpy as np
from django.conf import settings

from app.core.exceptions import DomainError, InternalConsistencyError, ResourceError
from .kraus import KrausPair, arity, kraus_pair

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-10
PROBABILITY_SLACK = 1e-12


def qubit_count(state: np.ndarray) -> int:
    L = int(state.shape[0]).bit_length() - 1
    if state.ndim != 1 or 1 << L != state.shape[0]:
        raise DomainError(f"statevector length {state.shape} is not a power of two")
    return L


def initial_state(L: int) -> np.ndarray:
    """(|0> + i|1>)/sqrt(2) on every qubit."""
    limit = getattr(settings, 'MIPT_MAX_QUBITS', 24)
    if L < 1:
        raise DomainError(f"need at least one qubit, got L={L}")
    if L > limit:
        raise ResourceError(f"L={L} exceeds the statevector limit of {limit} qubits")
    single = np.array([1.0, 1.0j], dtype=np.complex128) / math.sqrt(2)
    # the product state has equal magnitudes and phase i**popcount(index)
    popcount = np.zeros(1 << L, dtype=np.int64)
    index = np.arange(1 << L)
    for q in range(L):
        popcount += (index >> q) & 1
    phases = np.array([1, 1j, -1, -1j], dtype=np.complex128)[popcount % 4]
    return phases * (abs(single[0]) ** L)


def apply_local(state: np.ndarray, matrix: np.ndarray, site: int, L: int) -> np.ndarray:
    width = matrix.shape[0]
    blocks = state.reshape(1 << site, width, -1)
    return np.matmul(matrix, blocks).reshape(-1)


def _check_support(observable_arity: int, site: int, L: int):
    if site < 0 or site + observable_arity > L:
        raise DomainError(f"operator of arity {observable_arity} at site {site} does not fit in L={L}")


def measure(state: np.ndarray, pair: KrausPair, site: int, L: int, u: float) -> Tuple[np.ndarray, int, float]:
    """Apply the Kraus pair with outcome chosen by the uniform draw ``u``."""
    branch = apply_local(state, pair.m1, site, L)
    p1 = float(np.vdot(branch, branch).real)
    if not -PROBABILITY_SLACK <= p1 <= 1.0 + PROBABILITY_SLACK:
        raise InternalConsistencyError(f"outcome probability {p1!r} left [0, 1] measuring {pair.observable} at {site}")
    p1 = min(max(p1, 0.0), 1.0)
    if u < p1:
        outcome, weight = 1, p1
    else:
        branch = apply_local(state, pair.m2, site, L)
        outcome, weight = -1, float(np.vdot(branch, branch).real)
    if weight <= 0.0:
        raise InternalConsistencyError(f"sampled a zero-probability branch of {pair.observable} at {site}")
    branch /= math.sqrt(weight)
    norm = float(np.vdot(branch, branch).real)
    if abs(norm - 1.0) > NORM_TOLERANCE:
        raise InternalConsistencyError(f"post-measurement norm drifted to {norm!r}")
    return branch, outcome, p1


def apply_weak_measurement(state: np.ndarray, observable: str, site: int, gamma: float,
                           rng: np.random.Generator) -> Tuple[np.ndarray, int, float]:
    """Sample k with probability p_k, apply M_k and renormalise.

    Returns the post-measurement state, +1 for k=1 or -1 for k=2, and p1.
    """
    L = qubit_count(state)
    _check_support(arity(observable), site, L)
    return measure(state, kraus_pair(observable, gamma), site, L, rng.random())


def branch_probabilities(state: np.ndarray, pair: KrausPair, site: int, L: int):
    """Both unnormalised branches with their probabilities."""
    out = []
    for m in (pair.m1, pair.m2):
        branch = apply_local(state, m, site, L)
        out.append((branch, float(np.vdot(branch, branch).real)))
    return out


def expectation(state: np.ndarray, matrix: np.ndarray, site: int) -> float:
    L = qubit_count(state)
    return float(np.vdot(state, apply_local(state, matrix, site, L)).real)
