"""Weak-measurement Kraus pairs for the X, ZZ and ZXZ observables.

    M1 = cos(theta) P+ + sin(theta) P-
    M2 = sin(theta) P+ + cos(theta) P-,   P± = (I ± Q)/2,  theta = (1 - gamma) pi/4

gamma = 1 gives the projectors, gamma = 0 gives M1 = M2 = I/sqrt(2).
"""
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from app.core.exceptions import DomainError

PAULI_I = np.eye(2, dtype=np.complex128)
PAULI_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)

OBSERVABLES = {
    'X': (PAULI_X,),
    'ZZ': (PAULI_Z, PAULI_Z),
    'ZXZ': (PAULI_Z, PAULI_X, PAULI_Z),
}

CHANNEL_OBSERVABLE = {'x': 'X', 'zz': 'ZZ', 'zxz': 'ZXZ'}


def theta_of_gamma(gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"measurement strength must lie in [0, 1], got {gamma}")
    return (1.0 - gamma) * math.pi / 4


def observable_matrix(observable: str) -> np.ndarray:
    try:
        factors = OBSERVABLES[observable]
    except KeyError:
        raise DomainError(f"unknown observable {observable!r}; expected one of {sorted(OBSERVABLES)}")
    matrix = np.array([[1.0]], dtype=np.complex128)
    for factor in factors:
        matrix = np.kron(matrix, factor)
    return matrix


def arity(observable: str) -> int:
    return len(OBSERVABLES[observable])


@dataclass(frozen=True)
class KrausPair:
    m1: np.ndarray
    m2: np.ndarray
    theta: float
    observable: str

    @property
    def arity(self) -> int:
        return arity(self.observable)

    def completeness_defect(self) -> float:
        """max |M1^dag M1 + M2^dag M2 - I|"""
        total = self.m1.conj().T @ self.m1 + self.m2.conj().T @ self.m2
        return float(np.max(np.abs(total - np.eye(total.shape[0]))))


@lru_cache(maxsize=None)
def kraus_pair(observable: str, gamma: float) -> KrausPair:
    theta = theta_of_gamma(gamma)
    q = observable_matrix(observable)
    identity = np.eye(q.shape[0], dtype=np.complex128)
    plus = (identity + q) / 2
    minus = (identity - q) / 2
    if gamma == 0.0:
        m1, m2 = identity / math.sqrt(2), identity / math.sqrt(2)
    elif gamma == 1.0:
        m1, m2 = plus, minus
    else:
        c, s = math.cos(theta), math.sin(theta)
        m1 = c * plus + s * minus
        m2 = s * plus + c * minus
    m1.setflags(write=False)
    m2.setflags(write=False)
    return KrausPair(m1=m1, m2=m2, theta=theta, observable=observable)
