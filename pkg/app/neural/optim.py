import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np
from django.conf import settings

from app.core.exceptions import DomainError, TrainingError, UsageError
from .tensor import Parameter

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise DomainError(f"learning rate must be positive, got {self.lr}")

    @classmethod
    def from_settings(cls, lr: float) -> 'AdamState':
        adam = getattr(settings, 'MIPT_ADAM', {})
        return cls(
            lr=lr,
            beta1=adam.get('beta1', 0.9),
            beta2=adam.get('beta2', 0.999),
            eps=adam.get('eps', 1e-8),
        )


def adam_step(params: Sequence[Parameter], opt: AdamState):
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise UsageError("parameter names must be unique within one optimizer")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in {p.name} at step {opt.t + 1}")

    opt.t += 1
    correction1 = 1.0 - opt.beta1 ** opt.t
    correction2 = 1.0 - opt.beta2 ** opt.t
    for p in params:
        m = opt.m.setdefault(p.name, np.zeros_like(p.data))
        v = opt.v.setdefault(p.name, np.zeros_like(p.data))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * p.grad
        v *= opt.beta2
        v += (1.0 - opt.beta2) * p.grad ** 2
        p.data -= opt.lr * (m / correction1) / (np.sqrt(v / correction2) + opt.eps)
        p.bump_version()
        p.zero_grad()
