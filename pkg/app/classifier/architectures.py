"""Phase classifiers built from the neural primitives.

Three architectures are registered with ``ModelFactory``:

* ``cnn_attn``: one conv+BN+ReLU branch per measurement channel, spatial
  pooling, a fusion MLP, a temporal readout to one feature row per
  trajectory and pooling attention over the N trajectories of a set.
* ``cnn_mean``: the same network with the attention replaced by the plain
  mean over the N trajectories.
* ``mlp``: two hidden layers applied to each flattened trajectory; the set
  prediction is the mean of the per-trajectory predictions.
"""
import logging
import math
from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from django.conf import settings

from app.core.exceptions import DomainError, ModelError
from app.neural.functional import (
    BatchNormState, attention_pool, batch_norm2d, conv2d_3x3, cross_entropy_loss, dropout,
    global_avg_pool_spatial, layer_norm, linear, mean_cross_entropy, relu, softmax,
)
from app.neural.tensor import Parameter, Tensor, concat, transpose
from app.trajectories.records import CHANNELS, RecordBatch
from app.trajectories.seeding import make_rng
from .inputs import SUBLAYERS, channel_widths, flatten_records, reshape_records

logger = logging.getLogger(__name__)

N_CLASSES = 3
MLP_PROJECTION = 128
ARCH_KINDS = ('cnn_attn', 'cnn_mean', 'mlp')


def _norm_settings() -> Dict[str, float]:
    norm = getattr(settings, 'MIPT_NORM', {})
    return {
        'bn_eps': norm.get('bn_eps', 1e-5),
        'bn_momentum': norm.get('bn_momentum', 0.1),
        'ln_eps': norm.get('ln_eps', 1e-5),
    }


@dataclass(frozen=True)
class ArchHyper:
    T: int
    L: int
    kind: str = 'cnn_attn'
    h1: int = 8
    h2: int = 5
    hidden: int = 64
    channels: Tuple[str, ...] = CHANNELS
    dropout_p: float = 0.2
    n_classes: int = N_CLASSES

    def __post_init__(self):
        object.__setattr__(self, 'channels', tuple(self.channels))
        if self.kind not in ARCH_KINDS:
            raise DomainError(f"unknown architecture {self.kind!r}; expected one of {ARCH_KINDS}")
        if self.h1 < 1 or self.h2 < 1 or self.hidden < 1:
            raise DomainError(f"widths must be at least 1, got h1={self.h1}, h2={self.h2}, h={self.hidden}")
        if self.T < 6 or self.T % 6:
            raise DomainError(f"T must be a positive multiple of 6, got {self.T}")
        if not self.channels or len(set(self.channels)) != len(self.channels) or not set(self.channels) <= set(CHANNELS):
            raise DomainError(f"channels must be a nonempty subset of {CHANNELS}, got {self.channels}")
        if list(self.channels) != [c for c in CHANNELS if c in self.channels]:
            raise DomainError(f"channels must keep the order {CHANNELS}, got {self.channels}")
        widths = channel_widths(self.L)
        for name in self.channels:
            if widths[name] < 1:
                raise DomainError(f"L={self.L} leaves no room for the {name} channel")
        if self.n_classes != N_CLASSES:
            raise DomainError(f"the classifier has exactly {N_CLASSES} classes")
        if not 0.0 <= self.dropout_p < 1.0:
            raise DomainError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def time_blocks(self) -> int:
        return self.T // 6

    @property
    def input_dimension(self) -> int:
        widths = channel_widths(self.L)
        rows = {'x': self.T, 'zz': self.T // 2, 'zxz': self.T // 3}
        return sum(rows[name] * widths[name] for name in self.channels)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['channels'] = list(self.channels)
        return data


class PhaseModel(ABC):
    """Abstract base class for set classifiers.

    Subclasses declare their parameters in ``build`` by calling ``weight``,
    ``zeros`` and ``ones`` in a fixed order, which makes initialisation a
    pure function of the seed.
    """

    kind: str = ''

    def __init__(self, arch: ArchHyper, seed: int = 0):
        if arch.kind != self.kind:
            raise DomainError(f"{type(self).__name__} cannot be built from a {arch.kind!r} architecture")
        self.arch = arch
        self.seed = seed
        self._params: 'OrderedDict[str, Parameter]' = OrderedDict()
        self._batch_norms: 'OrderedDict[str, BatchNormState]' = OrderedDict()
        self._rng = make_rng(seed)
        self.norm = _norm_settings()
        self.build()
        del self._rng

    # parameter declaration helpers

    def _register(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise DomainError(f"duplicate parameter name {name}")
        param = Parameter(data, name)
        self._params[name] = param
        return param

    def weight(self, name: str, shape: Tuple[int, ...], fan_in: int) -> Parameter:
        bound = 1.0 / math.sqrt(fan_in)
        return self._register(name, self._rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Parameter:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape: Tuple[int, ...]) -> Parameter:
        return self._register(name, np.ones(shape))

    def batch_norm(self, name: str, channels: int) -> BatchNormState:
        state = BatchNormState(
            scale=self.ones(f"{name}.scale", (channels,)),
            shift=self.zeros(f"{name}.shift", (channels,)),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=self.norm['bn_momentum'],
            eps=self.norm['bn_eps'],
        )
        self._batch_norms[name] = state
        return state

    def ln(self, x: Tensor, prefix: str) -> Tensor:
        return layer_norm(x, self._params[f"{prefix}.scale"], self._params[f"{prefix}.shift"], self.norm['ln_eps'])

    def p(self, name: str) -> Parameter:
        return self._params[name]

    # public surface

    @abstractmethod
    def build(self):
        """Declare every parameter"""
        pass

    @abstractmethod
    def forward_set(self, batch: RecordBatch, training: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
        """Probability 3-vector for one set of trajectories"""
        pass

    def training_loss(self, batch: RecordBatch, label: int, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Cross-entropy of the train-mode set prediction against a 0-based class index."""
        return cross_entropy_loss(self.forward_set(batch, training=True, rng=rng), label)

    def parameters(self) -> List[Parameter]:
        return list(self._params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def state_tensors(self) -> 'OrderedDict[str, np.ndarray]':
        """Parameters followed by batch-norm running statistics, in declaration order."""
        tensors = OrderedDict((name, p.data) for name, p in self._params.items())
        for name, state in self._batch_norms.items():
            tensors[f"{name}.running_mean"] = state.running_mean
            tensors[f"{name}.running_var"] = state.running_var
        return tensors

    def load_state_tensors(self, tensors: Dict[str, np.ndarray]):
        expected = self.state_tensors()
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise DomainError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
        for name, values in tensors.items():
            if np.shape(values) != expected[name].shape:
                raise DomainError(f"{name} has shape {np.shape(values)}, expected {expected[name].shape}")
        for name, param in self._params.items():
            param.assign(tensors[name])
        for name, state in self._batch_norms.items():
            state.running_mean = np.array(tensors[f"{name}.running_mean"], dtype=np.float64)
            state.running_var = np.array(tensors[f"{name}.running_var"], dtype=np.float64)

    def check_geometry(self, batch: RecordBatch):
        if batch.T != self.arch.T or batch.L != self.arch.L:
            raise DomainError(
                f"records of geometry T={batch.T}, L={batch.L} do not fit a model built for "
                f"T={self.arch.T}, L={self.arch.L}"
            )

    @staticmethod
    def _finite(y: Tensor, stage: str) -> Tensor:
        if not np.all(np.isfinite(y.data)):
            raise ModelError(f"non-finite activation after {stage}")
        return y


class CnnAttentionModel(PhaseModel):
    kind = 'cnn_attn'

    def build(self):
        a = self.arch
        F = a.time_blocks
        for name in a.channels:
            sublayers = SUBLAYERS[name]
            self.weight(f"conv.{name}.weight", (a.h1, sublayers, 3, 3), fan_in=sublayers * 9)
            self.batch_norm(f"bn.{name}", a.h1)
        fused = len(a.channels) * a.h1
        self.weight('fusion.weight', (fused, a.h2), fan_in=fused)
        self.zeros('fusion.bias', (a.h2,))
        self.ones('fusion_ln.scale', (a.h2,))
        self.zeros('fusion_ln.shift', (a.h2,))
        self.weight('readout.weight', (a.h2, 1), fan_in=a.h2)
        self.zeros('readout.bias', (1,))
        self.build_pooling(F)
        self.ones('head_ln1.scale', (F,))
        self.zeros('head_ln1.shift', (F,))
        self.weight('head.weight', (F, F), fan_in=F)
        self.zeros('head.bias', (F,))
        self.ones('head_ln2.scale', (F,))
        self.zeros('head_ln2.shift', (F,))
        self.weight('output.weight', (F, N_CLASSES), fan_in=F)
        self.zeros('output.bias', (N_CLASSES,))

    def build_pooling(self, F: int):
        self.weight('attention.O', (1, F), fan_in=F)
        self.weight('attention.W_K', (F, F), fan_in=F)
        self.weight('attention.W_V', (F, F), fan_in=F)

    def pool(self, Z: Tensor) -> Tensor:
        return attention_pool(Z, self.p('attention.O'), self.p('attention.W_K'), self.p('attention.W_V'))

    def trajectory_features(self, batch: RecordBatch, training: bool,
                            rng: Optional[np.random.Generator]) -> Tensor:
        """Per-trajectory readout Z of shape [N, T/6]."""
        self.check_geometry(batch)
        inputs = reshape_records(batch, self.arch.channels)
        pooled = []
        for name in self.arch.channels:
            x = Tensor(inputs[name])
            features = relu(batch_norm2d(conv2d_3x3(x, self.p(f"conv.{name}.weight")), self._batch_norms[f"bn.{name}"], training))
            pooled.append(global_avg_pool_spatial(features))
        stacked = transpose(concat(pooled, axis=1), (0, 2, 1))  # [N, T/6, channels * h1]
        fused = relu(linear(stacked, self.p('fusion.weight'), self.p('fusion.bias')))
        fused = dropout(self.ln(fused, 'fusion_ln'), self.arch.dropout_p, training, rng)
        Z = linear(fused, self.p('readout.weight'), self.p('readout.bias'))
        return Z.reshape(len(batch), self.arch.time_blocks)

    def forward_set(self, batch, training=False, rng=None):
        Z = self.trajectory_features(batch, training, rng)
        q = self.pool(Z)
        normed = self.ln(q, 'head_ln1')
        q_out = self.ln(normed + relu(linear(normed, self.p('head.weight'), self.p('head.bias'))), 'head_ln2')
        logits = linear(q_out, self.p('output.weight'), self.p('output.bias'))
        y = softmax(logits, axis=-1).reshape(N_CLASSES)
        return self._finite(y, 'the output softmax')


class CnnMeanModel(CnnAttentionModel):
    """Ablation: the set is collapsed by averaging Z over trajectories."""
    kind = 'cnn_mean'

    def build_pooling(self, F: int):
        pass

    def pool(self, Z: Tensor) -> Tensor:
        return Z.mean(axis=0, keepdims=True)


class MlpModel(PhaseModel):
    kind = 'mlp'

    def build(self):
        a = self.arch
        D = a.input_dimension
        self.weight('W1', (D, MLP_PROJECTION), fan_in=D)
        self.zeros('b1', (MLP_PROJECTION,))
        self.weight('W2', (MLP_PROJECTION, a.hidden), fan_in=MLP_PROJECTION)
        self.zeros('b2', (a.hidden,))
        self.weight('W_out', (a.hidden, N_CLASSES), fan_in=a.hidden)
        self.zeros('b_out', (N_CLASSES,))

    def trajectory_predictions(self, batch: RecordBatch) -> Tensor:
        """[N, 3] probabilities, one row per trajectory."""
        self.check_geometry(batch)
        V = Tensor(flatten_records(batch, self.arch.channels))
        if V.shape[1] != self.arch.input_dimension:
            raise DomainError(f"flattened records have {V.shape[1]} entries, expected D={self.arch.input_dimension}")
        hidden = relu(linear(relu(linear(V, self.p('W1'), self.p('b1'))), self.p('W2'), self.p('b2')))
        return self._finite(softmax(linear(hidden, self.p('W_out'), self.p('b_out')), axis=-1), 'the MLP head')

    def forward_set(self, batch, training=False, rng=None):
        return self.trajectory_predictions(batch).mean(axis=0)

    def training_loss(self, batch, label, rng=None):
        return mean_cross_entropy(self.trajectory_predictions(batch), label)


class ModelFactory:
    """Factory for creating phase models"""

    _models = {}

    @classmethod
    def register_model(cls, kind: str, model_class):
        """Register a new architecture"""
        cls._models[kind] = model_class

    @classmethod
    def create_model(cls, arch: ArchHyper, seed: int = 0) -> PhaseModel:
        """Create a freshly initialised model"""
        if arch.kind not in cls._models:
            raise DomainError(f"Unknown architecture: {arch.kind}")
        return cls._models[arch.kind](arch, seed)

    @classmethod
    def get_available_models(cls) -> List[str]:
        """Get list of available architectures"""
        return list(cls._models.keys())


ModelFactory.register_model('cnn_attn', CnnAttentionModel)
ModelFactory.register_model('cnn_mean', CnnMeanModel)
ModelFactory.register_model('mlp', MlpModel)
