"""
SGD with momentum and L2 weight decay.

Velocity carries the learning rate:

    g = grad + weight_decay * w      (weights only; biases get no decay)
    v = momentum * v - lr * g
    w = w + v
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

from autodiff.tensor import NonFiniteError, ShapeError
from fcn.weights import WeightStore

WEIGHTS, BIAS = 0, 1


@dataclass
class OptimizerState:
    velocity: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    iteration: int = 0

    @classmethod
    def for_store(cls, store: WeightStore) -> "OptimizerState":
        """Zero velocity buffers shaped (and typed) like the store."""
        return cls(velocity={name: [np.zeros_like(a) for a in arrays] for name, arrays in store.items()})


def sgd_step(store: WeightStore, grads: Mapping[str, Sequence[np.ndarray]], state: OptimizerState, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0005) -> None:
    """
    Apply one update to `store` and `state` in place.

    Every gradient is validated before any blob is touched, so a rejected step
    leaves the weights and velocity unchanged.
    """
    for name, arrays in store.items():
        if name not in grads:
            raise ShapeError(f"no gradient for layer '{name}'")
        layer_grads = grads[name]
        if len(layer_grads) != len(arrays):
            raise ShapeError(f"layer '{name}' has {len(arrays)} blobs but {len(layer_grads)} gradients")
        for i, (w, g) in enumerate(zip(arrays, layer_grads)):
            if np.shape(g) != w.shape:
                raise ShapeError(f"gradient for {name}[{i}] has shape {np.shape(g)}, expected {w.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}[{i}]")

    for name, arrays in store.items():
        velocities = state.velocity.setdefault(name, [np.zeros_like(a) for a in arrays])
        for i, (w, g, v) in enumerate(zip(arrays, grads[name], velocities)):
            g = np.asarray(g, dtype=w.dtype)
            if i == WEIGHTS and weight_decay:
                g = g + w.dtype.type(weight_decay) * w
            v *= w.dtype.type(momentum)
            v -= w.dtype.type(lr) * g
            w += v
    state.iteration += 1
