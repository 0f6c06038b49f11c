"""
Finite-difference gradient checking.

Used by the gradient suite to compare backward() against central differences
in 64-bit mode.
"""

from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from autodiff.tensor import Tensor


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, h: float = 1e-5,
                       indices: Optional[Iterable[Tuple[int, ...]]] = None) -> np.ndarray:
    """
    Central differences of a scalar function with respect to `array`, perturbed in place.

    Args:
        fn: zero-argument callable recomputing the scalar from the current array contents
        array: the array to perturb (restored afterwards)
        h: step size
        indices: subset of positions to probe; all positions when None

    Returns:
        Array shaped like `array`; positions not probed are left at 0.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    positions = indices if indices is not None else np.ndindex(*array.shape)
    for index in positions:
        original = array[index]
        array[index] = original + h
        plus = fn()
        array[index] = original - h
        minus = fn()
        array[index] = original
        grad[index] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a|| + ||n||, tiny), a symmetric relative error over whole arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-300)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradient_relative_error(build: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor],
                            upstream: Optional[np.ndarray] = None, h: float = 1e-5) -> float:
    """
    Worst relative error between backward() and central differences over every input.

    `build` maps the input tensors to an output tensor; the scalar being differentiated
    is sum(output * upstream) (upstream defaults to all ones). Run inside float64_mode().
    """
    for tensor in inputs:
        tensor.requires_grad = True
        tensor.zero_grad()

    output = build(inputs)
    weights = np.ones_like(output.data) if upstream is None else upstream
    output.backward(weights.astype(output.data.dtype))

    def scalar():
        return float((build(inputs).data * weights).sum())

    worst = 0.0
    for tensor in inputs:
        numeric = numerical_gradient(scalar, tensor.data, h=h)
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
