"""
FCN Model Module
----------------
Runs a (NetworkSpec, WeightStore) pair on images.

`FCNModel` interprets the spec layer by layer on top of the autodiff ops. The
same graph serves training (logits + loss + parameter gradients, dropout on)
and inference (softmax heatmap, dropout off, no graph recorded).

A model is read-only during inference, so one instance can be shared across
prediction worker threads.
"""

import logging
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from autodiff import ops
from autodiff.tensor import ShapeError, Tensor
from fcn.network_spec import INPUT_NAME, NetworkSpec, SpecError, infer_shapes
from fcn.weights import WeightStore, check_store

logger = logging.getLogger("cardiac_fcn.fcn")

MIN_INPUT_SIZE = 32

ArrayLike = Union[np.ndarray, Tensor]


class FCNModel:
    def __init__(self, spec: NetworkSpec, store: WeightStore):
        """
        Args:
            spec: the architecture
            store: weights covering every parameterized layer of `spec` (SpecMismatchError otherwise)
        """
        check_store(spec, store)
        self.spec = spec
        self.store = store

    def _image_tensor(self, image: ArrayLike) -> Tensor:
        tensor = image if isinstance(image, Tensor) else Tensor(image)
        if tensor.data.ndim != 4:
            raise ShapeError(f"expected an (n, c, h, w) image batch, got shape {tensor.shape}")
        if tensor.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected {self.spec.in_channels} input channel(s), got {tensor.shape[1]}")
        try:
            infer_shapes(self.spec, tensor.shape[2], tensor.shape[3])
        except SpecError as e:
            raise ShapeError(f"input {tensor.shape[2]}x{tensor.shape[3]} is too small for this network: {e}") from e
        return tensor

    def parameters(self, requires_grad: bool = False) -> Dict[str, List[Tensor]]:
        """Tensors viewing the store's blobs (no copy at the store's own precision)."""
        return {
            name: [Tensor(a, requires_grad=requires_grad, name=f"{name}[{i}]") for i, a in enumerate(arrays)]
            for name, arrays in self.store.items()
        }

    def _run(self, x: Tensor, params: Dict[str, List[Tensor]], train: bool,
             rng: Optional[np.random.Generator], apply_softmax: bool) -> Tensor:
        outputs: Dict[str, Tensor] = {INPUT_NAME: x}
        last = x
        for layer in self.spec.layers:
            bottom = outputs[layer.bottom]
            kind = layer.kind
            if kind in ("conv", "score-conv"):
                weights, bias = params[layer.name]
                out = ops.conv2d(bottom, weights, bias, stride=layer.stride, pad=layer.pad)
            elif kind == "upsample":
                weights, bias = params[layer.name]
                out = ops.transposed_conv2d(bottom, weights, bias, stride=layer.stride)
            elif kind == "pool":
                out = ops.maxpool2d(bottom, kernel=layer.kernel, stride=layer.stride)
            elif kind == "relu":
                out = ops.relu(bottom)
            elif kind == "mvn":
                out = ops.mvn_layer(bottom)
            elif kind == "dropout":
                out = ops.dropout(bottom, layer.ratio, train=train, rng=rng)
            elif kind == "fuse":
                out = ops.elementwise_add(bottom, outputs[layer.with_])
            elif kind == "crop":
                ref = outputs[layer.ref]
                out = ops.center_crop_to(bottom, ref.shape[2], ref.shape[3])
            elif kind == "softmax":
                if not apply_softmax:
                    return bottom
                out = ops.softmax(bottom)
            else:
                raise SpecError(f"cannot execute layer kind '{kind}'")
            outputs[layer.name] = out
            last = out
        return last

    def forward_logits(self, image: ArrayLike, train: bool = False, rng: Optional[np.random.Generator] = None,
                       params: Optional[Dict[str, List[Tensor]]] = None) -> Tensor:
        """Pre-softmax class scores (n, K, h, w)."""
        x = self._image_tensor(image)
        return self._run(x, params if params is not None else self.parameters(), train, rng, apply_softmax=False)

    def loss_and_gradients(self, images: np.ndarray, labels: np.ndarray, train: bool = True,
                           rng: Optional[np.random.Generator] = None) -> Tuple[float, Dict[str, List[np.ndarray]]]:
        """
        Mean per-pixel softmax cross-entropy and its gradient for every parameter blob.

        ================================================

        inputs:
        images: (n, in_channels, h, w)
        labels: (n, h, w) integers in [0, K)
        train: dropout on (needs `rng`)

        outputs:
        loss: float
        grads: layer name -> [d weights, d bias], shaped like the store

        ================================================
        """
        params = self.parameters(requires_grad=True)
        logits = self.forward_logits(images, train=train, rng=rng, params=params)
        loss, _ = ops.softmax_xent_pixelwise(logits, labels)
        loss.backward()
        grads = {
            name: [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
            for name, tensors in params.items()
        }
        return loss.item(), grads

    def predict_proba(self, image: ArrayLike) -> np.ndarray:
        return forward(self.spec, self.store, image, model=self).data

    def predict_labels(self, image: ArrayLike) -> np.ndarray:
        """Argmax class per pixel, (n, h, w)."""
        return self.predict_proba(image).argmax(axis=1).astype(np.uint8)


def forward(spec: NetworkSpec, store: WeightStore, image: ArrayLike, model: Optional[FCNModel] = None) -> Tensor:
    """
    Per-pixel class probabilities for an image batch, same spatial size as the input.

    Dropout runs in eval mode and no graph is recorded. Inputs smaller than 32x32 are rejected.
    """
    model = model or FCNModel(spec, store)
    shape = image.shape
    if len(shape) != 4:
        raise ShapeError(f"expected an (n, c, h, w) image batch, got shape {shape}")
    if shape[2] < MIN_INPUT_SIZE or shape[3] < MIN_INPUT_SIZE:
        raise ShapeError(f"input {shape[2]}x{shape[3]} is below the {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE} minimum")
    x = model._image_tensor(image)
    return model._run(x, model.parameters(), train=False, rng=None, apply_softmax=True)
