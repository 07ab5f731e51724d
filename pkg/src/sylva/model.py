"""Small configurable convolutional classifier with named, freezable parameters.

The backbone is a stack of conv(3x3) -> group-norm -> swish blocks with
stride-2 downsampling, followed by global average pooling and a linear head.
The head is the designated "final layer" group used for restricted
(per-example) gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

GROUPNORM_EPS = 1e-5


class ParameterSet:
    """Named map of leaf tensors, each trainable or frozen, plus the
    designated final-layer group. Iteration order is insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self.final_layer: tuple[str, ...] = ()

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(value, dtype=value.dtype)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag

    def set_final_layer(self, names: Iterable[str]) -> None:
        names = tuple(names)
        if not names:
            raise ValueError("final-layer group must be non-empty")
        for n in names:
            if n not in self._params:
                raise KeyError(f"unknown parameter '{n}' in final-layer group")
        self.final_layer = names

    def values(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}

    def grads(self, names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        """Collected gradients after a backward pass; parameters the loss
        never touched report zeros rather than erroring."""
        names = list(names) if names is not None else self.names()
        out = {}
        for n in names:
            t = self._params[n]
            out[n] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        return out


@dataclass(frozen=True)
class ModelConfig:
    """Backbone/head layout. widths and strides are per conv block."""

    input_hw: tuple[int, int]
    classes: int
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128)
    strides: tuple[int, ...] = (2, 2, 2, 2)

    def __post_init__(self):
        if len(self.widths) != len(self.strides):
            raise ValueError("widths and strides must have equal length")
        if self.classes < 2:
            raise ValueError("need at least two classes")


@dataclass
class ForwardTrace:
    """Intermediate nodes of one forward pass: the last conv feature map
    (for saliency), pooled features, and logits."""

    conv_maps: list[Tensor]
    features: Tensor
    logits: Tensor


def _group_sizes(channels: int) -> tuple[int, int]:
    size = max(1, channels // 4)
    if channels % size:
        size = 1
    return channels // size, size


class ClassifierModel:
    """Conv backbone + linear head over NHWC images in [0, 1]."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = ParameterSet()
        cin = config.in_channels
        self.layer_names: list[str] = []
        for i, (width, _stride) in enumerate(zip(config.widths, config.strides)):
            layer = f"block{i}"
            self.layer_names.append(layer)
            std = np.sqrt(2.0 / (9 * cin))
            kernel = rng.standard_normal((3, 3, cin, width)) * std
            self.params.add(f"{layer}.kernel", kernel.astype(self.dtype))
            self.params.add(f"{layer}.norm_scale", np.ones(width, dtype=self.dtype))
            self.params.add(f"{layer}.norm_shift", np.zeros(width, dtype=self.dtype))
            cin = width
        self.layer_names.append("head")
        feat = cin if config.widths else config.in_channels
        std = np.sqrt(1.0 / feat)
        weight = rng.standard_normal((feat, config.classes)) * std
        self.params.add("head.weight", weight.astype(self.dtype))
        self.params.add("head.bias", np.zeros(config.classes, dtype=self.dtype))
        self.params.set_final_layer(("head.weight", "head.bias"))

    # forward -------------------------------------------------------------

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=self.dtype)
        want = (self.config.input_hw[0], self.config.input_hw[1], self.config.in_channels)
        if images.ndim != 4 or images.shape[1:] != want:
            raise ShapeError(
                f"expected images (B,{want[0]},{want[1]},{want[2]}), got {images.shape}"
            )
        return images

    def forward_trace(self, images: np.ndarray) -> ForwardTrace:
        x = Tensor(self._check_images(images), dtype=self.dtype)
        conv_maps: list[Tensor] = []
        for i, stride in enumerate(self.config.strides):
            layer = f"block{i}"
            x = ad.conv2d(x, self.params[f"{layer}.kernel"], stride=stride)
            x = _group_norm(
                x,
                self.params[f"{layer}.norm_scale"],
                self.params[f"{layer}.norm_shift"],
            )
            x = ad.swish(x)
            conv_maps.append(x)
        features = x.mean(axis=(1, 2))
        logits = features @ self.params["head.weight"] + self.params["head.bias"]
        return ForwardTrace(conv_maps=conv_maps, features=features, logits=logits)

    def forward(self, images: np.ndarray) -> Tensor:
        return self.forward_trace(images).logits

    def predict_probs(self, images: np.ndarray) -> np.ndarray:
        """Class distributions p(y|x); no gradient is retained."""
        logits = self.forward(images)
        return ad.softmax(logits, axis=-1).data.copy()

    # freezing --------------------------------------------------------------

    def layer_params(self, layer: str) -> list[str]:
        prefix = layer + "."
        return [n for n in self.params.names() if n.startswith(prefix)]

    def set_unfreeze_top_k(self, k: int) -> None:
        """Freeze everything except the top (closest to the output) k layers."""
        total = len(self.layer_names)
        if not 0 <= k <= total:
            raise ValueError(f"unfreeze-top-k must be in [0, {total}], got {k}")
        open_set = set(self.layer_names[total - k :]) if k else set()
        for layer in self.layer_names:
            flag = layer in open_set
            for name in self.layer_params(layer):
                self.params.set_trainable(name, flag)


def _group_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Group normalization over (H, W, channel-group); group size is
    channels/4 (min 1) so it stays meaningful at batch size 6."""
    bsz, h, w, c = x.data.shape
    groups, size = _group_sizes(c)
    g = x.reshape((bsz, h, w, groups, size))
    mean = g.mean(axis=(1, 2, 4), keepdims=True)
    centered = g - mean
    var = ad.square(centered).mean(axis=(1, 2, 4), keepdims=True)
    normed = centered / ad.sqrt(var + GROUPNORM_EPS)
    out = normed.reshape((bsz, h, w, c))
    return out * scale + shift


# gradients -------------------------------------------------------------------


def backward_grads(loss: Tensor, params: ParameterSet,
                   names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Backward from a scalar loss, returning a ParameterSet-shaped map."""
    loss.backward()
    return params.grads(names)


def per_example_param_grads(
    per_example_losses: Tensor,
    params: ParameterSet,
    names: Sequence[str] | None = None,
) -> list[dict[str, np.ndarray]]:
    """Gradient of each example's loss w.r.t. the selected parameters.

    Generic path: one backward pass per example. Summing the slices equals
    the gradient of the summed loss; the fast head path below is checked
    against this in tests.
    """
    if per_example_losses.data.ndim != 1:
        raise ShapeError("expected a vector of per-example losses")
    names = list(names) if names is not None else list(params.final_layer)
    slices = []
    for b in range(per_example_losses.data.shape[0]):
        per_example_losses[b].backward()
        slices.append(params.grads(names))
    return slices


def per_example_head_grads(
    trace: ForwardTrace, per_example_losses: Tensor
) -> list[dict[str, np.ndarray]]:
    """Per-example gradients restricted to the linear head, in one backward.

    Each example's loss reaches the head only through its own logits row, so
    the batch gradient of the summed loss at the logits node separates into
    rows; the head slices are outer products with the pooled features.
    """
    if per_example_losses.data.ndim != 1:
        raise ShapeError("expected a vector of per-example losses")
    per_example_losses.sum().backward()
    dlogits = trace.logits.grad
    if dlogits is None:
        dlogits = np.zeros_like(trace.logits.data)
    feats = trace.features.data
    out = []
    for b in range(per_example_losses.data.shape[0]):
        out.append(
            {
                "head.weight": np.outer(feats[b], dlogits[b]),
                "head.bias": dlogits[b].copy(),
            }
        )
    return out
