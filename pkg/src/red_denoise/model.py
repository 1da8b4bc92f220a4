"""Residual encoder-decoder denoiser.

The network ``F`` estimates the noise component of its input; the denoised
image is ``x - F(x)``.  Encoder layers are stride-1, same-padded convolutions
followed by ReLU.  Decoder layers mirror them with transposed convolutions;
each decoder output except the last gets the mirrored encoder activation
added before its ReLU.  The final decoder layer emits the signed residual and
starts at exactly zero, so an untrained model is the identity denoiser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfig, LengthMismatch, ShapeMismatch


@dataclass(frozen=True)
class RedConfig:
    num_layers: int = 8
    channels: int = 32
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "channels", "kernel_size", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise InvalidConfig(f"{name} must be an integer, got {value!r}")
        if self.num_layers < 2 or self.num_layers % 2:
            raise InvalidConfig(f"num_layers must be even and >= 2, got {self.num_layers}")
        if self.channels < 1:
            raise InvalidConfig(f"channels must be >= 1, got {self.channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidConfig(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")

    @property
    def depth(self) -> int:
        """Layers per half (encoder or decoder)."""
        return self.num_layers // 2


@dataclass(frozen=True)
class ConvLayer:
    weight: Tensor
    bias: Tensor


@dataclass(frozen=True)
class RedModel:
    config: RedConfig
    encoder: tuple
    decoder: tuple
    skip_plan: tuple = field(default=())


def skip_plan(depth: int) -> tuple:
    """Pairs ``(encoder_index, decoder_index)``.

    Decoder layer ``j`` (all but the last) receives the output of encoder
    layer ``depth - 2 - j``, so the deepest decoder stages meet the deepest
    encoder activations.
    """
    return tuple((depth - 2 - j, j) for j in range(depth - 1))


def layer_shapes(config: RedConfig) -> list[tuple[str, tuple, tuple]]:
    """(kind, weight_shape, bias_shape) for every layer, encoder first."""
    c, k, m = config.channels, config.kernel_size, config.depth
    shapes = []
    for i in range(m):
        c_in = 1 if i == 0 else c
        shapes.append(("conv", (c, c_in, k, k), (c,)))
    for j in range(m):
        c_out = 1 if j == m - 1 else c
        # transposed kernels are [C_in, C_out, k, k]
        shapes.append(("deconv", (c, c_out, k, k), (c_out,)))
    return shapes


def parameter_count(config: RedConfig) -> int:
    c, k2, m = config.channels, config.kernel_size**2, config.depth
    inner = (m - 1) * (c * c * k2 + c)
    return (c * k2 + c) + inner + inner + (c * k2 + 1)


def build(config: RedConfig) -> RedModel:
    """Initialise a model deterministically from ``config.seed``.

    Weights and biases are drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``
    with ``fan_in = C_in * k * k``; the last decoder layer is all zeros.
    """
    if not isinstance(config, RedConfig):
        raise InvalidConfig("build expects a RedConfig")
    rng = np.random.default_rng(config.seed)
    layers = []
    shapes = layer_shapes(config)
    for idx, (kind, wshape, bshape) in enumerate(shapes):
        if idx == len(shapes) - 1:
            w, b = np.zeros(wshape), np.zeros(bshape)
        else:
            c_in = wshape[1] if kind == "conv" else wshape[0]
            bound = 1.0 / math.sqrt(c_in * wshape[2] * wshape[3])
            w = rng.uniform(-bound, bound, size=wshape)
            b = rng.uniform(-bound, bound, size=bshape)
        layers.append(ConvLayer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
    m = config.depth
    return RedModel(config, tuple(layers[:m]), tuple(layers[m:]), skip_plan(m))


def residual_net(model: RedModel, x) -> Tensor:
    """The noise estimator ``F(x)``."""
    k = model.config.kernel_size
    pad = (k - 1) // 2
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim not in (3, 4) or x.shape[-3] != 1:
        raise ShapeMismatch(f"expected a single-channel image [1,H,W] or batch [N,1,H,W], got {x.shape}")
    if min(x.shape[-2:]) < k:
        raise ShapeMismatch(f"image {x.shape[-2:]} smaller than kernel {k}")

    feats = []
    h = x
    for layer in model.encoder:
        h = ad.relu(ad.conv2d(h, layer.weight, layer.bias, stride=1, padding=pad))
        feats.append(h)
    skips = {dec: enc for enc, dec in model.skip_plan}
    last = len(model.decoder) - 1
    for j, layer in enumerate(model.decoder):
        h = ad.conv2d_transposed(h, layer.weight, layer.bias, stride=1, padding=pad)
        if j == last:
            break
        if j in skips:
            skip = feats[skips[j]]
            if skip.shape != h.shape:
                raise ShapeMismatch(f"skip shape {skip.shape} != decoder shape {h.shape}")
            h = ad.add(h, skip)
        h = ad.relu(h)
    return h


def forward(model: RedModel, x) -> tuple[Tensor, Tensor]:
    """Return ``(residual, denoised)`` with ``denoised = x - residual``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    residual = residual_net(model, x)
    return residual, ad.sub(x, residual)


def parameters(model: RedModel) -> list[Tensor]:
    params = []
    for layer in model.encoder + model.decoder:
        params.append(layer.weight)
        params.append(layer.bias)
    return params


def with_parameters(model: RedModel, arrays: Sequence) -> RedModel:
    """A new model with the same topology and the given parameter values."""
    old = parameters(model)
    if len(arrays) != len(old):
        raise LengthMismatch(f"expected {len(old)} parameter arrays, got {len(arrays)}")
    tensors = []
    for ref, arr in zip(old, arrays):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != ref.shape:
            raise ShapeMismatch(f"parameter shape {arr.shape} != {ref.shape}")
        tensors.append(Tensor(arr, requires_grad=True))
    layers = [ConvLayer(tensors[i], tensors[i + 1]) for i in range(0, len(tensors), 2)]
    m = model.config.depth
    return RedModel(model.config, tuple(layers[:m]), tuple(layers[m:]), model.skip_plan)


def apply_update(model: RedModel, deltas: Sequence) -> RedModel:
    """Return a new model whose parameters are ``param + delta`` elementwise."""
    params = parameters(model)
    if len(deltas) != len(params):
        raise LengthMismatch(f"expected {len(params)} deltas, got {len(deltas)}")
    return with_parameters(model, [p.data + np.asarray(d, dtype=np.float64) for p, d in zip(params, deltas)])


def denoise(model: RedModel, image) -> np.ndarray:
    """Full-image inference outside any tape; returns a float64 array."""
    _, out = forward(model, Tensor(np.asarray(image, dtype=np.float64)))
    return out.numpy()
