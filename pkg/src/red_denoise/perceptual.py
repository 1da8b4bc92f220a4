"""Fixed feature extractor and the joint MSE + perceptual objective.

The extractor is a bias-free stack of stride-2 convolutions with ReLU.  Its
weights are never trained: they are stored as read-only tensors that do not
request gradients, so backward flows through them to the image only.

Weight files use a small text manifest followed by RTF1 tensors::

    RFEX1
    stages=3
    tap_index=2
    stride=2
    stage0=16,1,3,3
    ...
    <blank line>
    RTF1 tensor per stage
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ImageTooSmall, InvalidConfig, ShapeMismatch
from .fileio import read_rtf, write_rtf

DEFAULT_CHANNELS = (16, 32, 64)
DEFAULT_LAMBDA_P = 0.1
_FILE_MAGIC = "RFEX1"


@dataclass(frozen=True)
class FeatureExtractor:
    layers: tuple
    tap_index: int = 2
    stride: int = 2
    source: str = "seed:0"

    def __post_init__(self):
        if not 0 <= self.tap_index < len(self.layers):
            raise InvalidConfig(f"tap_index {self.tap_index} outside 0..{len(self.layers) - 1}")
        prev = 1
        for w in self.layers:
            if w.ndim != 4 or w.shape[1] != prev or w.shape[2] % 2 == 0:
                raise InvalidConfig(f"extractor stage of shape {w.shape} does not chain")
            prev = w.shape[0]

    def stage_shapes(self) -> list[tuple]:
        return [w.shape for w in self.layers]

    def output_extent(self, h: int, w: int) -> tuple[int, int]:
        """Spatial extent of the tapped feature map for an ``h x w`` image."""
        for kernel in self.layers[: self.tap_index + 1]:
            k = kernel.shape[2]
            pad = (k - 1) // 2
            h = (h + 2 * pad - k) // self.stride + 1 if h + 2 * pad >= k else 0
            w = (w + 2 * pad - k) // self.stride + 1 if w + 2 * pad >= k else 0
            if h < 1 or w < 1:
                raise ImageTooSmall("image too small for the feature extractor")
        return h, w


def make_extractor(seed: int = 0, channels=DEFAULT_CHANNELS, kernel_size: int = 3, tap_index: int = 2) -> FeatureExtractor:
    """Seeded random extractor with He-normal weights (std ``sqrt(2/fan_in)``)."""
    rng = np.random.default_rng(seed)
    layers = []
    prev = 1
    for c in channels:
        fan_in = prev * kernel_size * kernel_size
        w = rng.standard_normal((c, prev, kernel_size, kernel_size)) * np.sqrt(2.0 / fan_in)
        layers.append(Tensor(w))
        prev = c
    return FeatureExtractor(tuple(layers), tap_index=tap_index, source=f"seed:{seed}")


def save_extractor(phi: FeatureExtractor, path) -> None:
    header = [_FILE_MAGIC, f"stages={len(phi.layers)}", f"tap_index={phi.tap_index}", f"stride={phi.stride}"]
    header += [f"stage{i}=" + ",".join(map(str, w.shape)) for i, w in enumerate(phi.layers)]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n\n").encode("utf-8"))
        for w in phi.layers:
            write_rtf(fh, w.data)


def load_extractor(path) -> FeatureExtractor:
    """Load externally supplied extractor weights (see module docstring)."""
    data = Path(path).read_bytes()
    head, sep, _ = data.partition(b"\n\n")
    if not sep:
        raise FormatError(f"{path}: missing extractor manifest")
    lines = head.decode("utf-8").split("\n")
    if lines[0] != _FILE_MAGIC:
        raise FormatError(f"{path}: not an extractor weight file")
    fields = dict(line.split("=", 1) for line in lines[1:])
    stages = int(fields["stages"])
    stream = io.BytesIO(data[len(head) + 2 :])
    layers = []
    for i in range(stages):
        expected = tuple(int(v) for v in fields[f"stage{i}"].split(","))
        arr = read_rtf(stream)
        if arr.shape != expected:
            raise FormatError(f"{path}: stage {i} has shape {arr.shape}, manifest says {expected}")
        layers.append(Tensor(arr))
    return FeatureExtractor(
        tuple(layers),
        tap_index=int(fields.get("tap_index", stages - 1)),
        stride=int(fields.get("stride", 2)),
        source=f"file:{Path(path).name}",
    )


def extract_features(phi: FeatureExtractor, image) -> Tensor:
    """Feature map of stage ``phi.tap_index`` for ``[1,H,W]`` (or ``[N,1,H,W]``)."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim not in (3, 4) or image.shape[-3] != 1:
        raise ShapeMismatch(f"extractor takes single-channel images, got {image.shape}")
    phi.output_extent(*image.shape[-2:])
    h = image
    for kernel in phi.layers[: phi.tap_index + 1]:
        pad = (kernel.shape[2] - 1) // 2
        h = ad.relu(ad.conv2d(h, kernel, None, stride=phi.stride, padding=pad, floor_mode=True))
    return h


def perceptual_loss(phi: FeatureExtractor, denoised, target) -> Tensor:
    """Squared feature distance divided by the tapped map's area ``W_i * H_i``.

    The channel count is not part of the normaliser.  For batched inputs the
    per-image values are averaged.
    """
    denoised = denoised if isinstance(denoised, Tensor) else Tensor(denoised)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if denoised.shape != target.shape:
        raise ShapeMismatch(f"perceptual_loss shapes differ: {denoised.shape} vs {target.shape}")
    fa = extract_features(phi, denoised)
    fb = extract_features(phi, target)
    h_i, w_i = fa.shape[-2:]
    batch = fa.shape[0] if fa.ndim == 4 else 1
    dist = ad.tsum(ad.square(ad.sub(fa, fb)))
    return ad.mul(dist, 1.0 / (w_i * h_i * batch))


def joint_loss(phi: FeatureExtractor, denoised, target, lambda_p: float = DEFAULT_LAMBDA_P):
    """Return ``(total, mse_part, perceptual_part)``.

    ``total = mse + lambda_p * perceptual``; with ``lambda_p == 0`` the
    perceptual branch is still reported but ``total`` is the MSE tensor itself.
    """
    if lambda_p < 0:
        raise InvalidConfig("lambda_p must be non-negative")
    mse = ad.mse_loss(denoised, target)
    per = perceptual_loss(phi, denoised, target)
    if lambda_p == 0:
        return mse, mse, per
    return ad.add(mse, ad.mul(per, float(lambda_p))), mse, per
