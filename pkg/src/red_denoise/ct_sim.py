"""Synthetic phantoms and the low-dose CT noise pipeline.

Geometry is parallel-beam: ``views`` angles uniform in [0, pi), detector
spacing of one pixel, detector ``d`` at signed offset ``d - (D-1)/2``.
Pixel ``(row, col)`` sits at ``x = col - c``, ``y = row - c`` with
``c = (N-1)/2``, and the ray at angle ``theta`` and offset ``s`` is
``s*(cos, sin) + t*(-sin, cos)``.

Image values are attenuation per unit length.  ``pixel_size`` gives the side
of a pixel in those units, so line integrals scale with it; the default of 1
makes the sinogram a plain sum of pixel values along each ray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadGeometry, SizeTooSmall

MIN_SIZE = 32
DEFAULT_FIELD_OF_VIEW = 16.0
FBP_CLAMP = (0.0, 1.5)


@dataclass(frozen=True)
class Ellipse:
    center: tuple  # (x, y) in pixels from the image centre
    axes: tuple  # semi-axes (a, b) in pixels
    angle: float  # radians
    intensity: float

    def coverage(self, n: int, supersample: int = 4) -> np.ndarray:
        """Fraction of each pixel's area inside the ellipse (``supersample``^2 sub-samples)."""
        c = (n - 1) / 2.0
        sub = (np.arange(supersample) + 0.5) / supersample - 0.5
        fine = (np.arange(n)[:, None] + sub[None, :]).ravel() - c
        y, x = np.meshgrid(fine, fine, indexing="ij")
        dx, dy = x - self.center[0], y - self.center[1]
        cos, sin = math.cos(self.angle), math.sin(self.angle)
        u = dx * cos + dy * sin
        v = -dx * sin + dy * cos
        inside = (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0
        return inside.reshape(n, supersample, n, supersample).mean(axis=(1, 3))


@dataclass(frozen=True)
class Phantom:
    image: np.ndarray  # [1, N, N]
    ellipses: tuple = field(default=())

    @property
    def size(self) -> int:
        return self.image.shape[-1]


@dataclass(frozen=True)
class Sinogram:
    data: np.ndarray  # [views, detectors]
    pixel_size: float = 1.0

    @property
    def views(self) -> int:
        return self.data.shape[0]

    @property
    def detectors(self) -> int:
        return self.data.shape[1]

    @property
    def angles(self) -> np.ndarray:
        return view_angles(self.views)


def view_angles(views: int) -> np.ndarray:
    return np.pi * np.arange(views) / views


def default_detectors(n: int) -> int:
    """Smallest odd detector count covering the image diagonal."""
    d = math.ceil(n * math.sqrt(2.0))
    return d if d % 2 else d + 1


def make_phantom(seed: int, size: int) -> Phantom:
    """A body-like ellipse holding 3-8 random interior ellipses.

    Interior ellipses are painted in order over a background ellipse, each
    with its own intensity.  Edges are anti-aliased by area coverage, so
    border pixels blend neighbouring levels; all values lie in [0, 1].
    """
    if size < MIN_SIZE:
        raise SizeTooSmall(f"phantom size must be >= {MIN_SIZE}, got {size}")
    rng = np.random.default_rng(seed)
    half = size / 2.0
    bg = Ellipse(
        center=(rng.uniform(-0.03, 0.03) * half, rng.uniform(-0.03, 0.03) * half),
        axes=(rng.uniform(0.78, 0.88) * half, rng.uniform(0.62, 0.76) * half),
        angle=rng.uniform(-0.3, 0.3),
        intensity=rng.uniform(0.2, 0.35),
    )
    body = bg.coverage(size)
    img = body * bg.intensity
    ellipses = [bg]
    levels = [bg.intensity]
    for _ in range(int(rng.integers(3, 9))):
        while True:
            level = float(rng.uniform(0.0, 1.0))
            if all(abs(level - other) >= 0.06 for other in levels):
                break
        r = rng.uniform(0.0, 0.5) * min(bg.axes)
        phi = rng.uniform(0.0, 2 * np.pi)
        e = Ellipse(
            center=(bg.center[0] + r * math.cos(phi), bg.center[1] + r * math.sin(phi)),
            axes=(rng.uniform(0.05, 0.3) * half, rng.uniform(0.04, 0.2) * half),
            angle=rng.uniform(0.0, np.pi),
            intensity=level,
        )
        # painted over what lies beneath, never outside the body outline
        cover = np.minimum(e.coverage(size), body)
        img = img * (1.0 - cover) + level * cover
        ellipses.append(e)
        levels.append(level)
    img = np.clip(img, 0.0, 1.0)
    return Phantom(img[None], tuple(ellipses))


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional coordinates; zero outside the grid."""
    h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.zeros(rows.shape)
            vals[ok] = img[rr[ok], cc[ok]]
            out += wr * wc * vals
    return out


def _as_square(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise BadGeometry(f"expected a square [1,N,N] image, got shape {np.shape(image)}")
    return img


def radon(image, views: int, detectors: int | None = None, pixel_size: float = 1.0) -> Sinogram:
    """Parallel-beam line integrals, sampled bilinearly at unit steps along each ray."""
    img = _as_square(image)
    n = img.shape[0]
    detectors = default_detectors(n) if detectors is None else detectors
    if views < 1 or detectors < n:
        raise BadGeometry(f"need views >= 1 and detectors >= {n}, got {views}, {detectors}")
    if pixel_size <= 0:
        raise BadGeometry("pixel_size must be positive")
    c = (n - 1) / 2.0
    s = np.arange(detectors) - (detectors - 1) / 2.0
    reach = int(math.ceil(math.hypot(c + 1, c + 1)))
    t = np.arange(-reach, reach + 1, dtype=np.float64)
    out = np.empty((views, detectors))
    for v, theta in enumerate(view_angles(views)):
        cos, sin = math.cos(theta), math.sin(theta)
        x = s[:, None] * cos - t[None, :] * sin
        y = s[:, None] * sin + t[None, :] * cos
        out[v] = _bilinear(img, y + c, x + c).sum(axis=1)
    return Sinogram(out * pixel_size, pixel_size)


def simulate_low_dose(sino: Sinogram, photons: float, seed: int) -> Sinogram:
    """Poisson photon noise on the projections.

    Per ray the expected count is ``photons * exp(-p)``; the drawn count is
    clamped to at least 1 and converted back with ``-ln(count / photons)``.
    """
    if photons <= 0:
        raise ValueError("photons per ray must be positive")
    rng = np.random.default_rng(seed)
    expected = photons * np.exp(-sino.data)
    counts = np.maximum(rng.poisson(expected).astype(np.float64), 1.0)
    return Sinogram(-np.log(counts / photons), sino.pixel_size)


WINDOWS = (None, "hann")


def ramp_filter(data: np.ndarray, window: str | None = None) -> np.ndarray:
    """Multiply each row by ``|f|`` in the discrete frequency domain.

    Rows are zero-padded to a power of two at least twice their length so
    the circular product acts as a linear convolution.  ``window="hann"``
    tapers the ramp towards the Nyquist frequency; the default is the bare
    Ram-Lak response.
    """
    if window not in WINDOWS:
        raise ValueError(f"unknown ramp window {window!r}; choose from {WINDOWS}")
    d = data.shape[1]
    size = 1 << int(math.ceil(math.log2(2 * d)))
    freq = np.fft.fftfreq(size)
    response = np.abs(freq)
    if window == "hann":
        response = response * 0.5 * (1.0 + np.cos(2.0 * np.pi * freq))
    spectrum = np.fft.fft(data, n=size, axis=1) * response
    return np.real(np.fft.ifft(spectrum, axis=1))[:, :d]


def fbp(sino: Sinogram, size: int, clamp: bool = True, window: str | None = None) -> np.ndarray:
    """Filtered back projection onto an ``N x N`` grid.

    Returns ``[1, N, N]``.  With ``clamp`` the result is limited to
    ``[0, 1.5]``; without it the operator is linear in the sinogram.
    ``window`` is passed to :func:`ramp_filter`.
    """
    views, detectors = sino.data.shape
    if detectors < size or views < 1:
        raise BadGeometry(f"sinogram {sino.data.shape} cannot cover a {size}x{size} image")
    filtered = ramp_filter(sino.data, window)
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) - c
    grid = np.arange(detectors, dtype=np.float64)
    offset = (detectors - 1) / 2.0
    img = np.zeros((size, size))
    for v, theta in enumerate(view_angles(views)):
        pos = x * math.cos(theta) + y * math.sin(theta) + offset
        img += np.interp(pos.ravel(), grid, filtered[v], left=0.0, right=0.0).reshape(size, size)
    img *= np.pi / views / sino.pixel_size
    if clamp:
        img = np.clip(img, *FBP_CLAMP)
    return img[None]


def noise_seed(seed: int, photons: float) -> np.random.SeedSequence:
    # the noise stream depends on both the phantom seed and the dose
    return np.random.SeedSequence([int(seed), int(round(photons)) & 0xFFFFFFFFFFFF, 0x4E4F495345])


def make_pair(
    seed: int,
    size: int,
    views: int,
    photons: float,
    detectors: int | None = None,
    field_of_view: float = DEFAULT_FIELD_OF_VIEW,
) -> tuple[np.ndarray, np.ndarray]:
    """Clean phantom and its low-dose FBP reconstruction, both ``[1,N,N]`` in [0, 1].

    ``field_of_view`` is the image width in attenuation-length units; it
    sets the pixel size and hence how strongly the phantom attenuates.
    """
    phantom = make_phantom(seed, size)
    sino = radon(phantom.image, views, detectors, pixel_size=field_of_view / size)
    noisy = simulate_low_dose(sino, photons, noise_seed(seed, photons))
    recon = fbp(noisy, size)
    return phantom.image.copy(), np.clip(recon, 0.0, 1.0)


def inscribed_mask(size: int, margin: float = 1.0) -> np.ndarray:
    """Pixels whose centres lie strictly inside the inscribed circle."""
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size] - c
    return np.hypot(x, y) < size / 2.0 - margin
