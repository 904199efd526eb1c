"""Image similarity and feature-distribution kernels.

Luminance conversion, windowed SSIM over grayscale images, and the Fréchet
distance between Gaussian summaries of feature vectors. Everything here is a
pure function over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "GrayImage",
    "SsimParams",
    "FeatureStats",
    "to_luminance",
    "ssim",
    "gaussian_window",
    "accumulate_stats",
    "frechet_distance",
    "load_image",
    "toy_features",
    "read_feature_file",
    "write_feature_file",
]

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel image with values in [0, 1].

    ``data`` is stored as a read-only ``(height, width)`` float64 array.
    """

    width: int
    height: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.size != self.width * self.height:
            raise ValueError(
                f"data length {arr.size} does not match {self.width}x{self.height}"
            )
        arr = arr.reshape(self.height, self.width).copy()
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("luminance values must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr) -> "GrayImage":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
        return cls(width=arr.shape[1], height=arr.shape[0], data=arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.dynamic_range <= 0:
            raise ValueError("dynamic_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True, eq=False)
class FeatureStats:
    """Mean, unbiased covariance and sample count of a set of feature vectors."""

    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64)).copy()
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64)).copy()
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match dim {mean.size}")
        if self.count < 2:
            raise ValueError("at least 2 samples are needed for a covariance")
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def check_psd(self, atol: float = 1e-9, rtol: float = 1e-8) -> None:
        """Raise ``ValueError`` unless the covariance is symmetric and PSD."""
        cov = self.covariance
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(self.mean)):
            raise ValueError("feature statistics contain non-finite entries")
        if np.max(np.abs(cov - cov.T), initial=0.0) > atol:
            raise ValueError("covariance is not symmetric")
        eig = np.linalg.eigvalsh(cov)
        if eig[0] < -rtol * max(eig[-1], 0.0) - atol:
            raise ValueError(f"covariance is not positive semidefinite (min eigenvalue {eig[0]:.3g})")


def to_luminance(pixels, width: int, height: int) -> GrayImage:
    """Convert interleaved 8-bit RGB rows into a luminance image.

    Uses the ITU-R BT.601 weights 0.299/0.587/0.114, scaled to [0, 1].
    """
    buf = np.frombuffer(bytes(pixels), dtype=np.uint8) if isinstance(
        pixels, (bytes, bytearray, memoryview)) else np.asarray(pixels)
    if buf.size != 3 * width * height:
        raise ValueError(
            f"pixel buffer has {buf.size} values, expected {3 * width * height} for {width}x{height} RGB"
        )
    rgb = buf.reshape(height, width, 3).astype(np.float64)
    lum = np.clip(rgb @ _LUMA / 255.0, 0.0, 1.0)
    return GrayImage(width=width, height=height, data=lum)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is its outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # separable, valid-positions-only correlation
    x = sliding_window_view(x, taps.size, axis=1) @ taps
    return sliding_window_view(x, taps.size, axis=0) @ taps


def ssim(a: GrayImage, b: GrayImage, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM over every valid window position of ``a`` and ``b``.

    Gaussian-weighted local statistics, no border padding. The result lies in
    [-1, 1] and is exactly symmetric in its arguments.
    """
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    if min(a.shape) < params.window_size:
        raise ValueError(
            f"image {a.width}x{a.height} is smaller than the {params.window_size}px window"
        )
    taps = gaussian_window(params.window_size, params.gaussian_sigma)
    x, y = a.data, b.data

    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = _filter_valid(x * x, taps) - mu_xx
    var_y = _filter_valid(y * y, taps) - mu_yy
    cov_xy = _filter_valid(x * y, taps) - mu_xy

    c1, c2 = params.c1, params.c2
    num = (2 * mu_xy + c1) * (2 * cov_xy + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def accumulate_stats(features: Iterable[Sequence[float]], dim: int | None = None) -> FeatureStats:
    rows = [np.asarray(f, dtype=np.float64).ravel() for f in features]
    if len(rows) < 2:
        raise ValueError(f"need at least 2 feature vectors, got {len(rows)}")
    expected = rows[0].size if dim is None else dim
    for i, r in enumerate(rows):
        if r.size != expected:
            raise ValueError(f"feature vector {i} has length {r.size}, expected {expected}")
    x = np.stack(rows)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (len(rows) - 1)
    cov = (cov + cov.T) / 2
    return FeatureStats(mean=mean, covariance=cov, count=len(rows))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(p: FeatureStats, q: FeatureStats) -> float:
    """Fréchet distance between two Gaussians given by their statistics.

    ``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)``, using eigen
    decompositions with negative eigenvalues clamped to zero. Clamped to >= 0.
    """
    if p.dim != q.dim:
        raise ValueError(f"feature dimensions differ: {p.dim} vs {q.dim}")
    for s in (p, q):
        if not (np.all(np.isfinite(s.mean)) and np.all(np.isfinite(s.covariance))):
            raise ValueError("feature statistics contain non-finite entries")
    p.check_psd()
    q.check_psd()

    diff = p.mean - q.mean
    root_p = _psd_sqrt(p.covariance)
    inner = root_p @ q.covariance @ root_p
    eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = float(np.sum(np.sqrt(np.clip(eig, 0.0, None))))
    value = float(diff @ diff) + float(np.trace(p.covariance) + np.trace(q.covariance)) - 2.0 * tr_cross
    return max(value, 0.0)


def load_image(path: str | Path) -> GrayImage:
    """Decode a PNG or 24-bit BMP file into a luminance image."""
    from PIL import Image

    with Image.open(path) as im:
        if im.format not in ("PNG", "BMP"):
            raise ValueError(f"{path}: unsupported image format {im.format!r}")
        rgb = im.convert("RGB")
        return to_luminance(rgb.tobytes(), rgb.width, rgb.height)


def toy_features(image: GrayImage, grid: int = 8) -> np.ndarray:
    """Area-average the image onto a ``grid x grid`` lattice and flatten it.

    Stands in for a learned feature extractor when only images are available.
    """
    if image.width < grid or image.height < grid:
        raise ValueError(f"image {image.width}x{image.height} is smaller than the {grid}x{grid} grid")
    rows = np.array_split(image.data, grid, axis=0)
    return np.array([blk.mean() for r in rows for blk in np.array_split(r, grid, axis=1)])


def read_feature_file(path: str | Path) -> list[np.ndarray]:
    vectors = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                vectors.append(np.array([float(t) for t in line.split()]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return vectors


def write_feature_file(path: str | Path, vectors: Iterable[Sequence[float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in vectors:
            fh.write(" ".join(repr(float(x)) for x in v) + "\n")

