"""Signal preprocessing: scaling, windowing, spectra, and statistic tokens.

Everything in this module is plain numpy on float64 arrays; none of it
participates in gradient computation. Model inputs are prepared once per
dataset and treated as constants by the training loop.

Domain types
------------
A *series* is a (length, channels) float64 array of condition-monitoring
samples, optionally wrapped in :class:`CbmSeries` to carry channel names.
A *window* is a (width, channels) slice of a series. A
:class:`WindowedDataset` is a stack of windows with integer class labels.

Conventions
-----------
* Scaling is per channel: subtract the train mean, divide by the train
  population standard deviation. Zero-variance channels divide by 1, so
  they map to exactly zero instead of NaN.
* The 2-D DFT is unnormalized (plain double sum). Power-of-two axis
  lengths take a radix-2 fast path; every other length falls back to the
  dense O(n^2) transform per axis. Both branches compute the same sums.
* Quadratic fits use the time grid t = 0..W-1 and solve the 3x3 normal
  equations with partial-pivoting LU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError

__all__ = [
    "CbmSeries",
    "WindowedDataset",
    "Scaler",
    "fit_scaler",
    "apply_scaler",
    "sliding_windows",
    "dft2",
    "fft2d_magnitude",
    "fit_quadratic",
    "engineer_decoder_features",
    "DECODER_FEATURE_ROWS",
]

DECODER_FEATURE_ROWS = ("mean", "variance", "quad_c0", "quad_c1", "quad_c2")


@dataclass(frozen=True)
class CbmSeries:
    """A multivariate condition-monitoring series: (length, channels)."""

    values: np.ndarray
    channel_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"series must be (length, channels), got {values.shape}")
        object.__setattr__(self, "values", values)
        if self.channel_names is not None and len(self.channel_names) != values.shape[1]:
            raise ShapeError(
                f"{len(self.channel_names)} channel names for {values.shape[1]} channels"
            )


@dataclass(frozen=True)
class WindowedDataset:
    """Stacked windows (n, width, channels) with labels (n,)."""

    data: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if data.ndim != 3:
            raise ShapeError(f"dataset data must be (n, width, channels), got {data.shape}")
        if labels.shape != (data.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} does not match {data.shape[0]} windows")
        if labels.size and labels.min() < 0:
            raise UsageError(f"labels must be non-negative, found {labels.min()}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class Scaler:
    """Per-channel affine standardization fit on training rows only."""

    mean: np.ndarray
    scale: np.ndarray

    def transform(self, data: np.ndarray) -> np.ndarray:
        return apply_scaler(self, data)


def fit_scaler(rows: np.ndarray) -> Scaler:
    """Fit per-channel mean and population std over (n_rows, channels).

    Channels whose variance is exactly zero get scale 1.0 so that
    transforming maps them to exactly zero.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ShapeError(f"fit_scaler expects (rows, channels), got {rows.shape}")
    if rows.shape[0] < 2:
        raise UsageError(f"need at least 2 rows to fit a scaler, got {rows.shape[0]}")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)  # population (ddof=0)
    scale = np.where(std == 0.0, 1.0, std)
    return Scaler(mean=mean, scale=scale)


def apply_scaler(scaler: Scaler, data: np.ndarray) -> np.ndarray:
    """Standardize the trailing channel axis of ``data``."""
    data = np.asarray(data, dtype=np.float64)
    k = scaler.mean.shape[0]
    if data.shape[-1] != k:
        raise ShapeError(f"data has {data.shape[-1]} channels, scaler was fit on {k}")
    return (data - scaler.mean) / scaler.scale


def sliding_windows(series, width: int, stride: int = 1) -> np.ndarray:
    """Cut a series into overlapping windows: (count, width, channels).

    With stride 1 a series of length L yields L - width + 1 windows, each
    a contiguous row slice; windows share no storage with the input.
    """
    values = series.values if isinstance(series, CbmSeries) else np.asarray(series, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"series must be (length, channels), got {values.shape}")
    if width < 1:
        raise UsageError(f"window width must be >= 1, got {width}")
    if stride < 1:
        raise UsageError(f"stride must be >= 1, got {stride}")
    length = values.shape[0]
    if length < width:
        raise UsageError(f"series length {length} is shorter than window width {width}")
    count = (length - width) // stride + 1
    out = np.empty((count, width, values.shape[1]), dtype=np.float64)
    for i in range(count):
        out[i] = values[i * stride : i * stride + width]
    return out


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _fft_radix2(block: np.ndarray) -> np.ndarray:
    """Iterative Cooley-Tukey over axis 0; length must be a power of two."""
    n = block.shape[0]
    out = block[_bit_reverse_indices(n)].copy()
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size).reshape(1, half, 1)
        view = out.reshape(n // size, size, -1)
        top = view[:, :half] + twiddle * view[:, half:]
        bot = view[:, :half] - twiddle * view[:, half:]
        view[:, :half] = top
        view[:, half:] = bot
        size *= 2
    return out


_DFT_MATRIX_CACHE: dict[int, np.ndarray] = {}


def _dft_matrix(n: int) -> np.ndarray:
    mat = _DFT_MATRIX_CACHE.get(n)
    if mat is None:
        j, l = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        mat = np.exp(-2j * np.pi * j * l / n)
        _DFT_MATRIX_CACHE[n] = mat
    return mat


def _dft_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Unnormalized 1-D DFT along ``axis`` of a complex array."""
    x = np.moveaxis(x, axis, 0)
    lead = x.shape[0]
    flat = x.reshape(lead, -1)
    if _is_pow2(lead):
        res = _fft_radix2(flat)
    else:
        res = _dft_matrix(lead) @ flat
    return np.moveaxis(res.reshape(x.shape), 0, axis)


def dft2(window: np.ndarray) -> np.ndarray:
    """Unnormalized 2-D DFT over the last two axes; returns complex.

    Leading batch axes pass through untouched.
    """
    window = np.asarray(window)
    if window.ndim < 2:
        raise ShapeError(f"dft2 expects at least 2-D input, got {window.shape}")
    x = window.astype(np.complex128)
    x = _dft_axis(x, window.ndim - 2)
    x = _dft_axis(x, window.ndim - 1)
    return x


def fft2d_magnitude(window: np.ndarray) -> np.ndarray:
    """Magnitude of the unnormalized 2-D DFT, same shape as the input."""
    return np.abs(dft2(window))


def _design_columns(width: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic design matrix on t = 0..width-1 and its normal matrix."""
    t = np.arange(width, dtype=np.float64)
    v = np.stack([np.ones(width), t, t * t], axis=1)
    return v, v.T @ v


def fit_quadratic(values: np.ndarray) -> np.ndarray:
    """Least-squares quadratic c0 + c1*t + c2*t^2 over t = 0..W-1.

    Returns (c0, c1, c2). Solved through the 3x3 normal equations with
    partial-pivoting LU; needs at least 3 samples.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ShapeError(f"fit_quadratic expects a 1-D column, got {values.shape}")
    if values.shape[0] < 3:
        raise UsageError(f"need at least 3 samples for a quadratic fit, got {values.shape[0]}")
    v, normal = _design_columns(values.shape[0])
    return np.linalg.solve(normal, v.T @ values)


def engineer_decoder_features(window: np.ndarray) -> np.ndarray:
    """Per-channel statistics of a window: a (5, channels) array.

    Rows follow ``DECODER_FEATURE_ROWS``: mean, population variance, and
    the three quadratic-fit coefficients. Leading batch axes pass
    through, giving (..., 5, channels).
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim < 2:
        raise ShapeError(f"expected (width, channels) window, got {window.shape}")
    width = window.shape[-2]
    if width < 3:
        raise UsageError(f"window width {width} too short for quadratic statistics")
    mean = window.mean(axis=-2)
    var = window.var(axis=-2)
    v, normal = _design_columns(width)
    rhs = np.einsum("tj,...tc->...jc", v, window)
    coeffs = np.linalg.solve(normal, rhs)
    stats = np.stack(
        [mean, var, coeffs[..., 0, :], coeffs[..., 1, :], coeffs[..., 2, :]], axis=-2
    )
    return stats
