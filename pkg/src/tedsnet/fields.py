"""Deformation-field operations.

A displacement field is a ``(2, H, W)`` (or batched ``(N, 2, H, W)``)
tensor: channel 0 is the row displacement, channel 1 the column
displacement, both in voxels of the field's own grid.  The map it encodes
is ``phi(x) = x + d(x)``.  Borders are clamp-to-edge everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ndtensor as nt
from .ndtensor import DimensionError, Tensor


@dataclass(frozen=True)
class SmoothingConfig:
    kernel_size: int = 5
    sigma: float = 2.0
    enabled: bool = True

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def kernel1d(self) -> np.ndarray:
        half = self.kernel_size // 2
        k = np.exp(-(np.arange(-half, half + 1) ** 2) / (2.0 * self.sigma**2))
        return k / k.sum()

    def kernel2d(self) -> np.ndarray:
        k = self.kernel1d()
        return np.outer(k, k)


@dataclass
class JacobianReport:
    det_grid: np.ndarray
    min_det: float
    frac_nonpositive: float


def _batched(d: Tensor) -> tuple[Tensor, bool]:
    if d.ndim == 3:
        return nt.reshape(d, (1,) + d.shape), True
    if d.ndim != 4:
        raise DimensionError(f"field must be (2,H,W) or (N,2,H,W), got {d.shape}")
    return d, False


def _check_field(d: Tensor) -> None:
    if d.shape[-3] != 2:
        raise DimensionError(f"field needs 2 channels, got shape {d.shape}")


@lru_cache(maxsize=64)
def _identity(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    r, c = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    r.setflags(write=False)
    c.setflags(write=False)
    return r, c


def _sample_at(src: Tensor, d: Tensor) -> Tensor:
    """Sample batched ``src`` (N,C,H,W) at x + d(x) for batched field ``d`` (N,2,H,W)."""
    H, W = d.shape[-2:]
    r, c = _identity(H, W)
    rows = nt.add(d[:, 0], r)
    cols = nt.add(d[:, 1], c)
    return nt.grid_sample(src, rows, cols)


def diffeo_activation(u: Tensor) -> Tensor:
    """Bound every displacement to the open interval (-0.5, 0.5) voxel."""
    return nt.scale(nt.tanh(u), 0.5)


def compose(d1: Tensor, d2: Tensor) -> Tensor:
    """Displacement of ``phi2 o phi1``: d1(x) + d2(x + d1(x))."""
    _check_field(d1)
    _check_field(d2)
    if d1.shape != d2.shape:
        raise DimensionError(f"cannot compose fields on grids {d1.shape} and {d2.shape}")
    a, squeeze = _batched(d1)
    b, _ = _batched(d2)
    out = nt.add(a, _sample_at(b, a))
    return nt.reshape(out, d1.shape) if squeeze else out


@lru_cache(maxsize=64)
def _smoothing_matrix(n: int, kernel_size: int, sigma: float) -> np.ndarray:
    k = SmoothingConfig(kernel_size, sigma).kernel1d()
    half = kernel_size // 2
    S = np.zeros((n, n))
    for i in range(n):
        for off, weight in zip(range(-half, half + 1), k):
            S[i, min(max(i + off, 0), n - 1)] += weight
    S.setflags(write=False)
    return S


def gaussian_smooth(d: Tensor, cfg: SmoothingConfig = SmoothingConfig()) -> Tensor:
    """Separable Gaussian blur of every channel with clamp-to-edge padding."""
    H, W = d.shape[-2:]
    return nt.separable(
        d,
        _smoothing_matrix(H, cfg.kernel_size, cfg.sigma),
        _smoothing_matrix(W, cfg.kernel_size, cfg.sigma),
    )


def integrate_ss(v: Tensor, T: int, smoothing: SmoothingConfig = SmoothingConfig()) -> Tensor:
    """Scaling-and-squaring: compose the field with itself ``T`` times.

    Each squaring doubles the displacement; when smoothing is enabled the
    result of every squaring (the last one included) is blurred.
    """
    if T < 0:
        raise ValueError(f"number of integration layers must be >= 0, got {T}")
    d = v
    for _ in range(T):
        d = compose(d, d)
        if smoothing.enabled:
            d = gaussian_smooth(d, smoothing)
    return d


def super_upsample(d: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinearly resample a field to (out_h, out_w), rescaling displacements to the new voxel size."""
    _check_field(d)
    H, W = d.shape[-2:]
    up = nt.resize_bilinear(d, out_h, out_w)
    units = np.array([out_h / H, out_w / W]).reshape(2, 1, 1)
    return nt.mul(up, units)


def warp(img: Tensor, d: Tensor) -> Tensor:
    """Resample ``img`` at x + d(x).

    ``img`` may be (H,W), (C,H,W) or (N,C,H,W); ``d`` is (2,H,W) or
    (N,2,H,W) on the same grid.
    """
    _check_field(d)
    if img.shape[-2:] != d.shape[-2:]:
        raise DimensionError(f"image grid {img.shape[-2:]} != field grid {d.shape[-2:]}")
    shape = img.shape
    dd, _ = _batched(d)
    if img.ndim == 2:
        src = nt.reshape(img, (1, 1) + shape)
    elif img.ndim == 3:
        src = nt.reshape(img, (1,) + shape) if d.ndim == 3 else nt.reshape(img, (shape[0], 1) + shape[1:])
    else:
        src = img
    if src.shape[0] != dd.shape[0]:
        raise DimensionError(f"batch mismatch: image {shape} vs field {d.shape}")
    out = _sample_at(src, dd)
    return nt.reshape(out, shape)


def jacobian_determinant(d) -> np.ndarray:
    """Forward-difference Jacobian determinant of x + d(x); (…, H-1, W-1)."""
    a = d.data if isinstance(d, Tensor) else np.asarray(d, dtype=np.float64)
    if a.shape[-3] != 2:
        raise DimensionError(f"field needs 2 channels, got shape {a.shape}")
    if a.shape[-2] < 2 or a.shape[-1] < 2:
        raise DimensionError(f"Jacobian needs at least a 2x2 grid, got {a.shape[-2:]}")
    dr, dc = a[..., 0, :, :], a[..., 1, :, :]
    drr = dr[..., 1:, :-1] - dr[..., :-1, :-1]
    drc = dr[..., :-1, 1:] - dr[..., :-1, :-1]
    dcr = dc[..., 1:, :-1] - dc[..., :-1, :-1]
    dcc = dc[..., :-1, 1:] - dc[..., :-1, :-1]
    return (1.0 + drr) * (1.0 + dcc) - drc * dcr


def jacobian_report(d) -> JacobianReport:
    det = jacobian_determinant(d)
    return JacobianReport(
        det_grid=det,
        min_det=float(det.min()),
        frac_nonpositive=float(np.count_nonzero(det <= 0.0)) / det.size,
    )
