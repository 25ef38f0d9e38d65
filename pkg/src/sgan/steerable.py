"""Oriented Gaussian-derivative filter bank and the filter-response loss.

Grid convention: kernels are indexed ``[row, col]``; ``x`` runs along
columns and ``y`` along rows (downwards), both centred on the middle pixel.
An orientation ``theta`` is the direction ``(cos theta, sin theta)`` in that
``(x, y)`` frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

BASIS_ANGLES = (0.0, np.pi / 3, 2 * np.pi / 3)


def _raw_derivative(order: int, theta: float, sigma: float, size: int) -> np.ndarray:
    r = np.arange(size) - size // 2
    y, x = np.meshgrid(r, r, indexing="ij")
    u = x * np.cos(theta) + y * np.sin(theta)
    g = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    if order == 1:
        k = -u / sigma**2 * g
    else:
        k = (u * u / sigma**4 - 1.0 / sigma**2) * g
    return k - k.mean()


def _check_kernel_args(order: int, sigma: float, size: int) -> None:
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")


def gaussian_derivative_kernel(order: int, theta: float, sigma: float = 1.0, size: int = 5) -> np.ndarray:
    """Sampled directional derivative of an isotropic Gaussian.

    The sampled kernel is mean-subtracted, then scaled to unit L2 norm.
    """
    _check_kernel_args(order, sigma, size)
    k = _raw_derivative(order, theta, sigma, size)
    return k / np.linalg.norm(k)


@dataclass(frozen=True)
class FilterBank:
    kernels: np.ndarray  # (K, size, size)
    orientations: np.ndarray  # (K,)
    kinds: tuple[str, ...]  # "even" | "odd"
    sigma: float

    def __len__(self) -> int:
        return self.kernels.shape[0]

    @property
    def size(self) -> int:
        return self.kernels.shape[-1]

    def as_conv_kernel(self) -> Tensor:
        return Tensor(self.kernels[:, None, :, :])


def build_filter_bank(k: int = 20, size: int = 5, sigma: float = 1.0) -> FilterBank:
    """Half even (2nd-derivative) and half odd (1st-derivative) kernels.

    Both halves share the orientations ``i * pi / (k/2)``. Kernels are
    ordered even-first, then odd, each in increasing orientation.
    """
    if k < 2 or k % 2:
        raise ValueError(f"filter count must be a positive even integer, got {k}")
    half = k // 2
    angles = np.arange(half) * np.pi / half
    kernels = [gaussian_derivative_kernel(2, a, sigma, size) for a in angles]
    kernels += [gaussian_derivative_kernel(1, a, sigma, size) for a in angles]
    kernels = np.stack(kernels)
    kernels.setflags(write=False)
    orientations = np.concatenate([angles, angles])
    orientations.setflags(write=False)
    return FilterBank(kernels, orientations, ("even",) * half + ("odd",) * half, float(sigma))


# -- steering -----------------------------------------------------------


def steering_weights(theta: float) -> np.ndarray:
    """Interpolation weights for the basis at 0, pi/3, 2pi/3.

    ``w_j = (1 + 2 cos(2 (theta - theta_j))) / 3``; they always sum to 1.
    """
    return np.array([(1.0 + 2.0 * np.cos(2.0 * (theta - a))) / 3.0 for a in BASIS_ANGLES])


def steering_basis(sigma: float = 1.0, size: int = 5) -> np.ndarray:
    """The three unit-norm second-derivative kernels used for steering."""
    return np.stack([gaussian_derivative_kernel(2, a, sigma, size) for a in BASIS_ANGLES])


def steer_second_derivative(
    theta: float, basis_responses, sigma: float = 1.0, size: int = 5
) -> np.ndarray:
    """Response of the unit-norm 2nd-derivative filter at ``theta``.

    ``basis_responses`` are the three maps obtained with :func:`steering_basis`.
    Steering is exact for the raw (un-normalised) kernels, so each basis map
    is rescaled by its raw kernel norm, combined, then divided by the raw
    norm at ``theta``. The norm varies slightly with angle on a finite grid.
    """
    maps = [np.asarray(r, dtype=np.float64) for r in basis_responses]
    if len(maps) != 3:
        raise ValueError(f"need exactly 3 basis responses, got {len(maps)}")
    if any(m.shape != maps[0].shape for m in maps[1:]):
        raise ValueError(f"basis response shapes differ: {[m.shape for m in maps]}")
    _check_kernel_args(2, sigma, size)
    basis_norms = [np.linalg.norm(_raw_derivative(2, a, sigma, size)) for a in BASIS_ANGLES]
    w = steering_weights(theta)
    target_norm = np.linalg.norm(_raw_derivative(2, theta, sigma, size))
    return sum(wj * nj * m for wj, nj, m in zip(w, basis_norms, maps)) / target_norm


def filter_image(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size zero-padded cross-correlation of a 2-D image."""
    pad = kernel.shape[0] // 2
    x = Tensor(np.asarray(image, dtype=np.float64)[None, None])
    with T.no_grad():
        out = T.conv2d(x, Tensor(kernel[None, None]), stride=1, padding=pad)
    return out.data[0, 0]


# -- loss -----------------------------------------------------------------


def huber_value(diff, delta: float = 1.0):
    """Plain-numpy Huber function, elementwise."""
    d = np.abs(np.asarray(diff, dtype=np.float64))
    return np.where(d <= delta, 0.5 * d * d, delta * (d - 0.5 * delta))


def steerable_loss(y: Tensor, y_hat: Tensor, bank: FilterBank) -> Tensor:
    """Mean over filters and pixels of the Huber distance between responses.

    Both inputs are filtered with zero padding ``size // 2``, so response maps
    keep the image size and averaging over all of them equals averaging per
    filter and then over filters. Gradients flow to whichever input requires
    them; the kernels are constants.

    Filtering is linear, so the response difference is computed as the
    response of the image difference (one convolution instead of two).
    """
    y, y_hat = T._as_tensor(y), T._as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"steerable_loss: shapes {y.shape} and {y_hat.shape} differ")
    if y.ndim != 4 or y.shape[1] != 1:
        raise ValueError(f"steerable_loss expects single-channel (N,1,H,W) images, got {y.shape}")
    kern = bank.as_conv_kernel()
    pad = bank.size // 2
    diff = T.conv2d(T.sub(y_hat, y), kern, stride=1, padding=pad)
    return T.mean(T.huber(diff, 1.0))
