"""Log-radial harmonic filters.

Each basis filter is

    S(r, phi) = r**-m * (K(phi, phi_j) + K(phi, phi_j + pi)) * exp(i (k log r + beta))

with a Gaussian angular window ``K(phi, phi_j) = exp(-d(phi, phi_j)**2 / (2 sigma_phi**2))``.
The phase depends on ``log r`` only, so rescaling the filter support is a
multiplication by a complex constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def _default_orientations() -> tuple[float, ...]:
    return tuple(j * math.pi / 8 for j in range(1, 9))


@dataclass(frozen=True)
class BasisSpec:
    """Hyperparameters of a log-radial harmonic family."""

    orders: tuple[float, ...] = (0.5, 1.0, 2.0)
    orientations: tuple[float, ...] = field(default_factory=_default_orientations)
    sigma_phi: float = math.pi / 16
    beta: float = 0.0
    m: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "orders", tuple(float(k) for k in self.orders))
        object.__setattr__(self, "orientations", tuple(float(p) for p in self.orientations))
        if not self.orders:
            raise ValueError("orders must be nonempty")
        if any(k <= 0 for k in self.orders):
            raise ValueError(f"orders must be strictly positive, got {self.orders}")
        if not self.orientations:
            raise ValueError("orientations must be nonempty")
        if any(not 0.0 <= p < TWO_PI for p in self.orientations):
            raise ValueError(f"orientations must lie in [0, 2pi), got {self.orientations}")
        if len(set(self.orientations)) != len(self.orientations):
            raise ValueError("orientations must be pairwise distinct")
        if not self.sigma_phi > 0:
            raise ValueError("sigma_phi must be positive")

    @property
    def n_orders(self) -> int:
        return len(self.orders)

    @property
    def n_orientations(self) -> int:
        return len(self.orientations)

    @property
    def n_filters(self) -> int:
        return self.n_orders * self.n_orientations

    def to_dict(self) -> dict:
        return {
            "orders": list(self.orders),
            "orientations": list(self.orientations),
            "sigma_phi": self.sigma_phi,
            "beta": self.beta,
            "m": self.m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(
            orders=tuple(d["orders"]),
            orientations=tuple(d["orientations"]),
            sigma_phi=float(d["sigma_phi"]),
            beta=float(d["beta"]),
            m=float(d["m"]),
        )


@dataclass(frozen=True)
class SampledBasis:
    spec: BasisSpec
    size: int
    # shape (n_orders, n_orientations, size, size), complex128
    filters: np.ndarray
    radial_scale: float = 1.0

    def __post_init__(self):
        _check_size(self.size)
        expected = (self.spec.n_orders, self.spec.n_orientations, self.size, self.size)
        if self.filters.shape != expected:
            raise ValueError(f"filters shape {self.filters.shape} != {expected}")

    @property
    def count(self) -> int:
        return self.spec.n_filters

    def flat(self) -> np.ndarray:
        """Filters as a (n_filters, size, size) stack, order-major."""
        return self.filters.reshape(-1, self.size, self.size)


def _check_size(size: int) -> None:
    if int(size) != size or size < 1 or size % 2 == 0:
        raise ValueError(f"filter size must be a positive odd integer, got {size}")


def angular_distance(phi, phi_j):
    """Shortest arc between two angles, in [0, pi]. Broadcasts."""
    d = np.mod(np.abs(np.asarray(phi, dtype=float) - phi_j), TWO_PI)
    d = np.minimum(d, TWO_PI - d)
    return d if np.ndim(d) else float(d)


def angular_window(phi, phi_j: float, sigma_phi: float):
    """K(phi, phi_j) + K(phi, phi_j + pi)."""
    d0 = angular_distance(phi, phi_j)
    d1 = angular_distance(phi, phi_j + math.pi)
    two_var = 2.0 * sigma_phi**2
    return np.exp(-(d0**2) / two_var) + np.exp(-(d1**2) / two_var)


def log_radial_harmonic(r, phi, order: float, orientation: float, spec: BasisSpec):
    """Evaluate one basis function at polar coordinates with ``r > 0``."""
    r = np.asarray(r, dtype=float)
    amplitude = r ** (-spec.m) * angular_window(phi, orientation, spec.sigma_phi)
    return amplitude * np.exp(1j * (order * np.log(r) + spec.beta))


def pixel_offsets(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Cartesian offsets (x right, y up) of every pixel from the grid center."""
    _check_size(size)
    half = (size - 1) // 2
    idx = np.arange(size, dtype=float)
    x = np.broadcast_to(idx - half, (size, size))
    y = np.broadcast_to((half - idx)[:, None], (size, size))
    return x, y


def polar_grid(size: int, radial_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Radius and angle per pixel.

    Angles are taken from the upper half plane representative of each
    antipodal pixel pair, so the pair sees bit-identical inputs. The basis is
    point symmetric, which makes this exact rather than an approximation.
    """
    if not radial_scale > 0:
        raise ValueError("radial_scale must be positive")
    x, y = pixel_offsets(size)
    flip = (y < 0) | ((y == 0) & (x < 0))
    xs = np.where(flip, -x, x)
    ys = np.where(flip, -y, y)
    r = np.hypot(xs, ys) / radial_scale
    phi = np.arctan2(ys, xs)
    return r, phi


def sample_basis_filter(
    spec: BasisSpec,
    order_index: int,
    orientation_index: int,
    size: int,
    radial_scale: float = 1.0,
) -> np.ndarray:
    """Sample one basis filter on a ``size x size`` grid; the center pixel is 1."""
    _check_size(size)
    order = spec.orders[order_index]
    orientation = spec.orientations[orientation_index]
    r, phi = polar_grid(size, radial_scale)
    c = (size - 1) // 2
    r[c, c] = 1.0  # placeholder, overwritten below
    out = log_radial_harmonic(r, phi, order, orientation, spec)
    out[c, c] = 1.0 + 0.0j
    return out


def build_basis(spec: BasisSpec, size: int, radial_scale: float = 1.0) -> SampledBasis:
    """Sample every (order, orientation) filter of ``spec``."""
    _check_size(size)
    filters = np.empty((spec.n_orders, spec.n_orientations, size, size), dtype=np.complex128)
    for ki in range(spec.n_orders):
        for ji in range(spec.n_orientations):
            filters[ki, ji] = sample_basis_filter(spec, ki, ji, size, radial_scale)
    return SampledBasis(spec=spec, size=size, filters=filters, radial_scale=radial_scale)


def center_of_mass(grid: np.ndarray) -> tuple[float, float]:
    """Center of mass of ``|grid|`` as (x, y) offsets from the grid center."""
    w = np.abs(grid)
    x, y = pixel_offsets(grid.shape[0])
    total = w.sum()
    return float((w * x).sum() / total), float((w * y).sum() / total)
