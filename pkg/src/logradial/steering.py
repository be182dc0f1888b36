"""Kernel synthesis and scale steering over a log-radial harmonic basis."""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy import ndimage, special

from .filterbank import BasisSpec, SampledBasis, build_basis, pixel_offsets

Pattern = Union[np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class CoefficientSet:
    spec: BasisSpec
    # complex, shape (n_orders, n_orientations)
    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.complex128)
        if c.size != self.spec.n_filters:
            raise ValueError(f"expected {self.spec.n_filters} coefficients, got {c.size}")
        object.__setattr__(self, "c", c.reshape(self.spec.n_orders, self.spec.n_orientations))

    @classmethod
    def zeros(cls, spec: BasisSpec) -> "CoefficientSet":
        return cls(spec, np.zeros(spec.n_filters, dtype=np.complex128))

    @classmethod
    def random(cls, spec: BasisSpec, rng: np.random.Generator, std: float = 1.0) -> "CoefficientSet":
        n = spec.n_filters
        return cls(spec, std * (rng.standard_normal(n) + 1j * rng.standard_normal(n)))

    def __add__(self, other: "CoefficientSet") -> "CoefficientSet":
        _check_same_spec(self.spec, other.spec)
        return CoefficientSet(self.spec, self.c + other.c)

    def __mul__(self, alpha: complex) -> "CoefficientSet":
        return CoefficientSet(self.spec, alpha * self.c)

    __rmul__ = __mul__


@dataclass(frozen=True)
class SteeredKernel:
    values: np.ndarray
    scale: float
    size: int


def _check_same_spec(a: BasisSpec, b: BasisSpec) -> None:
    if a != b:
        raise ValueError("coefficient set and basis were built from different specs")


def steered_size(base_size: int, s: float) -> int:
    """Nearest odd integer to ``base_size * s``; ties go to the larger size."""
    if not s > 0:
        raise ValueError(f"scale factor must be positive, got {s}")
    if base_size < 1 or base_size % 2 == 0:
        raise ValueError(f"base size must be a positive odd integer, got {base_size}")
    v = base_size * s
    below = 2 * math.floor((v - 1) / 2) + 1
    above = below + 2
    size = below if v - below < above - v else above
    if size < 1:
        raise ValueError(f"steered size {size} < 1 for base {base_size}, scale {s}")
    return size


def steering_factors(spec: BasisSpec, s: float) -> np.ndarray:
    """Per-order complex multipliers s**(m-2) * exp(-i k log s)."""
    if not s > 0:
        raise ValueError(f"scale factor must be positive, got {s}")
    ls = math.log(s)
    amp = s ** (spec.m - 2)
    return np.array([amp * cmath.exp(-1j * k * ls) for k in spec.orders])


def synthesize(coeffs: CoefficientSet, basis: SampledBasis) -> np.ndarray:
    """Complex kernel sum_{k,j} c_kj S^kj on the sampled grid."""
    _check_same_spec(coeffs.spec, basis.spec)
    return np.einsum("kj,kjxy->xy", coeffs.c, basis.filters)


def steered_complex(coeffs: CoefficientSet, s: float, base_size: int) -> tuple[np.ndarray, int]:
    """Complex steered kernel and its size (before taking the real part)."""
    size = steered_size(base_size, s)
    basis = build_basis(coeffs.spec, size, radial_scale=1.0)
    per_order = np.einsum("kj,kjxy->kxy", coeffs.c, basis.filters)
    w = np.einsum("k,kxy->xy", steering_factors(coeffs.spec, s), per_order)
    return w, size


def steer(coeffs: CoefficientSet, spec: BasisSpec, s: float, base_size: int) -> SteeredKernel:
    """Steer a kernel by scale factor ``s`` using only phase/amplitude factors."""
    _check_same_spec(coeffs.spec, spec)
    w, size = steered_complex(coeffs, s, base_size)
    return SteeredKernel(values=w.real.copy(), scale=float(s), size=size)


def oracle_resample(coeffs: CoefficientSet, spec: BasisSpec, s: float, base_size: int) -> np.ndarray:
    """Brute-force steered kernel by resampling the continuous base filter.

    Each pixel at radius r is evaluated as ``s**-2 * W(r / s, phi)``, one
    pixel at a time with scalar math. The center keeps the r = 0 convention
    of the sampled basis (every basis filter equals 1 there).
    """
    _check_same_spec(coeffs.spec, spec)
    size = steered_size(base_size, s)
    half = (size - 1) // 2
    two_var = 2.0 * spec.sigma_phi**2
    c = coeffs.c.tolist()
    out = np.zeros((size, size))
    for row in range(size):
        for col in range(size):
            x, y = col - half, half - row
            total = 0j
            if x == 0 and y == 0:
                for ki, k in enumerate(spec.orders):
                    factor = s ** (spec.m - 2) * cmath.exp(-1j * k * math.log(s))
                    total += factor * sum(c[ki])
                out[row, col] = total.real
                continue
            r = math.hypot(x, y) / s
            phi = math.atan2(y, x)
            angs = []
            for phi_j in spec.orientations:
                ang = 0.0
                for centre in (phi_j, phi_j + math.pi):
                    d = abs(phi - centre) % (2 * math.pi)
                    d = min(d, 2 * math.pi - d)
                    ang += math.exp(-d * d / two_var)
                angs.append(ang)
            for ki, k in enumerate(spec.orders):
                radial = r ** (-spec.m) * cmath.exp(1j * (k * math.log(r) + spec.beta))
                for ji, ang in enumerate(angs):
                    total += c[ki][ji] * ang * radial
            out[row, col] = (total / s**2).real
    return out


# --- continuous-domain check of the steering theorem ------------------------


def _sample_pattern(pattern: Pattern, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate a pattern at continuous (x right, y up) offsets from its center."""
    if callable(pattern):
        return np.asarray(pattern(x, y), dtype=float)
    img = np.asarray(pattern, dtype=float)
    cy, cx = (img.shape[0] - 1) / 2, (img.shape[1] - 1) / 2
    coords = np.stack([cy - y, cx + x])
    return ndimage.map_coordinates(img, coords, order=3, mode="constant", cval=0.0)


def _disc_terms(pattern: Pattern, spec: BasisSpec, radius: float, resolution: int,
                pattern_scale: float = 1.0) -> np.ndarray:
    """Correlation of every basis filter with a pattern over a disc, at its center.

    The grid has ``resolution`` samples per unit length and each sample
    carries area ``1 / resolution**2``. Returns complex (n_orders, n_orientations).
    """
    half = int(math.ceil(radius * resolution))
    size = 2 * half + 1
    basis = build_basis(spec, size, radial_scale=resolution)
    x, y = pixel_offsets(size)
    x, y = x / resolution, y / resolution
    inside = np.hypot(x, y) <= radius * (1 + 1e-12)
    values = _sample_pattern(pattern, pattern_scale * x, pattern_scale * y) * inside
    return np.einsum("xy,kjxy->kj", values, basis.filters) / resolution**2


def theorem1_responses(
    pattern: Pattern,
    coeffs: CoefficientSet,
    s: float,
    base_size: int,
    upsample_factor: int = 1,
    part: str = "complex",
) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the steering identity, per (order, orientation) term.

    Left: ``c_kj`` times the response of the radius ``a`` basis filter on the
    pattern shrunk by ``s`` about its center. Right: the steering factor times
    the radius ``a*s`` response on the unscaled pattern. Summing either side
    over all terms gives the kernel response. ``part='real'`` keeps only real
    components, which is what a real-valued steered kernel computes.
    """
    if upsample_factor < 1 or int(upsample_factor) != upsample_factor:
        raise ValueError("upsample_factor must be a positive integer")
    if part not in ("complex", "real"):
        raise ValueError(f"part must be 'complex' or 'real', got {part!r}")
    spec = coeffs.spec
    a = (base_size - 1) / 2
    factors = steering_factors(spec, s)[:, None]
    lhs = coeffs.c * _disc_terms(pattern, spec, a, upsample_factor, pattern_scale=s)
    rhs = factors * coeffs.c * _disc_terms(pattern, spec, a * s, upsample_factor)
    if part == "real":
        lhs, rhs = lhs.real, rhs.real
    if not np.any(lhs) and not np.any(rhs):
        raise ArithmeticError("degenerate pattern: both responses are zero")
    return lhs, rhs


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        raise ArithmeticError("relative error undefined for two zero responses")
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom)


def verify_theorem1(
    pattern: Pattern,
    coeffs: CoefficientSet,
    spec: BasisSpec,
    s: float,
    base_size: int,
    upsample_factor: int = 1,
    part: str = "complex",
) -> float:
    """Relative error between the two sides of the steering identity."""
    _check_same_spec(coeffs.spec, spec)
    lhs, rhs = theorem1_responses(pattern, coeffs, s, base_size, upsample_factor, part)
    return relative_error(lhs, rhs)


def per_order_errors(
    pattern: Pattern,
    coeffs: CoefficientSet,
    s: float,
    base_size: int,
    upsample_factor: int = 1,
    part: str = "complex",
) -> np.ndarray:
    """Relative error of the steering identity for each filter order separately."""
    lhs, rhs = theorem1_responses(pattern, coeffs, s, base_size, upsample_factor, part)
    num = np.linalg.norm(lhs - rhs, axis=1)
    return num / np.maximum(np.linalg.norm(lhs, axis=1), np.linalg.norm(rhs, axis=1))


# --- scale-selective kernels ---------------------------------------------------


def annular_blob(size: int, width: float) -> np.ndarray:
    """Centered ring pattern ``q exp(-q / 2)`` with ``q = r^2 / width^2`` on a size x size grid.

    It vanishes at the center, so the response of a kernel at the pattern
    center does not depend on the kernel's center pixel.
    """
    axis = np.arange(size) - (size - 1) / 2
    q = (axis[None, :] ** 2 + axis[:, None] ** 2) / width**2
    return q * np.exp(-q / 2)


def scale_tuned_coefficients(spec: BasisSpec, width: float, order_index: int = -1) -> CoefficientSet:
    """Coefficients whose unsteered kernel responds most strongly to ``annular_blob(., width)``.

    In the continuum the center response of the kernel steered to scale t is
    ``Re sum_k c_k M_k rho^(2 - m + i k)`` with ``rho = width / t`` and ``M_k`` the
    Mellin moment of the ring profile. Choosing the phase of ``c_k`` so that
    each term's log-derivative vanishes at ``rho = width`` puts the maximum at
    t = 1. A blob of width ``s * width`` then peaks at t = s.
    """
    if spec.m >= 2:
        raise ValueError("scale tuning needs radial decay m < 2")
    a = 2 - spec.m
    c = np.zeros((spec.n_orders, spec.n_orientations), dtype=complex)
    k = spec.orders[order_index]
    moment = 2 ** ((a + 1j * k) / 2) * special.gamma((a + 2 + 1j * k) / 2)
    phase = math.atan(a / k) - k * math.log(width) - cmath.phase(moment) - spec.beta
    c[order_index] = cmath.exp(1j * phase)
    return CoefficientSet(spec, c)
