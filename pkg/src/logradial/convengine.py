"""Cross-correlation, upsampling and the cross-scale max-pooling layer.

Two correlation paths live here. ``xcorr2`` is the direct single-map
reference. ``FFTCorrelator`` handles the batched multi-channel, multi-scale
case used for training, together with its adjoints; it is checked against
``xcorr2`` in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft
from scipy import ndimage

from .filterbank import BasisSpec, build_basis
from .steering import CoefficientSet, steer, steered_size, steering_factors


@dataclass
class ScalePyramidResponse:
    per_scale: np.ndarray  # (n_scales, H, W)
    pooled: np.ndarray  # (H, W)
    argmax_scale: np.ndarray  # (H, W) int


def xcorr2(image: np.ndarray, kernel: np.ndarray, padding: str = "same") -> np.ndarray:
    """Discrete 2D cross-correlation ``out[p] = sum_q image[p + q - c] * kernel[q]``.

    ``same`` zero-pads so the output matches the input (``c`` is the kernel
    center); ``valid`` keeps only fully overlapping positions.
    """
    image = np.asarray(image, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    kh, kw = kernel.shape
    if padding == "same":
        top, left = (kh - 1) // 2, (kw - 1) // 2
        image = np.pad(image, ((top, kh - 1 - top), (left, kw - 1 - left)))
    elif padding == "valid":
        if kh > image.shape[0] or kw > image.shape[1]:
            raise ValueError(f"kernel {kernel.shape} larger than image {image.shape}")
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    windows = sliding_window_view(image, (kh, kw))
    return np.einsum("ijkl,kl->ij", windows, kernel)


def upsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling by an integer factor (pixel-center aligned, edge clamped)."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    image = np.asarray(image, dtype=float)
    if factor == 1:
        return image.copy()
    return ndimage.zoom(image, factor, order=1, grid_mode=True, mode="nearest")


def pool_scales(per_scale: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over the leading scale axis; ties go to the lowest index."""
    idx = np.argmax(per_scale, axis=0)
    pooled = np.take_along_axis(per_scale, idx[None], axis=0)[0]
    return pooled, idx


def scale_invariant_forward(
    inputs: np.ndarray,
    coeffs: Sequence[Sequence[CoefficientSet]],
    spec: BasisSpec,
    scales: Sequence[float],
    base_size: int,
    scale_normalize: bool = False,
) -> list[ScalePyramidResponse]:
    """Reference forward pass of one scale-invariant layer.

    ``inputs`` is (C_in, H, W) or a single (H, W) map; ``coeffs[o][i]`` is
    the coefficient set linking input channel ``i`` to output channel ``o``.
    Every kernel is steered to every scale, correlated with "same" padding,
    summed over input channels and max-pooled across scales.
    ``scale_normalize`` divides each scale's kernel by its s**(m-2) amplitude.
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if len(scales) == 0:
        raise ValueError("scale set must be nonempty")
    if list(scales) != sorted(scales):
        raise ValueError("scales must be ascending")
    if not coeffs:
        raise ValueError("need at least one output channel")
    out = []
    for row in coeffs:
        if isinstance(row, CoefficientSet):
            row = [row]
        if len(row) != x.shape[0]:
            raise ValueError(f"{len(row)} coefficient sets for {x.shape[0]} input channels")
        per_scale = np.zeros((len(scales),) + x.shape[1:])
        for si, s in enumerate(scales):
            gain = s ** (2 - spec.m) if scale_normalize else 1.0
            for ci, cs in enumerate(row):
                kernel = steer(cs, spec, s, base_size).values
                per_scale[si] += gain * xcorr2(x[ci], kernel, "same")
        pooled, idx = pool_scales(per_scale)
        out.append(ScalePyramidResponse(per_scale, pooled, idx))
    return out


# --- batched engine -----------------------------------------------------------


class ScaleBank:
    """Real design tensor mapping coefficients to kernels at every scale.

    A layer's parameters ``theta`` have shape (C_out, C_in, n_params); the
    kernel at scale index ``si`` is ``theta @ design[si]`` reshaped to
    (size, size). For a steerable bank ``n_params = 2 * n_filters`` holding
    real then imaginary coefficient parts, and smaller steered kernels sit
    centered inside the largest one.
    """

    def __init__(self, design: np.ndarray, scales: Sequence[float]):
        self.design = design  # (S, P, k, k)
        self.scales = tuple(float(s) for s in scales)

    @property
    def n_params(self) -> int:
        return self.design.shape[1]

    @property
    def size(self) -> int:
        return self.design.shape[-1]

    @classmethod
    def steerable(cls, spec: BasisSpec, scales: Sequence[float], base_size: int,
                  scale_normalize: bool = False) -> "ScaleBank":
        if list(scales) != sorted(scales) or not scales:
            raise ValueError("scales must be nonempty and ascending")
        sizes = [steered_size(base_size, s) for s in scales]
        kmax = max(sizes)
        nb = spec.n_filters
        design = np.zeros((len(scales), 2 * nb, kmax, kmax))
        for si, (s, size) in enumerate(zip(scales, sizes)):
            filters = build_basis(spec, size).filters
            factors = steering_factors(spec, s)
            if scale_normalize:
                factors = factors * s ** (2 - spec.m)
            steered = (factors[:, None, None, None] * filters).reshape(nb, size, size)
            off = (kmax - size) // 2
            sl = (slice(off, off + size), slice(off, off + size))
            # Re(c * B) = Re(c) Re(B) - Im(c) Im(B)
            design[si, :nb][(slice(None),) + sl] = steered.real
            design[si, nb:][(slice(None),) + sl] = -steered.imag
        return cls(design, scales)

    @classmethod
    def plain(cls, size: int) -> "ScaleBank":
        """Free-form single-scale kernels: one parameter per pixel."""
        design = np.eye(size * size).reshape(1, size * size, size, size)
        return cls(design, (1.0,))

    def kernels(self, theta: np.ndarray) -> np.ndarray:
        """(C_out, C_in, P) parameters -> (S, C_out, C_in, k, k) kernels."""
        o, i, p = theta.shape
        flat = theta.reshape(o * i, p) @ self.design.reshape(len(self.scales), p, -1)
        return flat.reshape(len(self.scales), o, i, self.size, self.size)

    def kernels_backward(self, dkernels: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`kernels`."""
        s, o, i, k, _ = dkernels.shape
        d = dkernels.reshape(s, o * i, k * k)
        design = self.design.reshape(s, self.n_params, k * k)
        return np.einsum("sak,spk->ap", d, design).reshape(o, i, self.n_params)


class FFTCorrelator:
    """Same-padded multi-channel cross-correlation of a batch against kernel stacks.

    ``forward`` maps x (N, C_in, H, W) and kernels (S, C_out, C_in, k, k) to
    responses (S, N, C_out, H, W), summing over input channels. Linear
    convolution is exact because the transform size covers H + k - 1.
    """

    def __init__(self, height: int, width: int, ksize: int, dtype=np.float64):
        if ksize % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.h, self.w, self.k = height, width, ksize
        self.dtype = np.dtype(dtype)
        self.ph = sfft.next_fast_len(height + ksize - 1, real=True)
        self.pw = sfft.next_fast_len(width + ksize - 1, real=True)
        self.c = (ksize - 1) // 2

    def _rfft(self, a: np.ndarray) -> np.ndarray:
        return sfft.rfft2(a, s=(self.ph, self.pw))

    def _irfft(self, a: np.ndarray) -> np.ndarray:
        return sfft.irfft2(a, s=(self.ph, self.pw))

    def forward(self, x: np.ndarray, kernels: np.ndarray):
        n, ci = x.shape[:2]
        s, co = kernels.shape[:2]
        xf = self._rfft(x.astype(self.dtype, copy=False))  # (N, I, F1, F2)
        kf = self._rfft(kernels[..., ::-1, ::-1].astype(self.dtype))  # (S, O, I, F1, F2)
        f = xf.shape[-2] * xf.shape[-1]
        xm = np.ascontiguousarray(xf.reshape(n, ci, f).transpose(2, 0, 1))  # (F, N, I)
        km = np.ascontiguousarray(kf.reshape(s * co, ci, f).transpose(2, 1, 0))  # (F, I, SO)
        ym = np.matmul(xm, km)  # (F, N, SO)
        yf = ym.transpose(2, 1, 0).reshape(s, co, n, *xf.shape[-2:]).swapaxes(1, 2)
        full = self._irfft(yf)
        y = full[..., self.c:self.c + self.h, self.c:self.c + self.w]
        return np.ascontiguousarray(y), (xm, km)

    def backward(self, dy: np.ndarray, cache, need_dx: bool = True):
        """Gradients w.r.t. input batch and kernels, given dL/dy (S, N, O, H, W)."""
        xm, km = cache
        s, n, co = dy.shape[:3]
        ci = xm.shape[2]
        padded = np.zeros((s, n, co, self.ph, self.pw), dtype=self.dtype)
        padded[..., self.c:self.c + self.h, self.c:self.c + self.w] = dy
        gf = self._rfft(padded)
        fshape = gf.shape[-2:]
        f = fshape[0] * fshape[1]
        gm = np.ascontiguousarray(gf.transpose(1, 0, 2, 3, 4).reshape(n, s * co, f).transpose(2, 0, 1))  # (F, N, SO)
        dx = None
        if need_dx:
            dxm = np.matmul(gm, km.conj().transpose(0, 2, 1))  # (F, N, I)
            dxf = dxm.transpose(1, 2, 0).reshape(n, ci, *fshape)
            dx = self._irfft(dxf)[..., :self.h, :self.w]
        dkm = np.matmul(xm.conj().transpose(0, 2, 1), gm)  # (F, I, SO)
        dkf = dkm.transpose(2, 1, 0).reshape(s, co, ci, *fshape)
        dflip = self._irfft(dkf)[..., :self.k, :self.k]
        return dx, np.ascontiguousarray(dflip[..., ::-1, ::-1])
