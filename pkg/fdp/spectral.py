from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Optional, Tuple

import logging

import numpy as np

from .errors import FilterThresholdError, GeometryMismatchError
from .volume import as_slice

logger = logging.getLogger(__name__)


def dft2_centered(s) -> np.ndarray:
    '''
    2D DFT of a slice with the DC component moved to (H/2, W/2).
    '''
    s = as_slice(s)
    return np.fft.fftshift(np.fft.fft2(s.astype(np.float64)))


def idft2_real(f) -> np.ndarray:
    '''
    Inverse of `dft2_centered`. Spectra that lost their conjugate symmetry
    (e.g. after the low block was replaced) are projected to the real part.
    '''
    image = np.fft.ifft2(np.fft.ifftshift(as_spectrum(f)))
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug(f'idft2_real: discarded imaginary energy={np.sum(image.imag ** 2):.3e}')
    return image.real


def imaginary_energy(f) -> float:
    '''
    Energy of the imaginary part that `idft2_real` discards.
    '''
    image = np.fft.ifft2(np.fft.ifftshift(as_spectrum(f)))
    return float(np.sum(image.imag ** 2))


def as_spectrum(f) -> np.ndarray:
    f = np.asarray(f)
    if f.ndim != 2:
        raise ValueError(f'spectrum must be 2D, got shape {f.shape}')
    if not np.isfinite(f).all():
        raise ValueError('spectrum contains non-finite coefficients')
    return f


@dataclass(frozen=True)
class HighpassFilterSpec:
    H: int
    W: int
    m: float

    @property
    def d0(self) -> float:
        return min(self.m * self.H, self.m * self.W)

    @cached_property
    def distance(self) -> np.ndarray:
        u = np.arange(self.H)[:, None] - self.H // 2
        v = np.arange(self.W)[None, :] - self.W // 2
        return np.sqrt(u ** 2 + v ** 2)

    @cached_property
    def stop_mask(self) -> np.ndarray:
        return self.distance <= self.d0

    @cached_property
    def pass_mask(self) -> np.ndarray:
        return ~self.stop_mask

    @cached_property
    def disk(self) -> Tuple[np.ndarray, np.ndarray]:
        # np.nonzero walks the grid row-major: ascending u, then v
        return np.nonzero(self.stop_mask)

    @property
    def n_disk(self) -> int:
        return int(self.disk[0].size)

    @property
    def d(self) -> int:
        return 2 * self.n_disk


@lru_cache(maxsize=64)
def build_filter(H: int, W: int, m: float) -> HighpassFilterSpec:
    '''
    Ideal high-pass filter: points with distance D(u, v) > D0 from the
    spectrum center pass, the closed disk D <= D0 is stopped.

    Parameters:
    H, W: The slice size (both even)
    m: The filtering threshold in [0, 1]; D0 = min(m * H, m * W)
    '''
    if not 0 <= m <= 1:
        raise FilterThresholdError(f'filter threshold m must lie in [0, 1], got {m}')
    if H % 2 or W % 2:
        raise ValueError(f'filter geometry needs even sides, got {H}x{W}')
    return HighpassFilterSpec(int(H), int(W), float(m))


@dataclass(frozen=True, eq=False)
class LowBlock:
    values: np.ndarray
    spec: HighpassFilterSpec

    def __post_init__(self):
        if self.values.shape != (self.spec.n_disk,):
            raise GeometryMismatchError(
                f'low block holds {self.values.shape} values, '
                f'filter {self.spec} stops {self.spec.n_disk} points')

    @property
    def points(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.spec.disk


@dataclass(frozen=True, eq=False)
class FreqDecomposition:
    low: LowBlock
    high: np.ndarray

    @property
    def spec(self) -> HighpassFilterSpec:
        return self.low.spec


def decompose(s, m: float) -> FreqDecomposition:
    f = dft2_centered(s)
    spec = build_filter(*f.shape, m)

    low = LowBlock(f[spec.disk].copy(), spec)
    high = np.where(spec.pass_mask, f, 0)

    return FreqDecomposition(low, high)


def merge(low: LowBlock, high, spec: Optional[HighpassFilterSpec] = None) -> np.ndarray:
    '''
    Writes the low block back into a high-frequency spectrum.

    Parameters:
    low: The (possibly replaced) low-frequency block
    high: The centered high-frequency spectrum
    spec: The filter the high spectrum was produced with; when given it
        has to match the geometry of the low block
    '''
    high = as_spectrum(high)
    if spec is not None and spec != low.spec:
        raise GeometryMismatchError(f'low block built with {low.spec}, high spectrum with {spec}')
    if high.shape != (low.spec.H, low.spec.W):
        raise GeometryMismatchError(
            f'low block expects a {low.spec.H}x{low.spec.W} spectrum, got {high.shape}')

    merged = high.astype(np.complex128, copy=True)
    merged[low.points] = low.values
    return merged


def highfreq_image(s, m: float) -> np.ndarray:
    return idft2_real(decompose(s, m).high)


def lowfreq_image(s, m: float) -> np.ndarray:
    dec = decompose(s, m)
    return idft2_real(merge(dec.low, np.zeros_like(dec.high)))
