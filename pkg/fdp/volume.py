from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import logging
import struct

import numpy as np
from PIL import Image

from .errors import (
    BadMagicError,
    DimOverflowError,
    EmptyVolumeError,
    PixelRangeError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    VolumeFormatError,
)

logger = logging.getLogger(__name__)

MAGIC = b'FVOL'
VERSION = 1
HEADER = struct.Struct('<4sIIIIB')
MAX_VOXELS = 2 ** 31 - 1


def as_slice(pixels) -> np.ndarray:
    '''
    Validates a 2D slice image. Both sides have to be even and at least 8
    so that the centered spectrum has its DC exactly at (H/2, W/2).
    '''
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f'slice must be 2D, got shape {pixels.shape}')

    h, w = pixels.shape
    if h < 8 or w < 8 or h % 2 or w % 2:
        raise ValueError(f'slice sides must be even and >= 8, got {h}x{w}')

    if not np.isfinite(pixels).all():
        raise ValueError('slice contains non-finite values')

    return pixels


def as_mask(bits, dims: Optional[Tuple[int, int, int]] = None) -> np.ndarray:
    bits = np.asarray(bits, dtype=bool)
    if dims is not None and bits.shape != tuple(dims):
        raise ValueError(f'mask dims {bits.shape} do not match volume dims {tuple(dims)}')
    return bits


@dataclass(frozen=True, eq=False)
class Volume:
    voxels: np.ndarray
    mask: Optional[np.ndarray] = None
    spacing: Optional[Tuple[float, float, float]] = field(default=None)

    def __post_init__(self):
        voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if voxels.ndim != 3 or min(voxels.shape) < 1:
            raise ValueError(f'volume must be a non-empty 3D grid, got shape {voxels.shape}')
        if not np.isfinite(voxels).all():
            raise ValueError('volume contains non-finite values')

        # frozen dataclass, so the normalized arrays are written through object
        object.__setattr__(self, 'voxels', voxels)
        if self.mask is not None:
            object.__setattr__(self, 'mask', as_mask(self.mask, voxels.shape))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.voxels.shape

    def __len__(self):
        return self.voxels.shape[0]

    def slice(self, i: int) -> np.ndarray:
        return as_slice(self.voxels[i])

    def slices(self):
        for i in range(len(self)):
            yield self.slice(i)

    def with_voxels(self, voxels) -> 'Volume':
        return Volume(voxels, mask=self.mask, spacing=self.spacing)


def normalize_volume(v: Volume, pct: float = 98.0) -> Volume:
    '''
    Scales a volume by the given percentile of its positive voxels and clamps
    the result to [0, 1].

    Parameters:
    v: The volume to be normalized (needs at least one positive voxel)
    pct: The percentile used as the reference intensity, in (50, 100]
    '''
    if not 50 < pct <= 100:
        raise ValueError(f'percentile must lie in (50, 100], got {pct}')

    positive = v.voxels[v.voxels > 0]
    if positive.size == 0:
        raise EmptyVolumeError('empty volume')

    # an order statistic (no interpolation), so normalizing twice is a no-op
    reference = np.percentile(positive.astype(np.float64), pct, method='lower')
    logger.debug(f'normalize_volume: p{pct} reference intensity={reference:.6f}')
    scaled = np.clip(v.voxels.astype(np.float64) / reference, 0, 1)
    return v.with_voxels(scaled)


def write_volume(v: Volume, path) -> None:
    '''
    Writes a volume in the FVOL format: magic, u32 version, u32 D/H/W,
    u8 has_mask, little-endian f32 voxels and optionally one byte per voxel
    of brain mask.
    '''
    d, h, w = v.dims
    has_mask = v.mask is not None

    with open(path, 'wb') as f:
        f.write(HEADER.pack(MAGIC, VERSION, d, h, w, int(has_mask)))
        f.write(v.voxels.astype('<f4').tobytes())
        if has_mask:
            f.write(v.mask.astype(np.uint8).tobytes())


def read_volume(path) -> Volume:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise TruncatedPayloadError(f'truncated payload: {path} is shorter than the header')

    magic, version, d, h, w, has_mask = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f'bad magic in {path}: {magic!r}')
    if version != VERSION:
        raise UnsupportedVersionError(f'unsupported FVOL version {version} in {path}')
    if min(d, h, w) == 0 or d * h * w > MAX_VOXELS:
        raise DimOverflowError(f'invalid dims {d}x{h}x{w} in {path}')
    if has_mask not in (0, 1):
        raise VolumeFormatError(f'has_mask flag must be 0 or 1, got {has_mask}')

    n = d * h * w
    expected = HEADER.size + 4 * n + (n if has_mask else 0)
    if len(data) < expected:
        raise TruncatedPayloadError(
            f'truncated payload: {path} holds {len(data)} bytes, expected {expected}')
    if len(data) > expected:
        raise VolumeFormatError(f'{len(data) - expected} trailing bytes in {path}')

    offset = HEADER.size
    voxels = np.frombuffer(data, dtype='<f4', count=n, offset=offset)
    voxels = voxels.astype(np.float32).reshape(d, h, w)

    mask = None
    if has_mask:
        raw = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset + 4 * n)
        if raw.max(initial=0) > 1:
            raise VolumeFormatError(f'mask bytes in {path} must be 0 or 1')
        mask = raw.reshape(d, h, w).astype(bool)

    return Volume(voxels, mask=mask)


def export_slice_pgm(s, path) -> None:
    '''
    Saves a slice with values in [0, 1] as an 8-bit binary PGM, mapping
    each pixel p to round(p * 255) (halves round up).
    '''
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f'slice must be 2D, got shape {s.shape}')
    if not np.isfinite(s).all() or s.min(initial=0) < 0 or s.max(initial=0) > 1:
        raise PixelRangeError(f'pixel values must lie in [0, 1] to export {path}')

    pixels = np.floor(s * 255 + 0.5).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PPM')
