from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import logging

import numpy as np

from .config import FdpConfig
from .frm import PriorContextBank, reconstruct_lowfreq
from .reconstructor import Reconstructor, train_pca
from .spectral import decompose, highfreq_image, idft2_real, merge
from .utils import parallel_map
from .volume import Volume, as_slice

logger = logging.getLogger(__name__)


def fdp_preprocess(s, bank: Optional[PriorContextBank], config: FdpConfig) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Frequency-decomposition preprocessing of one slice.

    Returns (I_hat, I_h): the slice with its low-frequency disk (at m_frm)
    replaced by the attention reconstruction from the bank, and the
    high-frequency image at m_hfsup (zeros when HFSup is off).
    '''
    s = as_slice(s).astype(np.float64)

    if config.use_frm:
        if bank is None:
            raise ValueError('FRM is on but no prior-context bank was given')
        dec = decompose(s, config.m_frm)
        i_hat = idft2_real(merge(reconstruct_lowfreq(dec, bank), dec.high, dec.spec))
    else:
        i_hat = s

    i_h = highfreq_image(s, config.m_hfsup) if config.use_hfsup else np.zeros_like(s)
    return i_hat, i_h


def preprocess_volume(
    v: Volume,
    bank: Optional[PriorContextBank],
    config: FdpConfig,
    threads: Optional[int] = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    '''
    `fdp_preprocess` over every slice, stacked back in slice order.
    '''
    pairs = parallel_map(lambda i: fdp_preprocess(v.slice(i), bank, config), range(len(v)), threads)
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def train_pipeline(
    volumes: Sequence[Volume],
    config: FdpConfig,
    bank: Optional[PriorContextBank],
    rank: int,
    threads: Optional[int] = 1,
) -> Reconstructor:
    '''
    Second training stage: fits the rank-r reconstructor on FDP-processed
    healthy slices against the targets I - alpha * I_h, so that
    R(I_hat) + alpha * I_h approximates I on healthy data.

    Parameters:
    volumes: The healthy training volumes
    config: The FDP switches and thresholds
    bank: The (frozen) prior-context bank, ignored when FRM is off
    rank: The reconstructor rank
    threads: The worker count for the preprocessing
    '''
    logger.info('`train_pipeline` has started')
    if len(volumes) == 0:
        raise ValueError('train_pipeline needs a non-empty training set')

    inputs, targets = [], []
    for v in volumes:
        i_hat, i_h = preprocess_volume(v, bank, config, threads)
        originals = v.voxels.astype(np.float64)
        inputs.extend(i_hat)
        targets.extend(originals - config.alpha * i_h)

    model = train_pca(inputs, targets, rank)
    logger.info('`train_pipeline` has ended')
    return model


@dataclass(frozen=True, eq=False)
class Detection:
    i_hat: np.ndarray
    i_h: np.ndarray
    recon: np.ndarray
    amap: np.ndarray


def detect_volume(
    v: Volume,
    bank: Optional[PriorContextBank],
    model: Reconstructor,
    config: FdpConfig,
    threads: Optional[int] = 1,
) -> Detection:
    def detect_slice(i):
        s = v.slice(i).astype(np.float64)
        i_hat, i_h = fdp_preprocess(s, bank, config)
        recon = model.reconstruct(i_hat) + config.alpha * i_h
        return i_hat, i_h, recon, np.abs(s - recon)

    parts = parallel_map(detect_slice, range(len(v)), threads)
    i_hat, i_h, recon, amap = (np.stack(p) for p in zip(*parts))
    return Detection(i_hat, i_h, recon, amap)


def infer_volume(
    v: Volume,
    bank: Optional[PriorContextBank],
    model: Reconstructor,
    config: FdpConfig,
    threads: Optional[int] = 1,
) -> Tuple[Volume, np.ndarray]:
    '''
    Healthy reconstruction R(I_hat) + alpha * I_h of every slice and the
    per-voxel anomaly scores |I - I_rec|.
    '''
    detection = detect_volume(v, bank, model, config, threads)
    return Volume(detection.recon, mask=v.mask, spacing=v.spacing), detection.amap


def render_panel(origin, i_hat, recon, residual) -> np.ndarray:
    '''
    Origin | I_hat | Recon | Residual side by side, clipped to [0, 1].
    '''
    columns = [np.clip(np.asarray(c, dtype=np.float64), 0, 1) for c in (origin, i_hat, recon, residual)]
    shapes = {c.shape for c in columns}
    if len(shapes) != 1:
        raise ValueError(f'panel columns must share a shape, got {sorted(shapes)}')
    return np.concatenate(columns, axis=1)
