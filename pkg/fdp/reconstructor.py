from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import json
import logging

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ArtifactError, DegenerateDataError, GeometryMismatchError, RankError
from .volume import as_slice

logger = logging.getLogger(__name__)

# eigenvalues at or below this fraction of the largest one carry no signal
EIGEN_RTOL = 1e-10


class Reconstructor:
    '''
    Healthy-image model: maps a (preprocessed) slice to its reconstruction
    with the same dims.
    '''
    kind = 'base'

    def reconstruct(self, s) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        return {}


class IdentityReconstructor(Reconstructor):
    kind = 'identity'

    def reconstruct(self, s) -> np.ndarray:
        return np.array(as_slice(s), dtype=np.float64)


class SmootherReconstructor(Reconstructor):
    kind = 'smoother'

    def __init__(self, radius: int = 1):
        if radius < 0:
            raise ValueError(f'smoother radius must be >= 0, got {radius}')
        self.radius = int(radius)

    def reconstruct(self, s) -> np.ndarray:
        s = as_slice(s).astype(np.float64)
        # uniform_filter is separable: one box pass per axis
        return uniform_filter(s, size=2 * self.radius + 1, mode='nearest')

    def params(self) -> dict:
        return {'radius': self.radius}


@dataclass(frozen=True, eq=False)
class PcaModel(Reconstructor):
    '''
    Rank-r linear model. Inputs are projected onto the top principal
    directions of the training inputs; the target is predicted from those
    coordinates by a least-squares map.

    Parameters:
    shape: The (H, W) of the slices the model was fit on
    mean_input: The mean training input, flattened
    mean_target: The mean training target, flattened
    components: [r, H*W] orthonormal input basis
    target_map: [r, H*W] least-squares map from input coordinates to targets
    '''
    shape: Tuple[int, int]
    mean_input: np.ndarray
    mean_target: np.ndarray
    components: np.ndarray
    target_map: np.ndarray

    kind = 'pca'

    @property
    def rank(self) -> int:
        return self.components.shape[0]

    def _flatten(self, s) -> np.ndarray:
        s = as_slice(s)
        if s.shape != tuple(self.shape):
            raise GeometryMismatchError(f'model was fit on {tuple(self.shape)} slices, got {s.shape}')
        return s.astype(np.float64).ravel()

    def coordinates(self, s) -> np.ndarray:
        return self.components @ (self._flatten(s) - self.mean_input)

    def project_input(self, s) -> np.ndarray:
        '''
        Orthogonal projection of an input onto the model's affine subspace.
        '''
        x = self.mean_input + self.coordinates(s) @ self.components
        return x.reshape(self.shape)

    def reconstruct(self, s) -> np.ndarray:
        y = self.mean_target + self.coordinates(s) @ self.target_map
        return y.reshape(self.shape)

    def params(self) -> dict:
        return {'H': int(self.shape[0]), 'W': int(self.shape[1]), 'rank': self.rank}


def _stack(slices: Sequence, name: str) -> np.ndarray:
    if len(slices) == 0:
        raise ValueError(f'{name} must not be empty')
    slices = [as_slice(s) for s in slices]
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise GeometryMismatchError(f'{name} must share dims, got {sorted(shapes)}')
    return np.stack([s.astype(np.float64).ravel() for s in slices])


def train_pca(inputs: Sequence, targets: Sequence, r: int) -> PcaModel:
    '''
    Fits the rank-r model on paired training slices. The input basis comes
    from the eigendecomposition of the N x N Gram matrix of the centered
    inputs; for inputs == targets this is plain PCA reconstruction.

    Parameters:
    inputs: The training inputs (e.g. FDP-processed healthy slices)
    targets: The matching training targets, same count and dims
    r: The rank, 0 <= r <= N
    '''
    logger.info('`train_pca` has started')
    x = _stack(inputs, 'inputs')
    y = _stack(targets, 'targets')
    if x.shape != y.shape:
        raise GeometryMismatchError(f'inputs {x.shape} and targets {y.shape} do not pair up')

    n = x.shape[0]
    if not 0 <= r <= n:
        raise RankError(f'rank must lie in [0, {n}], got {r}')

    shape = as_slice(inputs[0]).shape
    mean_input, mean_target = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mean_input, y - mean_target

    if r == 0:
        empty = np.zeros((0, x.shape[1]))
        logger.info('`train_pca` has ended (rank 0)')
        return PcaModel(shape, mean_input, mean_target, empty, empty.copy())

    gram = xc @ xc.T
    eigenvalues, eigenvectors = np.linalg.eigh(gram)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues, eigenvectors = eigenvalues[order], eigenvectors[:, order]

    if eigenvalues[0] <= 0 or np.allclose(xc, 0):
        raise DegenerateDataError('degenerate data: training inputs have zero variance')

    keep = eigenvalues[:r] > EIGEN_RTOL * eigenvalues[0]
    if not keep.all():
        logger.warning(f'dropping {int((~keep).sum())} of {r} components with vanishing variance')
    eigenvalues, eigenvectors = eigenvalues[:r][keep], eigenvectors[:, :r][:, keep]

    # u_i eigenvector of X X^T  ->  X^T u_i / sqrt(l_i) eigenvector of X^T X
    basis = xc.T @ eigenvectors / np.sqrt(eigenvalues)
    basis, tri = np.linalg.qr(basis)
    basis *= np.sign(np.diag(tri))

    coords = xc @ basis
    target_map, *_ = np.linalg.lstsq(coords, yc, rcond=None)

    logger.info(f'PCA: rank {basis.shape[1]}, retained variance '
                f'{eigenvalues.sum() / max(np.trace(gram), 1e-300):.4f}')
    logger.info('`train_pca` has ended')
    return PcaModel(shape, mean_input, mean_target, basis.T.copy(), target_map)


def reconstruct(model: Reconstructor, s) -> np.ndarray:
    return model.reconstruct(s)


RECONSTRUCTORS = {
    'identity': IdentityReconstructor,
    'smoother': SmootherReconstructor,
    'pca': train_pca,
}


def get_reconstructor(name: str, **params) -> Reconstructor:
    '''
    Builds a reconstructor by name. `pca` needs inputs, targets and r and
    trains the model on the spot.
    '''
    if name not in RECONSTRUCTORS:
        raise ValueError(f'unknown reconstructor {name!r}, expected one of {sorted(RECONSTRUCTORS)}')
    return RECONSTRUCTORS[name](**params)


def save_reconstructor(model: Reconstructor, stem) -> None:
    '''
    Writes `<stem>.json` (kind and parameters) and `<stem>.bin` (for PCA:
    mean input, mean target, components, target map as little-endian f32).
    '''
    stem = Path(stem)
    header = {'kind': model.kind, **model.params()}
    payload = b''
    if isinstance(model, PcaModel):
        arrays = [model.mean_input, model.mean_target, model.components.ravel(), model.target_map.ravel()]
        payload = np.concatenate(arrays).astype('<f4').tobytes()

    stem.with_suffix('.json').write_text(json.dumps(header, indent=2, sort_keys=True) + '\n')
    stem.with_suffix('.bin').write_bytes(payload)


def load_reconstructor(stem) -> Reconstructor:
    stem = Path(stem)
    header_path, payload_path = stem.with_suffix('.json'), stem.with_suffix('.bin')
    if not header_path.exists() or not payload_path.exists():
        raise ArtifactError(f'model artifacts {header_path} / {payload_path} not found')

    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f'model header {header_path} is not valid JSON: {e}') from e

    kind = header.get('kind')
    if kind == 'identity':
        return IdentityReconstructor()
    if kind == 'smoother':
        return SmootherReconstructor(header['radius'])
    if kind != 'pca':
        raise ArtifactError(f'unknown model kind {kind!r} in {header_path}')

    h, w, r = header['H'], header['W'], header['rank']
    n = h * w
    payload = np.frombuffer(payload_path.read_bytes(), dtype='<f4').astype(np.float64)
    if payload.size != 2 * n + 2 * r * n:
        raise ArtifactError(f'model payload holds {payload.size} values, expected {2 * n + 2 * r * n}')

    mean_input, mean_target = payload[:n], payload[n:2 * n]
    components = payload[2 * n:2 * n + r * n].reshape(r, n)
    target_map = payload[2 * n + r * n:].reshape(r, n)
    return PcaModel((h, w), mean_input, mean_target, components, target_map)
