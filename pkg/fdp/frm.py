from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import json
import logging

import numpy as np
from scipy.special import softmax
from sklearn.cluster import KMeans
from threadpoolctl import threadpool_limits

from .config import FrmTrainConfig
from .data import make_loader
from .errors import ArtifactError, DegenerateDataError, GeometryMismatchError
from .spectral import FreqDecomposition, HighpassFilterSpec, LowBlock, build_filter, decompose, idft2_real, merge
from .utils import to_unit_range
from .volume import Volume

logger = logging.getLogger(__name__)

LLOYD_MAX_ITER = 100


def flatten_low(low: LowBlock) -> np.ndarray:
    '''
    Interleaves (re, im) of the canonical-ordered low block into a real
    vector of length 2 * n_disk.
    '''
    return np.stack([low.values.real, low.values.imag], axis=-1).ravel()


def unflatten_low(vector: np.ndarray, spec: HighpassFilterSpec) -> LowBlock:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (spec.d,):
        raise GeometryMismatchError(f'vector of shape {vector.shape} does not fit {spec} (d={spec.d})')
    pairs = vector.reshape(-1, 2)
    return LowBlock(pairs[:, 0] + 1j * pairs[:, 1], spec)


@dataclass(frozen=True, eq=False)
class PriorContextBank:
    contexts: np.ndarray  # [k, d]
    spec: Optional[HighpassFilterSpec] = None
    seed: int = 0

    def __post_init__(self):
        contexts = np.asarray(self.contexts, dtype=np.float64)
        if contexts.ndim != 2 or contexts.shape[0] < 1:
            raise ValueError(f'a bank needs at least one context, got shape {contexts.shape}')
        if self.spec is not None and contexts.shape[1] != self.spec.d:
            raise GeometryMismatchError(
                f'contexts of shape {contexts.shape} do not fit {self.spec} (d={self.spec.d})')
        if not np.isfinite(contexts).all():
            raise ValueError('prior contexts must be finite')
        object.__setattr__(self, 'contexts', contexts)

    @property
    def k(self) -> int:
        return self.contexts.shape[0]

    @property
    def d(self) -> int:
        return self.contexts.shape[1]

    @property
    def temperature(self) -> float:
        return float(np.sqrt(self.d))

    def with_contexts(self, contexts: np.ndarray) -> 'PriorContextBank':
        return PriorContextBank(contexts, self.spec, self.seed)

    def check_geometry(self, spec: HighpassFilterSpec):
        if spec != self.spec:
            raise GeometryMismatchError(f'bank was built for {self.spec}, got {spec}')


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, bank: PriorContextBank) -> 'AdamState':
        return cls(np.zeros_like(bank.contexts), np.zeros_like(bank.contexts), 0)


def collect_lowfreq_vectors(volumes: Sequence[Volume], m: float) -> np.ndarray:
    '''
    One flattened low-frequency vector per slice, volumes first, then slices.
    '''
    if len(volumes) == 0:
        raise ValueError('cannot collect low-frequency vectors from an empty volume list')

    shapes = {v.dims[1:] for v in volumes}
    if len(shapes) != 1:
        raise GeometryMismatchError(f'all slices must share H, W; got {sorted(shapes)}')

    rows = [flatten_low(decompose(s, m).low) for v in volumes for s in v.slices()]
    return np.stack(rows)


def kmeanspp_seeds(data: np.ndarray, k: int, seed: int) -> np.ndarray:
    '''
    k-means++ seeding: the first center is drawn uniformly, each next one
    with probability proportional to its squared distance to the closest
    center picked so far.
    '''
    rng = np.random.default_rng(seed)
    n = data.shape[0]

    centers = [data[rng.integers(n)]]
    closest = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise DegenerateDataError(
                f'degenerate data: fewer than {k} distinct rows, k-means++ cannot pick more centers')
        center = data[rng.choice(n, p=closest / total)]
        centers.append(center)
        closest = np.minimum(closest, np.sum((data - center) ** 2, axis=1))

    return np.stack(centers)


def kmeanspp_init(
    data: np.ndarray,
    k: int,
    seed: int,
    spec: Optional[HighpassFilterSpec] = None,
) -> PriorContextBank:
    '''
    Initializes the prior contexts with k-means++ seeding refined by Lloyd
    iterations (until the assignments stop changing, at most 100 rounds).

    Parameters:
    data: The [N, d] matrix of low-frequency vectors
    k: The number of prior contexts (N >= k >= 1)
    seed: The seed of the ++ sampling
    spec: The filter geometry the vectors come from (None leaves the bank
        unbound, e.g. for plain point clouds)
    '''
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if k < 1:
        raise ValueError(f'k must be >= 1, got {k}')
    if n < k:
        raise ValueError(f'need at least k={k} rows for k-means++, got {n}')
    if k > 1 and np.all(data == data[0]):
        raise DegenerateDataError('degenerate data: all rows are identical')

    seeds = kmeanspp_seeds(data, k, seed)
    kmeans = KMeans(
        n_clusters=k,
        init=seeds,
        n_init=1,
        max_iter=LLOYD_MAX_ITER,
        tol=0,
        algorithm='lloyd',
    )
    # one OpenMP thread keeps the Lloyd reductions in a fixed order
    with threadpool_limits(limits=1, user_api='openmp'):
        kmeans.fit(data)
    logger.info(f'k-means: k={k}, {kmeans.n_iter_} Lloyd iterations, inertia={kmeans.inertia_:.4e}')

    return PriorContextBank(kmeans.cluster_centers_, spec, seed)


def attend(query: np.ndarray, bank: PriorContextBank) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Scaled dot-product attention with the raw contexts as keys and values.
    Accepts a single query [d] or a batch [B, d].
    '''
    query = np.asarray(query, dtype=np.float64)
    if query.shape[-1] != bank.d:
        raise GeometryMismatchError(f'query width {query.shape[-1]} does not match bank width {bank.d}')

    logits = query @ bank.contexts.T / bank.temperature
    weights = softmax(logits, axis=-1)
    return weights @ bank.contexts, weights


def frm_loss(batch_queries: np.ndarray, bank: PriorContextBank) -> float:
    batch_queries = np.atleast_2d(np.asarray(batch_queries, dtype=np.float64))
    if batch_queries.shape[0] == 0:
        raise ValueError('frm_loss needs a non-empty batch')

    recon, _ = attend(batch_queries, bank)
    return float(np.mean(np.abs(recon - batch_queries)))


def frm_grad(batch_queries: np.ndarray, bank: PriorContextBank) -> np.ndarray:
    '''
    Exact gradient of `frm_loss` with respect to the contexts. Every p_i
    shows up twice: as a value in the weighted sum and as a key in the
    logits <q, p_i> / tau.
    '''
    q = np.atleast_2d(np.asarray(batch_queries, dtype=np.float64))
    p = bank.contexts
    b, d = q.shape

    recon, w = attend(q, bank)

    # d loss / d recon, with sign(0) = 0
    g = np.sign(recon - q) / (b * d)

    # value path
    grad = w.T @ g

    # key path, through the softmax
    a = g @ p.T
    s = w * (a - np.sum(w * a, axis=1, keepdims=True))
    grad += s.T @ q / bank.temperature

    return grad


def adam_step(
    bank: PriorContextBank,
    grad: np.ndarray,
    state: AdamState,
    config: FrmTrainConfig,
) -> Tuple[PriorContextBank, AdamState]:
    if grad.shape != bank.contexts.shape:
        raise GeometryMismatchError(f'gradient shape {grad.shape} != bank shape {bank.contexts.shape}')

    t = state.t + 1
    m = config.beta1 * state.m + (1 - config.beta1) * grad
    v = config.beta2 * state.v + (1 - config.beta2) * grad ** 2
    m_hat = m / (1 - config.beta1 ** t)
    v_hat = v / (1 - config.beta2 ** t)

    contexts = bank.contexts - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return bank.with_contexts(contexts), AdamState(m, v, t)


def train_frm(
    volumes: Sequence[Volume],
    m: float,
    config: FrmTrainConfig,
) -> Tuple[PriorContextBank, List[float]]:
    '''
    Fits the prior-context bank on healthy volumes: k-means++ initialization
    followed by minibatch Adam on the L1 self-reconstruction loss.

    Parameters:
    volumes: The healthy training volumes
    m: The FRM filtering threshold
    config: The training hyperparameters (k is capped to the number of slices)

    Returns the bank and the mean loss of every epoch.
    '''
    logger.info('`train_frm` has started')
    if len(volumes) == 0:
        raise ValueError('train_frm needs a non-empty training set')

    data = collect_lowfreq_vectors(volumes, m)
    spec = build_filter(*volumes[0].dims[1:], m)

    k = config.contexts
    if k > data.shape[0]:
        logger.warning(f'{k} contexts requested but only {data.shape[0]} slices; using {data.shape[0]}')
        k = data.shape[0]

    bank = kmeanspp_init(data, k, config.seed, spec=spec)
    state = AdamState.zeros_like(bank)
    loader = make_loader(data, config.batch_size, config.seed)

    history = []
    for epoch in range(config.epochs):
        total = 0.0
        for batch in loader:
            batch = batch.numpy()
            total += frm_loss(batch, bank) * batch.shape[0]
            bank, state = adam_step(bank, frm_grad(batch, bank), state, config)

        history.append(total / data.shape[0])
        logger.info(f'FRM epoch {epoch + 1}/{config.epochs}: loss={history[-1]:.6e}')

    logger.info('`train_frm` has ended')
    return bank, history


def reconstruct_lowfreq(s, bank: PriorContextBank, m: Optional[float] = None) -> LowBlock:
    '''
    Attention reconstruction of the low-frequency block of a slice at m, or
    of an existing decomposition (whose own m is used).
    '''
    if isinstance(s, FreqDecomposition):
        dec = s
    elif m is None:
        raise ValueError('reconstruct_lowfreq needs m for a raw slice')
    else:
        dec = decompose(s, m)
    bank.check_geometry(dec.spec)

    recon, _ = attend(flatten_low(dec.low), bank)
    return unflatten_low(recon, bank.spec)


def render_contexts(bank: PriorContextBank) -> np.ndarray:
    '''
    Spatial view of every context: its low block alone, inverse transformed
    and min-max scaled to [0, 1].
    '''
    if bank.spec is None:
        raise GeometryMismatchError('cannot render contexts of a bank without filter geometry')

    empty = np.zeros((bank.spec.H, bank.spec.W), dtype=np.complex128)
    images = [
        to_unit_range(idft2_real(merge(unflatten_low(context, bank.spec), empty)))
        for context in bank.contexts
    ]
    return np.stack(images)


def save_bank(bank: PriorContextBank, stem) -> None:
    '''
    Writes `<stem>.json` (geometry header) and `<stem>.bin` (k * d
    little-endian f32 values).
    '''
    if bank.spec is None:
        raise GeometryMismatchError('only banks with filter geometry can be saved')

    stem = Path(stem)
    header = {
        'k': bank.k,
        'H': bank.spec.H,
        'W': bank.spec.W,
        'm': bank.spec.m,
        'n_disk': bank.spec.n_disk,
        'd': bank.d,
        'seed': bank.seed,
    }
    stem.with_suffix('.json').write_text(json.dumps(header, indent=2, sort_keys=True) + '\n')
    stem.with_suffix('.bin').write_bytes(bank.contexts.astype('<f4').tobytes())


def load_bank(stem) -> PriorContextBank:
    stem = Path(stem)
    header_path, payload_path = stem.with_suffix('.json'), stem.with_suffix('.bin')
    if not header_path.exists() or not payload_path.exists():
        raise ArtifactError(f'bank artifacts {header_path} / {payload_path} not found')

    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f'bank header {header_path} is not valid JSON: {e}') from e
    missing = {'k', 'H', 'W', 'm', 'n_disk', 'd', 'seed'} - set(header)
    if missing:
        raise ArtifactError(f'bank header {header_path} lacks {sorted(missing)}')

    spec = build_filter(header['H'], header['W'], header['m'])
    if spec.n_disk != header['n_disk'] or spec.d != header['d']:
        raise GeometryMismatchError(f'bank header {header} is inconsistent with {spec}')

    payload = np.frombuffer(payload_path.read_bytes(), dtype='<f4')
    if payload.size != header['k'] * header['d']:
        raise ArtifactError(f'bank payload holds {payload.size} values, expected {header["k"] * header["d"]}')

    return PriorContextBank(payload.reshape(header['k'], header['d']), spec, header['seed'])
