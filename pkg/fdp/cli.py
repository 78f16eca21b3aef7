from itertools import product
from pathlib import Path
from typing import Optional

import json
import logging
import sys

import fire
import numpy as np
import pandas as pd
from fire.core import FireExit

from .analysis import (
    SWEEP_GRID,
    cohort_consistency,
    freq_sweep_dice,
    intrinsic_dim_mle,
    lowfreq_dispersion,
    pca_variance,
)
from .config import RunConfig
from .errors import ArtifactError, FdpError
from .experiment import TrainedArtifacts, prepare_volumes, run_evaluation, run_experiment, train_artifacts
from .frm import collect_lowfreq_vectors, load_bank, render_contexts
from .phantom import gen_dataset, load_dataset
from .pipeline import detect_volume, render_panel
from .utils import resolve_threads
from .volume import Volume, export_slice_pgm, write_volume

logger = logging.getLogger('fdp')

LOG_FILE = 'fdp.logs'

M_GRID = (0.01, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30)
CONTEXT_GRID = (16, 32, 64, 128, 256)
ANALYSIS_M = 0.2
ANALYSES = ('freq-sweep', 'dispersion', 'pca', 'intrinsic-dim')


def _setup(verbose: bool, threads: Optional[int]) -> int:
    logging.basicConfig(
        filename=LOG_FILE,
        filemode='a',
        format='%(asctime)s [%(levelname)s] %(message)s',
        datefmt='%H:%M:%S',
        level=logging.DEBUG if verbose else logging.INFO,
        force=True,
    )
    return resolve_threads(threads)


def _run_config(config: Optional[str]) -> RunConfig:
    return RunConfig.load(config) if config else RunConfig()


def _dump_json(data, path: Path) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + '\n')


def phantom(
    out: str,
    seed: Optional[int] = None,
    train: int = 40,
    val: int = 8,
    test: int = 8,
    config: Optional[str] = None,
    threads: Optional[int] = None,
    verbose: bool = False,
):
    '''
    Generates a phantom dataset: healthy training volumes and lesioned
    validation / test volumes with a JSON manifest.

    Parameters:
    out: The output directory
    seed: The cohort seed (defaults to the configured phantom seed)
    train, val, test: The split sizes
    config: An optional run configuration (JSON)
    threads: The worker count (defaults to $FDP_THREADS, then the CPU count)
    '''
    threads = _setup(verbose, threads)
    logger.info('`phantom` has started')
    run = _run_config(config)
    cohort_seed = run.phantom.seed if seed is None else int(seed)

    path = gen_dataset(run.phantom, cohort_seed, train, val, test, str(out), threads)
    logger.info('`phantom` has ended')
    return str(path)


def train(
    data: str,
    out: str = 'artifacts',
    config: Optional[str] = None,
    contexts: Optional[int] = None,
    epochs: Optional[int] = None,
    learning_rate: Optional[float] = None,
    batch_size: Optional[int] = None,
    rank: Optional[int] = None,
    m_frm: Optional[float] = None,
    m_hfsup: Optional[float] = None,
    use_frm: Optional[bool] = None,
    use_hfsup: Optional[bool] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    verbose: bool = False,
):
    '''
    Two-stage training on the healthy split: the FRM prior-context bank,
    then the reconstructor. Writes bank.json/.bin, model.json/.bin,
    loss.csv and the resolved config.json.

    Parameters:
    data: The dataset directory (with manifest.json)
    out: The artifact directory
    config: An optional run configuration (JSON); flags override it
    contexts: The number of prior contexts
    seed: The FRM seed
    '''
    threads = _setup(verbose, threads)
    logger.info('`train` has started')
    run = _run_config(config)
    run = run.override('frm', contexts=contexts, epochs=epochs, learning_rate=learning_rate,
                       batch_size=batch_size, seed=seed)
    run = run.override('fdp', m_frm=m_frm, m_hfsup=m_hfsup, use_frm=use_frm, use_hfsup=use_hfsup)
    run = run.override(rank=rank)

    dataset = load_dataset(str(data))
    artifacts = train_artifacts(dataset['train'], run, threads)
    artifacts.save(str(out))
    logger.info('`train` has ended')
    return str(out)


def detect(
    data: str,
    artifacts: str = 'artifacts',
    out: str = 'detections',
    split: str = 'test',
    threads: Optional[int] = None,
    verbose: bool = False,
):
    '''
    Writes an anomaly map (FVOL) per volume of a split and one PGM panel
    per slice: Origin | I_hat | Recon | Residual.
    '''
    threads = _setup(verbose, threads)
    logger.info('`detect` has started')
    trained = TrainedArtifacts.load(str(artifacts))
    dataset = load_dataset(str(data))
    if split not in dataset or not dataset[split]:
        raise ArtifactError(f'dataset has no {split!r} split')

    out = Path(str(out))
    panels = out / 'panels'
    panels.mkdir(parents=True, exist_ok=True)

    for i, v in enumerate(prepare_volumes(dataset[split], trained.config)):
        detection = detect_volume(v, trained.bank, trained.model, trained.config.fdp, threads)
        write_volume(Volume(detection.amap, mask=v.mask), out / f'{split}_{i:03d}_amap.fvol')
        for z in range(len(v)):
            panel = render_panel(v.voxels[z], detection.i_hat[z], detection.recon[z], detection.amap[z])
            export_slice_pgm(panel, panels / f'{split}_{i:03d}_z{z:03d}.pgm')

    logger.info('`detect` has ended')
    return str(out)


def evaluate(
    data: str,
    artifacts: str = 'artifacts',
    out: str = 'evaluation',
    threads: Optional[int] = None,
    verbose: bool = False,
):
    '''
    Recomputes the anomaly maps of the validation and test splits, then
    filter -> erode -> threshold search (val) -> metrics (test). Writes
    metrics.csv (one row per test volume) and metrics.json.
    '''
    threads = _setup(verbose, threads)
    logger.info('`evaluate` has started')
    trained = TrainedArtifacts.load(str(artifacts))
    dataset = load_dataset(str(data))

    report, search = run_evaluation(dataset['val'], dataset['test'], trained, threads=threads)

    out = Path(str(out))
    out.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(out / 'metrics.csv', index=False)
    detail = report.to_json()
    detail['search'] = {'grid': search.grid.tolist(), 'dice': search.dice.tolist()}
    _dump_json(detail, out / 'metrics.json')

    logger.info('`evaluate` has ended')
    return f'DICE={report.dice:.4f} AUPRC={report.auprc:.4f} AUROC={report.auroc:.4f}'


def _ablation_row(dataset, run: RunConfig, repeats: int, threads: int) -> dict:
    reports = [
        run_experiment(dataset, run.override('frm', seed=run.frm.seed + r), threads)
        for r in range(repeats)
    ]
    return {
        'dice': float(np.mean([r.dice for r in reports])),
        'auprc': float(np.mean([r.auprc for r in reports])),
        'auroc': float(np.mean([r.auroc for r in reports])),
        'threshold': float(np.mean([r.threshold for r in reports])),
        'repeats': repeats,
    }


def ablate(
    data: str,
    out: str = 'ablation',
    repeats: int = 1,
    config: Optional[str] = None,
    threads: Optional[int] = None,
    verbose: bool = False,
):
    '''
    Runs the ablation sweeps, one CSV each: FRM x HFSup on/off, m_FRM,
    m_HFSup and the number of prior contexts.

    Parameters:
    data: The dataset directory
    out: The output directory
    repeats: How many FRM seeds every cell is averaged over
    '''
    threads = _setup(verbose, threads)
    logger.info('`ablate` has started')
    if repeats < 1:
        raise ValueError(f'repeats must be >= 1, got {repeats}')

    base = _run_config(config)
    dataset = load_dataset(str(data))
    out = Path(str(out))
    out.mkdir(parents=True, exist_ok=True)

    sweeps = {
        'frm_hfsup': [
            ({'use_frm': f, 'use_hfsup': h}, base.override('fdp', use_frm=f, use_hfsup=h))
            for f, h in product((False, True), (False, True))
        ],
        'm_frm': [({'m_frm': m}, base.override('fdp', m_frm=m)) for m in M_GRID],
        'm_hfsup': [({'m_hfsup': m}, base.override('fdp', m_hfsup=m)) for m in M_GRID],
        'contexts': [({'contexts': k}, base.override('frm', contexts=k)) for k in CONTEXT_GRID],
    }

    for name, cells in sweeps.items():
        rows = []
        for axis, run in cells:
            logger.info(f'ablation {name}: {axis}')
            rows.append({**axis, **_ablation_row(dataset, run, repeats, threads)})
        pd.DataFrame(rows).to_csv(out / f'ablation_{name}.csv', index=False)

    logger.info('`ablate` has ended')
    return str(out)


def analyze(
    kind: str,
    data: str,
    out: str = 'analysis',
    k_neighbors: int = 10,
    threads: Optional[int] = None,
    verbose: bool = False,
):
    '''
    Frequency-domain analyses of a dataset.

    Parameters:
    kind: freq-sweep | dispersion | pca | intrinsic-dim
    data: The dataset directory
    out: The output directory
    k_neighbors: k of the intrinsic-dimension estimator
    '''
    threads = _setup(verbose, threads)
    logger.info(f'`analyze {kind}` has started')
    if kind not in ANALYSES:
        print(f'usage: fdp analyze {{{"|".join(ANALYSES)}}} DATA [--out OUT]', file=sys.stderr)
        raise FireExit(2, [])

    dataset = load_dataset(str(data))
    lesioned = dataset['val'] + dataset['test']
    out = Path(str(out))
    out.mkdir(parents=True, exist_ok=True)

    if kind == 'freq-sweep':
        curve = freq_sweep_dice(lesioned, SWEEP_GRID, threads=threads)
        curve.to_frame().to_csv(out / 'freq_sweep.csv', index=False)

    elif kind == 'dispersion':
        healthy_slices = [s for sample in dataset['train'] for s in sample.volume.slices()]
        lesioned_slices = [s for sample in lesioned for s in sample.volume.slices()]
        stats = lowfreq_dispersion(healthy_slices, lesioned_slices)
        stats.to_frame().to_csv(out / 'dispersion.csv', index=False)
        _dump_json(cohort_consistency(healthy_slices, lesioned_slices), out / 'consistency.json')

    else:
        vectors = collect_lowfreq_vectors([s.volume for s in dataset['train']], ANALYSIS_M)
        if kind == 'pca':
            ratios = pca_variance(vectors)
            table = pd.DataFrame({'component': np.arange(1, ratios.size + 1), 'ratio': ratios})
            table.to_csv(out / 'pca_variance.csv', index=False)
        else:
            result = intrinsic_dim_mle(vectors, k_neighbors)
            _dump_json(result.to_json(), out / 'intrinsic_dim.json')
            pd.DataFrame({'estimate': result.estimates}).to_csv(out / 'intrinsic_dim.csv', index=False)

    logger.info(f'`analyze {kind}` has ended')
    return str(out)


def frm_inspect(
    artifacts: str = 'artifacts',
    out: str = 'contexts',
    verbose: bool = False,
):
    '''
    Renders every prior context of a trained bank to the spatial domain and
    saves it as a PGM.
    '''
    _setup(verbose, 1)
    bank = load_bank(Path(str(artifacts)) / 'bank')

    out = Path(str(out))
    out.mkdir(parents=True, exist_ok=True)
    for i, image in enumerate(render_contexts(bank)):
        export_slice_pgm(image, out / f'context_{i:03d}.pgm')
    return f'{bank.k} contexts written to {out}'


COMMANDS = {
    'phantom': phantom,
    'train': train,
    'detect': detect,
    'evaluate': evaluate,
    'ablate': ablate,
    'analyze': analyze,
    'frm-inspect': frm_inspect,
}


def main(argv=None) -> int:
    '''
    Runs one subcommand. Exit codes: 0 success, 1 runtime failure, 2 usage
    error.
    '''
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        fire.Fire(COMMANDS, command=argv, name='fdp')
    except FireExit as e:
        return e.code
    except (FdpError, OSError, ValueError) as e:
        logger.error(f'{type(e).__name__}: {e}')
        print(f'error: {type(e).__name__}: {e}', file=sys.stderr)
        return 1
    return 0
