from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import logging

import numpy as np
import pandas as pd

from .config import EvaluationConfig, RunConfig
from .evaluation import MetricsReport, ThresholdSearchResult, evaluate, greedy_threshold, postprocess
from .frm import PriorContextBank, load_bank, save_bank, train_frm
from .phantom import PhantomSample
from .pipeline import detect_volume, train_pipeline
from .reconstructor import Reconstructor, load_reconstructor, save_reconstructor
from .volume import Volume, normalize_volume

logger = logging.getLogger(__name__)

CONFIG_NAME = 'config.json'
BANK_STEM = 'bank'
MODEL_STEM = 'model'
LOSS_NAME = 'loss.csv'


@dataclass
class TrainedArtifacts:
    config: RunConfig
    model: Reconstructor
    bank: Optional[PriorContextBank] = None
    history: List[float] = field(default_factory=list)

    def save(self, out) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)

        self.config.save(out / CONFIG_NAME)
        if self.bank is not None:
            save_bank(self.bank, out / BANK_STEM)
        save_reconstructor(self.model, out / MODEL_STEM)

        losses = pd.DataFrame({'epoch': np.arange(1, len(self.history) + 1), 'loss': self.history})
        losses.to_csv(out / LOSS_NAME, index=False)

    @classmethod
    def load(cls, directory) -> 'TrainedArtifacts':
        directory = Path(directory)
        config = RunConfig.load(directory / CONFIG_NAME)
        bank = load_bank(directory / BANK_STEM) if config.fdp.use_frm else None
        model = load_reconstructor(directory / MODEL_STEM)
        return cls(config, model, bank)


def prepare_volumes(samples: Sequence[PhantomSample], config: RunConfig) -> List[Volume]:
    volumes = [s.volume for s in samples]
    if config.normalize_percentile is not None:
        volumes = [normalize_volume(v, config.normalize_percentile) for v in volumes]
    return volumes


def train_artifacts(
    train: Sequence[PhantomSample],
    config: RunConfig,
    threads: Optional[int] = 1,
) -> TrainedArtifacts:
    '''
    Two-stage training: the prior-context bank first (when FRM is on), then
    the reconstructor on the FDP-processed healthy slices.
    '''
    logger.info('`train_artifacts` has started')
    volumes = prepare_volumes(train, config)

    bank, history = None, []
    if config.fdp.use_frm:
        bank, history = train_frm(volumes, config.fdp.m_frm, config.frm)

    model = train_pipeline(volumes, config.fdp, bank, config.rank, threads)
    logger.info('`train_artifacts` has ended')
    return TrainedArtifacts(config, model, bank, history)


def anomaly_maps(
    samples: Sequence[PhantomSample],
    artifacts: TrainedArtifacts,
    threads: Optional[int] = 1,
) -> List[np.ndarray]:
    volumes = prepare_volumes(samples, artifacts.config)
    return [
        detect_volume(v, artifacts.bank, artifacts.model, artifacts.config.fdp, threads).amap
        for v in volumes
    ]


def run_evaluation(
    val: Sequence[PhantomSample],
    test: Sequence[PhantomSample],
    artifacts: TrainedArtifacts,
    config: Optional[EvaluationConfig] = None,
    threads: Optional[int] = 1,
) -> Tuple[MetricsReport, ThresholdSearchResult]:
    '''
    Filter -> erode -> threshold search on the validation split -> metrics
    on the test split.
    '''
    config = config or artifacts.config.evaluation

    val_maps, val_areas = postprocess(anomaly_maps(val, artifacts, threads), [s.brain_mask for s in val], config)
    search = greedy_threshold(
        val_maps, [s.lesion_mask for s in val], val_areas, config.grid_size, threads=threads)

    test_maps, test_areas = postprocess(
        anomaly_maps(test, artifacts, threads), [s.brain_mask for s in test], config)
    report = evaluate(test_maps, [s.lesion_mask for s in test], test_areas, search.threshold)
    return report, search


def run_experiment(
    dataset: Dict[str, List[PhantomSample]],
    config: RunConfig,
    threads: Optional[int] = 1,
) -> MetricsReport:
    artifacts = train_artifacts(dataset['train'], config, threads)
    report, _ = run_evaluation(dataset['val'], dataset['test'], artifacts, threads=threads)
    logger.info(f'experiment: DICE={report.dice:.4f} AUPRC={report.auprc:.4f} AUROC={report.auroc:.4f}')
    return report
