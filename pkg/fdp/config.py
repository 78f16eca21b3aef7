from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional, Tuple

import json

from .errors import ConfigError


@dataclass(frozen=True)
class PhantomConfig:
    dims: Tuple[int, int, int] = (32, 64, 64)
    seed: int = 0  # cohort seed: fixes the shared base pattern
    band_limit: int = 4
    texture_amplitude: float = 0.05
    lesion_count: Tuple[int, int] = (1, 3)
    lesion_radius: Tuple[float, float] = (4.0, 10.0)
    lesion_contrast: float = 0.3
    base_level: float = 0.5
    base_amplitude: float = 0.1
    field_amplitude: float = 0.005
    edge_sigma: float = 3.0
    # semi-axes as fractions of (D, H, W); z exceeds the slab on purpose
    brain_axes: Tuple[float, float, float] = (2.5, 0.40, 0.34)

    def __post_init__(self):
        d, h, w = self.dims
        if min(self.dims) < 1 or h < 8 or w < 8 or h % 2 or w % 2:
            raise ConfigError(f'phantom dims must be positive with even H, W >= 8, got {self.dims}')
        if not 1 <= self.lesion_count[0] <= self.lesion_count[1]:
            raise ConfigError(f'bad lesion count range {self.lesion_count}')
        if not 0 < self.lesion_radius[0] <= self.lesion_radius[1] < min(h, w) / 3:
            raise ConfigError(f'lesion radii {self.lesion_radius} must stay below min(H, W)/3')
        if not -1 <= self.lesion_contrast <= 1:
            raise ConfigError(f'lesion contrast {self.lesion_contrast} cannot be clamped to [0, 1]')
        if self.band_limit < 1 or self.texture_amplitude < 0:
            raise ConfigError('band limit must be >= 1 and texture amplitude >= 0')


@dataclass(frozen=True)
class FdpConfig:
    m_frm: float = 0.10
    m_hfsup: float = 0.10
    use_frm: bool = True
    use_hfsup: bool = True
    hfsup_weight: float = 1.0

    def __post_init__(self):
        for name in ('m_frm', 'm_hfsup'):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f'{name} must lie in [0, 1], got {getattr(self, name)}')

    @property
    def alpha(self) -> float:
        return self.hfsup_weight if self.use_hfsup else 0.0


@dataclass(frozen=True)
class FrmTrainConfig:
    contexts: int = 128
    learning_rate: float = 2e-5
    batch_size: int = 32
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f'learning rate must be positive, got {self.learning_rate}')
        if self.batch_size < 1 or self.contexts < 1 or self.epochs < 0:
            raise ConfigError('batch size and contexts must be >= 1, epochs >= 0')


@dataclass(frozen=True)
class EvaluationConfig:
    filter_kernel: int = 5
    erosion_iters: int = 3
    grid_size: int = 100

    def __post_init__(self):
        if self.filter_kernel < 1 or self.filter_kernel % 2 == 0:
            raise ConfigError(f'filter kernel must be odd and >= 1, got {self.filter_kernel}')
        if self.erosion_iters < 0 or self.grid_size < 1:
            raise ConfigError('erosion iterations must be >= 0 and grid size >= 1')


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    fdp: FdpConfig = field(default_factory=FdpConfig)
    frm: FrmTrainConfig = field(default_factory=FrmTrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    rank: int = 8
    normalize_percentile: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'RunConfig':
        return _from_dict(cls, data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n')

    @classmethod
    def load(cls, path) -> 'RunConfig':
        path = Path(path)
        if not path.exists():
            raise ConfigError(f'config file {path} does not exist')
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f'config file {path} is not valid JSON: {e}') from e
        return cls.from_dict(data)

    def override(self, section: Optional[str] = None, **values) -> 'RunConfig':
        '''
        Returns a copy with the given (non-None) values replaced, either on
        the run itself or on one of its sections (flags win over the file).
        '''
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section is None:
            return replace(self, **values)
        return replace(self, **{section: replace(getattr(self, section), **values)})


def _from_dict(cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f'{cls.__name__} expects a mapping, got {type(data).__name__}')

    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f'unknown {cls.__name__} keys: {", ".join(unknown)}')

    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value

    return cls(**kwargs)
