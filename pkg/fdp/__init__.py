from .config import EvaluationConfig, FdpConfig, FrmTrainConfig, PhantomConfig, RunConfig
from .errors import FdpError
from .frm import PriorContextBank, attend, kmeanspp_init, train_frm
from .pipeline import fdp_preprocess, infer_volume, train_pipeline
from .reconstructor import PcaModel, get_reconstructor, train_pca
from .spectral import build_filter, decompose, dft2_centered, idft2_real, merge
from .volume import Volume, normalize_volume, read_volume, write_volume

__version__ = '0.1.0'
