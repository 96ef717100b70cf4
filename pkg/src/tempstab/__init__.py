"""Single-frame temporal-stability regularization for image-to-image CNNs."""

from .harness import ExperimentConfig, alpha_grid, evaluate, finetune, pretrain, run_sweep
from .losses import REG_KINDS, LossConfig, evaluate_total
from .metrics import TemporalFilter, psnr, smoothness
from .nn import Network, NetworkConfig, forward, init_network, load_checkpoint, save_checkpoint
from .procgen import SceneSpec, generate_test_sequences, generate_training_set
from .tensorcore import TransformParams, TransformRanges, build_matrix, warp

__version__ = "0.1.0"
