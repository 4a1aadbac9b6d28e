"""Twin spatio-temporal 3D CNN with attention blocks, from-scratch autodiff,
Nesterov-SGD training with a plateau rescheduler, and a synthetic
fine-grained action corpus with exact optical flow.
"""

from .tensor import Tensor, Tape, ShapeError, ContractError
from .layers import (
    conv3d,
    maxpool3d,
    batchnorm3d,
    trilinear_upsample,
    relu,
    sigmoid,
    softmax,
    linear,
    bilinear_fusion,
    cross_entropy_logits,
)
from .blocks import ResidualBlock, AttentionBlock, count_parameters_block
from .model import ModelConfig, Network, ConfigError, build, count_parameters
from .optim import (
    NesterovSgd,
    PlateauScheduler,
    CheckpointError,
    checkpoint_save,
    checkpoint_restore,
    take_snapshot,
    restore_snapshot,
)
from .data import (
    SceneSpec,
    Clip,
    AugmentParams,
    DatasetParams,
    generate_clip,
    augment_spatial,
    augment_temporal,
    build_dataset,
    generate_dataset,
    load_dataset,
)
from .config import RunConfig, load_config
from .train import run_training, evaluate

__version__ = "0.1.0"
