"""Crowd counting by density regression with a detachable SR training head."""

from .autograd import (
    ComputationRecord,
    Tensor,
    backward,
    bilinear_resize,
    concat_channels,
    conv2d,
    max_pool2d,
    mse,
    pixel_shuffle,
    pixel_unshuffle,
    record,
    relu,
    zero_grad,
)
from .density import AnnotationSet, downsample_density, generate_density_map, integrate, rescale_points
from .estimator import CrowdCounter
from .evaluation import EvalReport, evaluate, mae, predict_count, predict_density, rmse
from .model import (
    ModelParameters,
    ModelSpec,
    detach_sr_head,
    forward_counting,
    forward_joint,
    forward_sr,
    fuse_stages,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .optim import AdamState, adam_step
from .resample import resize
from .training import TrainConfig, TrainSample, loss_density, loss_sr, total_loss, train

__version__ = "0.1.0"
