"""SA-UNet family for vessel-style binary segmentation, from scratch on numpy."""

from .gradcheck import GradCheckReport, grad_check, grad_check_params
from .layers import BatchNorm2d, DropBlockConfig, SpatialAttention, dropblock_forward, dropblock_gamma
from .metrics import ConfusionCounts, basic_metrics, confusion, mcc, roc_auc, segmentation_report
from .models import (
    REFERENCE_PARAM_COUNTS,
    VARIANT_LADDER,
    ArchitectureSpec,
    Network,
    build_variant,
    count_params,
    load_checkpoint,
    predict_binary,
    save_checkpoint,
)
from .optim import Adam, TrainConfig, lr_for_epoch, run_training, train_epoch
from .tensor import (
    Tensor,
    bce_loss,
    channel_reduce,
    concat_channels,
    conv2d,
    conv2d_transpose,
    maxpool2d,
    no_grad,
    relu,
    sigmoid,
)

__version__ = "0.1.0"
