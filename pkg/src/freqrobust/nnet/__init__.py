"""From-scratch bottleneck ResNet engine in numpy."""
from .layers import (
    BatchNorm,
    Conv2D,
    GlobalAvgPool,
    Linear,
    MaxPool2x2,
    ReLU,
    Sequential,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    softmax_cross_entropy,
)
from .model import BottleneckBlock, Network, build_model
from .optim import SGD, lr_at_epoch, sgd_step
from .train import (
    Checkpoint,
    EpochMetrics,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    evaluate_model,
    predict,
    read_metrics,
    train,
    write_metrics,
)
