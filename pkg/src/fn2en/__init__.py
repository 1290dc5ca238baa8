"""Expression recognition by regressing a small student network onto frozen face-net features.

A from-scratch reverse-mode autodiff core drives the student, a frozen
teacher supplies the stage-1 regression target, and the analysis module
measures how expression-selective each layer's neurons are.
"""
from .analysis import (ConfusionMatrix, EntropyReport, NeuronEntropyRecord, compare_networks, confusion_matrix,
                       evaluate, kfold_mean, les_count, neuron_entropy, visualize_neuron)
from .checkpoint import load_network, load_teacher, read_checkpoint, save_network, write_checkpoint
from .config import ExperimentConfig
from .data import (AugmentPolicy, Dataset, FoldSplit, LabeledImage, augment, load_dataset, make_folds, read_fnim,
                   synth_toy_dataset, write_dataset, write_fnim)
from .errors import (ConfigError, ContractError, DataError, FN2ENError, FormatError, NumericError, ShapeError,
                     UnknownTapError)
from .estimators import TwoStageExpressionClassifier
from .gradcheck import grad_check
from .losses import DistributionModel, RegressionLossConfig, cross_entropy, log_density, regression_loss
from .nn import ExpNetSpec, Network, TeacherNet, attach_head, build_expnet, build_teacher, build_vgg16_teacher
from .tensor import Tensor, backward, conv2d, deconv2d, maxpool2d, no_grad
from .trainer import TrainSchedule, TrainState, lr_at, sgd_step, train_stage1, train_stage2

__version__ = "0.1.0"
