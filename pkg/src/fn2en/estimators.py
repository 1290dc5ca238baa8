"""scikit-learn facade over the two-stage pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import load_teacher
from .data import AugmentPolicy, Dataset, augment_batch
from .losses import RegressionLossConfig, softmax
from .nn import ExpNetSpec, Network, TeacherNet, attach_head, build_expnet
from .tensor import no_grad
from .trainer import TrainSchedule, predict_logits, train_stage1, train_stage2


def check_images(X, channels=None, size=None):
    """Validate an ``N x C x H x W`` float batch of square images with values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[2] != X.shape[3]:
        raise ValueError(f"expected an N x C x H x W batch of square images, got shape {X.shape}")
    if channels is not None and (X.shape[1], X.shape[2]) != (channels, size):
        raise ValueError(f"estimator was fitted on {channels} x {size} x {size} images, got {X.shape[1:]}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def _as_teacher(teacher):
    if teacher is None or isinstance(teacher, TeacherNet):
        return teacher
    if isinstance(teacher, Network):
        return TeacherNet(teacher)
    return load_teacher(teacher)


class TwoStageExpressionClassifier(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Student classifier trained by teacher-feature regression, then cross-entropy.

    ``teacher`` may be a :class:`TeacherNet`, a :class:`Network` or a
    checkpoint path.  Without a teacher, or with ``from_scratch=True``, the
    first stage is skipped and the trunk starts from random weights.
    ``transform`` returns the flattened trunk features.
    """

    def __init__(self, teacher=None, tap="pool5", conv_channels=(64, 128, 256, 512, 512), fc_dim=256,
                 crop_size=224, dropout=0.5, loss_p=2.0, loss_mode="full-map", stage1_lr=1e-7, stage1_epochs=300,
                 stage1_decay_steps=(100,), stage2_lr=1e-4, stage2_epochs=50, stage2_decay_steps=(20,),
                 lr_decay_factor=0.1, batch_size=64, momentum=0.9, from_scratch=False, random_state=0):
        self.teacher = teacher
        self.tap = tap
        self.conv_channels = conv_channels
        self.fc_dim = fc_dim
        self.crop_size = crop_size
        self.dropout = dropout
        self.loss_p = loss_p
        self.loss_mode = loss_mode
        self.stage1_lr = stage1_lr
        self.stage1_epochs = stage1_epochs
        self.stage1_decay_steps = stage1_decay_steps
        self.stage2_lr = stage2_lr
        self.stage2_epochs = stage2_epochs
        self.stage2_decay_steps = stage2_decay_steps
        self.lr_decay_factor = lr_decay_factor
        self.batch_size = batch_size
        self.momentum = momentum
        self.from_scratch = from_scratch
        self.random_state = random_state

    def _schedule(self, stage):
        lr, epochs, steps = ((self.stage1_lr, self.stage1_epochs, self.stage1_decay_steps) if stage == 1 else
                             (self.stage2_lr, self.stage2_epochs, self.stage2_decay_steps))
        return TrainSchedule(stage=stage, base_lr=lr, lr_decay_steps=steps, lr_decay_factor=self.lr_decay_factor,
                             total_epochs=epochs, batch_size=self.batch_size, momentum=self.momentum,
                             dropout_rate=self.dropout, seed=self.random_state)

    def fit(self, X, y):
        X = check_images(X)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        data = Dataset(X, encoded, np.zeros(len(X), dtype=np.int64), [str(c) for c in self.classes_])
        self.policy_ = AugmentPolicy(canonical_size=X.shape[-1], crop_size=self.crop_size)
        spec = ExpNetSpec(conv_channels=self.conv_channels, fc_dim=self.fc_dim, num_classes=len(self.classes_),
                          input_size=self.crop_size, in_channels=X.shape[1], dropout=self.dropout)
        rng = np.random.default_rng([self.random_state, 1])
        teacher = None if self.from_scratch else _as_teacher(self.teacher)
        self.stage1_history_ = []
        if teacher is None:
            trunk = build_expnet(spec, rng)
        else:
            shape = teacher.tap_shape(self.tap, (spec.in_channels, spec.input_size, spec.input_size))
            trunk = build_expnet(spec, rng, teacher_shape=shape)
            loss = RegressionLossConfig(p=self.loss_p, mode=self.loss_mode)
            self.stage1_history_ = train_stage1(trunk, teacher, data, self._schedule(1), loss, tap=self.tap,
                                                policy=self.policy_).history
        net = attach_head(trunk, spec, np.random.default_rng([self.random_state, 2]))
        self.stage2_history_ = train_stage2(net, data, self._schedule(2), policy=self.policy_).history
        self.network_ = net
        self.input_shape_ = X.shape[1:]
        return self

    def _checked(self, X):
        check_is_fitted(self, "network_")
        return check_images(X, self.input_shape_[0], self.input_shape_[1])

    def decision_function(self, X):
        X = self._checked(X)
        return predict_logits(self.network_, X, self.policy_)

    def predict_proba(self, X):
        return softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        X = self._checked(X)
        with no_grad():
            feats = self.network_.features(augment_batch(X, self.policy_, train=False)).data
        return feats.reshape(len(X), -1)
