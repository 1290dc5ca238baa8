"""Desk-scale stand-ins: a small teacher trained on subject identity, then on expressions.

Defaults here are tuned so the whole pipeline (teacher, stage 1, stage 2,
from-scratch baseline) finishes in well under a minute on one CPU core.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AugmentPolicy
from .nn import ExpNetSpec, build_teacher, replace_output_layer
from .trainer import TrainSchedule, train_classifier

TOY_IMAGE_SIZE = 32
TOY_CROP = 28
TOY_POLICY = AugmentPolicy(canonical_size=TOY_IMAGE_SIZE, crop_size=TOY_CROP)
TOY_TEACHER_BLOCKS = ((8, 8), (16, 16), (32, 32))
TOY_TEACHER_FC = (64,)
TOY_TAP = "pool3"


def toy_spec(num_classes=4, **overrides):
    kw = dict(conv_channels=(8, 16, 32), fc_dim=32, num_classes=num_classes, input_size=TOY_CROP)
    kw.update(overrides)
    return ExpNetSpec(**kw)


@dataclass
class ToyTeacher:
    pretrained: object
    finetuned: object
    identity_history: list
    finetune_history: list


def train_toy_teacher(dataset, seed=0, indices=None, identity_epochs=30, finetune_epochs=8, lr=0.01,
                      finetune_lr=0.005, batch_size=16, policy=TOY_POLICY):
    """Pre-train on subject identity, then briefly fine-tune on expression labels.

    Returns both networks so layer statistics can be compared before and
    after fine-tuning.  Pass the training-fold ``indices`` to keep held-out
    subjects away from the teacher.
    """
    if indices is not None:
        dataset = dataset.subset(indices)
    subjects, subject_index = np.unique(dataset.subjects, return_inverse=True)
    rng = np.random.default_rng(seed)
    net = build_teacher(TOY_TEACHER_BLOCKS, TOY_TEACHER_FC, len(subjects), (3, policy.crop_size, policy.crop_size),
                        rng, dropout_rate=0.0, fc_std="fan_in")
    images = dataset.inputs()
    ident = TrainSchedule(stage=2, base_lr=lr, lr_decay_steps=(), total_epochs=identity_epochs,
                          batch_size=batch_size, momentum=0.9, dropout_rate=0.0, seed=seed)
    first = train_classifier(net, images, subject_index, ident, policy=policy)
    pretrained = net.copy()
    tuned = replace_output_layer(net, dataset.num_classes, rng)
    fine = TrainSchedule(stage=2, base_lr=finetune_lr, lr_decay_steps=(), total_epochs=finetune_epochs,
                         batch_size=batch_size, momentum=0.9, dropout_rate=0.0, seed=seed + 1)
    second = train_classifier(tuned, images, dataset.labels, fine, policy=policy)
    return ToyTeacher(pretrained, tuned, first.history, second.history)


def toy_stage1_schedule(seed=0, **overrides):
    # a larger lr than 1e-4 lets the regression kill most student units on this setup,
    # and without the decay the epoch loss starts to oscillate after ~20 epochs
    kw = dict(base_lr=1e-4, lr_decay_steps=(15,), total_epochs=40, batch_size=32, seed=seed)
    kw.update(overrides)
    return TrainSchedule.stage1_defaults(**kw)


def toy_stage2_schedule(seed=0, **overrides):
    kw = dict(base_lr=0.01, lr_decay_steps=(10,), total_epochs=15, batch_size=32, seed=seed)
    kw.update(overrides)
    return TrainSchedule.stage2_defaults(**kw)
