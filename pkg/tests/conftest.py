import time
from types import SimpleNamespace

import numpy as np
import pytest

from fn2en.data import AugmentPolicy, make_folds, synth_toy_dataset
from fn2en.nn import ExpNetSpec, TeacherNet, attach_head, build_expnet, build_teacher
from fn2en.toy import TOY_POLICY, TOY_TAP, toy_spec, toy_stage1_schedule, toy_stage2_schedule, train_toy_teacher
from fn2en.trainer import regression_eval, train_stage1, train_stage2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_data():
    return synth_toy_dataset(seed=0)


class Tiny(SimpleNamespace):
    """A 3-class, 16-pixel setup small enough for per-test training runs."""

    def student(self, seed=0):
        return build_expnet(self.spec, np.random.default_rng(seed), teacher_shape=self.teacher.tap_shape("pool2", (3, 14, 14)))


@pytest.fixture
def tiny():
    data = synth_toy_dataset(num_classes=3, per_class=8, image_size=16, subject_count=6, seed=3)
    net = build_teacher(((4,), (8,)), (), None, (3, 14, 14), np.random.default_rng(7))
    spec = ExpNetSpec(conv_channels=(4, 8), fc_dim=8, num_classes=3, input_size=14, dropout=0.5)
    return Tiny(data=data, teacher=TeacherNet(net), spec=spec, policy=AugmentPolicy(16, 14))


@pytest.fixture(scope="session")
def toy_pipeline(toy_data):
    """Teacher, stage 1, stage 2 and the matched from-scratch baseline on fold 0 of 5."""
    started = time.perf_counter()
    ds = toy_data
    folds = make_folds(ds, 5)
    train, test = folds.train_indices(0), folds.test_indices(0)
    tt = train_toy_teacher(ds, seed=0, indices=train)
    teacher = TeacherNet(tt.finetuned)
    teacher_sum = teacher.checksum()
    spec = toy_spec(ds.num_classes)
    shape = teacher.tap_shape(TOY_TAP, (3, spec.input_size, spec.input_size))

    student = build_expnet(spec, np.random.default_rng([0, 1]), teacher_shape=shape)
    initial_loss = regression_eval(student, teacher, ds, TOY_TAP, policy=TOY_POLICY, indices=train)
    reads = ds.label_reads
    s1 = train_stage1(student, teacher, ds, toy_stage1_schedule(0), tap=TOY_TAP, policy=TOY_POLICY, indices=train)
    stage1_label_reads = ds.label_reads - reads
    final_loss = regression_eval(student, teacher, ds, TOY_TAP, policy=TOY_POLICY, indices=train)

    trunk_sum = student.checksum()
    net = attach_head(student, spec, np.random.default_rng([0, 2]))
    trunk_after_attach = {k: net.params[k].data.tobytes() == student.params[k].data.tobytes() for k in student.params}
    s2 = train_stage2(net, ds, toy_stage2_schedule(0), train_indices=train, eval_indices=test, policy=TOY_POLICY)

    scratch_trunk = build_expnet(spec, np.random.default_rng([0, 1]), teacher_shape=shape)
    scratch = attach_head(scratch_trunk, spec, np.random.default_rng([0, 2]))
    s0 = train_stage2(scratch, ds, toy_stage2_schedule(0), train_indices=train, eval_indices=test, policy=TOY_POLICY)

    return SimpleNamespace(
        data=ds, folds=folds, train=train, test=test, toy_teacher=tt, teacher=teacher, teacher_sum=teacher_sum,
        spec=spec, student=student, stage1=s1, initial_loss=initial_loss, final_loss=final_loss,
        stage1_label_reads=stage1_label_reads, trunk_sum=trunk_sum, trunk_after_attach=trunk_after_attach,
        net=net, stage2=s2, scratch=scratch, scratch_run=s0, seconds=time.perf_counter() - started,
    )
