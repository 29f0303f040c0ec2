import numpy as np
import pytest

from icd.data import DatasetSpec, load_dataset
from icd.errors import ConfigurationError, DivergenceError
from icd.losses import DistillConfig
from icd.models import ConvNet, teacher_spec
from icd.tensor import Tensor
from icd.train import RunMetrics, TrainConfig, lr_at, run_summary, sgd_step, train_student, train_teacher

TINY_DATA = DatasetSpec(num_classes=4, image_size=16, train_size=96, test_size=32, seed=1)


def tiny_cfg(**kw):
    base = dict(epochs=3, batch_size=32, lr_decay_epochs=(2,), augment=False,
                distill=DistillConfig(warmup_epochs=1))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny():
    train, test, _ = load_dataset(TINY_DATA)
    teacher = train_teacher(tiny_cfg(), train, test).net
    return train, test, teacher


def test_sgd_closed_form():
    p = Tensor(np.array([1.0, -2.0]))
    g = np.array([0.5, 0.5])
    v = [np.zeros(2)]
    sgd_step([p], [g], v, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(p.data, [0.95, -2.05])
    sgd_step([p], [g], v, lr=0.1, momentum=0.9, weight_decay=0.0)
    # second step moves by lr * (0.9 * g + g) = lr * 1.9 * g; after both, cumulative lr * 2.9 * g
    np.testing.assert_allclose(p.data, [1.0 - 0.1 * 2.9 * 0.5, -2.0 - 0.1 * 2.9 * 0.5])


def test_sgd_weight_decay_is_coupled():
    p = Tensor(np.array([2.0]))
    sgd_step([p], [np.zeros(1)], [np.zeros(1)], lr=0.1, momentum=0.0, weight_decay=0.5)
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


def test_sgd_rejects_nan_gradient():
    with pytest.raises(DivergenceError):
        sgd_step([Tensor([1.0])], [np.array([np.nan])], [np.zeros(1)], 0.1)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.05
    assert lr_at(149, cfg) == 0.05
    assert lr_at(150, cfg) == pytest.approx(0.005)
    assert lr_at(180, cfg) == pytest.approx(0.0005)
    assert lr_at(239, cfg) == pytest.approx(0.00005)
    desk = TrainConfig(schedule_scale=0.1)
    assert desk.total_epochs == 24 and desk.milestones == (15, 18, 21) and desk.warmup_epochs == 3
    assert lr_at(14, desk) == 0.05 and lr_at(15, desk) == pytest.approx(0.005)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_decay_epochs=(180, 150))
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=100)


def test_teacher_learns(tiny):
    train, test, teacher = tiny
    res = train_teacher(tiny_cfg(), train, test)
    assert res.metrics.all_finite()
    assert len(res.metrics.epochs) == 3
    assert res.metrics.epochs[-1].ce < res.metrics.epochs[0].ce


def test_zero_weights_reduce_to_ce_only(tiny):
    train, test, teacher = tiny
    ce = train_student(tiny_cfg(), train, test, teacher, "ce_only")
    for method in ("sdd", "icd"):
        cfg = tiny_cfg(distill=DistillConfig(alpha=0.0, gamma=0.0, warmup_epochs=1))
        other = train_student(cfg, train, test, teacher, method)
        for n in ce.net.param_names():
            np.testing.assert_array_equal(other.net.params[n].data, ce.net.params[n].data)


def test_teacher_is_not_modified(tiny):
    train, test, teacher = tiny
    before = {n: p.data.copy() for n, p in teacher.params.items()}
    train_student(tiny_cfg(), train, test, teacher, "icd")
    for n, p in teacher.params.items():
        np.testing.assert_array_equal(p.data, before[n])


@pytest.mark.parametrize("method", ["kd", "sdd", "icd"])
def test_logged_total_matches_components(tiny, method):
    train, test, teacher = tiny
    res = train_student(tiny_cfg(), train, test, teacher, method)
    assert res.metrics.max_total_residual <= 1e-10
    assert run_summary(res)["all_finite"]


def test_distillation_terms_are_zero_during_first_warmup_epoch(tiny):
    train, test, teacher = tiny
    first = train_student(tiny_cfg(), train, test, teacher, "icd").metrics.epochs[0]
    assert first.warmup == 0.0 and first.icd == 0.0 and first.sdd == 0.0
    assert first.total == first.ce


def test_student_runs_are_deterministic(tiny):
    train, test, teacher = tiny
    a = train_student(tiny_cfg(seed=5), train, test, teacher, "icd").metrics.to_csv()
    b = train_student(tiny_cfg(seed=5), train, test, teacher, "icd").metrics.to_csv()
    assert a == b
    assert a.splitlines()[0] == "epoch,lr,warmup,ce,kd,sdd,icd,total,train_acc,test_acc"


def test_unknown_method_and_mismatched_teacher(tiny):
    train, test, teacher = tiny
    with pytest.raises(ConfigurationError):
        train_student(tiny_cfg(), train, test, teacher, "fitnet")
    other = ConvNet(teacher_spec(5, 16, 4), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        train_student(tiny_cfg(), train, test, other, "icd")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch_and_batch(tiny):
    train, test, teacher = tiny
    with pytest.raises(DivergenceError) as err:
        train_student(tiny_cfg(student_lr=1e6), train, test, teacher, "icd")
    assert err.value.epoch is not None and err.value.batch is not None


def test_empty_metrics():
    m = RunMetrics()
    assert m.final_test_acc == 0.0 and m.all_finite()
