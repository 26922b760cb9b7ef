import numpy as np
import pytest

from core.optim import SGD, sgd_step
from core.schedule import Schedule
from core.errors import ConfigurationError
from core.tensor import Parameter


def _param(values, name="w"):
    p = Parameter(np.asarray(values, dtype=np.float64), name)
    return p


def test_plain_sgd_step():
    p = _param([1.0, 2.0])
    p.grad[:] = [0.5, -1.0]
    SGD([p], lr=0.1, momentum=0.0, weight_decay=0.0).step()
    np.testing.assert_allclose(p.data, [0.95, 2.1])
    assert not p.grad.any()


def test_momentum_accumulates():
    p = _param([0.0])
    opt = SGD([p], lr=1.0, momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        p.grad[:] = 1.0
        opt.step()
    # v1 = 1, v2 = 0.9 + 1
    np.testing.assert_allclose(p.data, [-(1.0 + 1.9)])


def test_weight_decay_is_coupled():
    p = _param([2.0])
    SGD([p], lr=0.5, momentum=0.0, weight_decay=0.1).step()
    np.testing.assert_allclose(p.data, [2.0 - 0.5 * 0.2])


def test_sgd_step_reuses_optimizer_velocity():
    p = _param([0.0])
    p.grad[:] = 1.0
    opt = sgd_step([p], lr=1.0, weight_decay=0.0)
    p.grad[:] = 1.0
    sgd_step([p], lr=0.5, optimizer=opt)
    assert opt.lr == 0.5
    np.testing.assert_allclose(p.data, [-1.0 - 0.5 * 1.9])


def test_state_dict_round_trip():
    p = _param([1.0])
    opt = SGD([p])
    p.grad[:] = 3.0
    opt.step()
    other = SGD([_param([1.0])])
    other.load_state_dict(opt.state_dict())
    np.testing.assert_array_equal(other.velocity["w"], opt.velocity["w"])


def test_schedule_steps_at_milestones():
    s = Schedule(epochs=30, milestones=(15, 23)).validate()
    assert s.lr_at(0) == 0.1
    assert s.lr_at(14) == 0.1
    assert s.lr_at(15) == pytest.approx(0.01)
    assert s.lr_at(23) == pytest.approx(0.001)
    assert s.lr_at(29) == pytest.approx(0.001)


@pytest.mark.parametrize("kwargs", [
    {"milestones": (15, 15)},
    {"milestones": (23, 15)},
    {"milestones": (30,)},
    {"milestones": (0,)},
    {"decay": 1.0},
    {"decay": 0.0},
    {"epochs": 0},
    {"batch_size": 0},
    {"base_lr": 0.0},
])
def test_schedule_rejects(kwargs):
    with pytest.raises(ConfigurationError):
        Schedule(**kwargs).validate()


def test_schedule_presets():
    assert Schedule.desk() == Schedule()
    full = Schedule.full_scale().validate()
    assert (full.epochs, full.milestones) == (300, (150, 225))
    tenth = Schedule.scaled(0.1)
    assert (tenth.epochs, tenth.milestones) == (30, (15, 22))
    assert Schedule.scale_milestones((15, 23), 30, 4) == (2, 3)
    assert Schedule.scale_milestones((15, 23), 30, 1) == ()
