from __future__ import annotations

import numpy as np
import pytest

from pcn import optim
from pcn.tensor import Parameter


def param(value, decay=True):
    p = Parameter(np.array(value, dtype=np.float64), decay=decay, dtype=np.float64)
    return p


class TestSgd:
    def test_two_steps_by_hand(self):
        p = param([1.0])
        opt = optim.SgdMomentum([p], lr=0.1, momentum=0.9, weight_decay=0.0)
        p.grad[:] = 1.0
        opt.step()
        assert p.data[0] == pytest.approx(0.9)
        opt.step()  # v = 0.9 * 1 + 1 = 1.9
        assert p.data[0] == pytest.approx(0.9 - 0.19)

    def test_weight_decay_only_on_flagged(self):
        w, b = param([2.0]), param([2.0], decay=False)
        opt = optim.SgdMomentum([w, b], lr=0.1, momentum=0.0, weight_decay=0.5)
        opt.step()  # zero gradients
        assert w.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
        assert b.data[0] == 2.0

    def test_tied_parameter_updated_once(self):
        p = param([1.0])
        opt = optim.SgdMomentum([p, p], lr=0.1, momentum=0.0, weight_decay=0.0)
        p.grad[:] = 1.0
        opt.step()
        assert p.data[0] == pytest.approx(0.9)

    def test_step_helper_checks_params(self):
        p, q = param([1.0]), param([1.0])
        opt = optim.SgdMomentum([p])
        with pytest.raises(ValueError):
            optim.sgd_step([q], opt)
        optim.sgd_step([p], opt)

    def test_state_round_trip(self):
        p = param([1.0, 2.0])
        opt = optim.SgdMomentum([p])
        p.grad[:] = [0.5, -0.5]
        opt.step()
        other = optim.SgdMomentum([param([0.0, 0.0])])
        other.load_state(opt.state())
        np.testing.assert_array_equal(other.velocity[0], opt.velocity[0])


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        p = param([1.0, -1.0, 3.0])
        opt = optim.Adam([p], lr=0.01, weight_decay=0.0)
        p.grad[:] = [0.3, -2.0, 1e-3]
        opt.step()
        np.testing.assert_allclose(p.data, [0.99, -0.99, 2.99], rtol=1e-6)

    def test_two_steps_by_hand(self):
        p = param([0.0])
        opt = optim.Adam([p], lr=0.1, beta1=0.9, beta2=0.99, eps=1e-8, weight_decay=0.0)
        p.grad[:] = 1.0
        opt.step()
        p.grad[:] = 3.0
        opt.step()
        m = 0.9 * 0.1 + 0.1 * 3.0
        v = 0.99 * 0.01 + 0.01 * 9.0
        step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.99 ** 2)) + 1e-8)
        step1 = 0.1 * 1.0 / (1.0 + 1e-8)
        assert p.data[0] == pytest.approx(-step1 - step2, rel=1e-12)

    def test_defaults(self):
        opt = optim.Adam([param([0.0])])
        assert (opt.lr, opt.beta1, opt.beta2, opt.weight_decay) == (1e-3, 0.9, 0.99, 5e-4)

    def test_coupled_weight_decay(self):
        w = param([1.0])
        opt = optim.Adam([w], lr=0.1, weight_decay=0.5)
        opt.step()  # gradient is wd * w only, so the first step is -lr
        assert w.data[0] == pytest.approx(0.9)

    def test_scalars_round_trip(self):
        opt = optim.Adam([param([0.0])])
        opt.step()
        other = optim.Adam([param([0.0])])
        other.load_scalars(opt.scalars())
        assert other.t == 1


class TestSchedule:
    def test_cifar_schedule(self):
        s = optim.CIFAR_SCHEDULE
        assert optim.lr_at(s, 0) == 0.01
        assert optim.lr_at(s, 79) == 0.01
        assert optim.lr_at(s, 80) == pytest.approx(1e-3)
        assert optim.lr_at(s, 140) == pytest.approx(1e-4)
        assert optim.lr_at(s, 249) == pytest.approx(1e-5)

    def test_adam_twenty_ten_ten(self):
        s = optim.ADAM_SCHEDULE
        lrs = [optim.lr_at(s, e) for e in range(s.total_epochs)]
        assert lrs.count(1e-3) == 20
        assert sum(1 for v in lrs if v == pytest.approx(1e-4)) == 10
        assert sum(1 for v in lrs if v == pytest.approx(1e-5)) == 10

    def test_scaled(self):
        s = optim.scaled_adam_schedule(8, 4, 3)
        assert s.milestones == (8, 12) and s.total_epochs == 15

    def test_out_of_range_epoch(self):
        with pytest.raises(ValueError):
            optim.lr_at(optim.ADAM_SCHEDULE, 40)

    def test_bad_milestones(self):
        with pytest.raises(ValueError):
            optim.StepSchedule(0.1, (5, 3), 10)
        with pytest.raises(ValueError):
            optim.StepSchedule(0.1, (10,), 10)

    def test_spec_builds_optimizer(self):
        p = [param([0.0])]
        assert isinstance(optim.OptimizerSpec("sgd", optim.CIFAR_SCHEDULE).build(p), optim.SgdMomentum)
        assert isinstance(optim.OptimizerSpec().build(p), optim.Adam)
        with pytest.raises(ValueError):
            optim.OptimizerSpec("rmsprop").build(p)
