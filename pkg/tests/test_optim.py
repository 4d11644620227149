import math

import numpy as np
import pytest

from pdunet.errors import ShapeError, TrainingFault
from pdunet.optim import Adam, PlateauSchedule, glorot_init
from pdunet.tensor import Tensor


def param(values, dtype=np.float64):
    arr = np.asarray(values, dtype=dtype).reshape(1, 1, 1, -1)
    return Tensor(np.ascontiguousarray(arr))


class TestGlorot:
    def test_bound_for_first_layer_shape(self):
        rng = np.random.default_rng(0)
        w = glorot_init((32, 1, 3, 3), rng)
        bound = math.sqrt(6.0 / (9 + 288))
        assert abs(bound - 0.142134) < 1e-6
        assert np.abs(w.data).max() <= bound

    def test_same_seed_same_tensor(self):
        a = glorot_init((8, 4, 3, 3), np.random.default_rng(7))
        b = glorot_init((8, 4, 3, 3), np.random.default_rng(7))
        assert np.array_equal(a.data, b.data)

    def test_mean_near_zero(self):
        rng = np.random.default_rng(1)
        w = glorot_init((100, 10, 10, 10), rng, dtype=np.float64)
        assert w.data.size == 10 ** 5
        assert abs(w.data.mean()) < 0.01

    def test_rejects_non_conv_shape(self):
        with pytest.raises(ShapeError):
            glorot_init((3, 3), np.random.default_rng(0))


class TestAdam:
    def test_hand_checked_first_step(self):
        p = param([0.0])
        p.grad = np.ones_like(p.data)
        opt = Adam([("p", p)], lr=1e-4)
        opt.step()
        assert abs(opt._m["p"].item() - 0.1) < 1e-15
        assert abs(opt._v["p"].item() - 0.01) < 1e-15
        want = -1e-4 * 1.0 / (1.0 + 1e-8)
        assert abs(p.data.item() - want) < 1e-18

    def test_zero_grad_zero_state_is_fixed_point(self):
        p = param([1.5, -2.0])
        p.grad = np.zeros_like(p.data)
        opt = Adam([("p", p)])
        opt.step()
        np.testing.assert_array_equal(p.data.reshape(-1), [1.5, -2.0])

    def test_unallocated_grad_skipped(self):
        p = param([3.0])
        opt = Adam([("p", p)])
        opt.step()
        assert p.data.item() == 3.0
        assert opt.t == 1

    def test_first_step_opposes_gradient(self):
        rng = np.random.default_rng(2)
        p = param(np.zeros(32))
        g = rng.normal(size=p.data.shape)
        g[np.abs(g) < 1e-3] = 1.0
        p.grad = g
        Adam([("p", p)]).step()
        assert np.all(np.sign(p.data) == -np.sign(g))

    def test_descends_quadratic(self):
        p = param([1.0])
        opt = Adam([("p", p)], lr=1e-3)
        prev = 1.0
        for _ in range(300):
            p.grad = p.data.copy()  # d(x^2/2)/dx = x
            opt.step()
        assert abs(p.data.item()) < prev

    def test_shape_agnostic(self):
        rng = np.random.default_rng(3)
        vals = rng.normal(size=120)
        a = Tensor(np.ascontiguousarray(vals.reshape(2, 3, 4, 5)))
        b = param(vals)
        oa = Adam([("p", a)], lr=1e-3)
        ob = Adam([("p", b)], lr=1e-3)
        for step_seed in range(5):
            g = np.random.default_rng(step_seed).normal(size=120)
            a.grad = np.ascontiguousarray(g.reshape(a.data.shape))
            b.grad = np.ascontiguousarray(g.reshape(b.data.shape))
            oa.step()
            ob.step()
        assert np.array_equal(a.data.reshape(-1), b.data.reshape(-1))

    def test_grad_shape_mismatch(self):
        p = param([1.0, 2.0])
        p.grad = np.zeros((1, 1, 1, 3))
        with pytest.raises(ShapeError):
            Adam([("p", p)]).step()

    def test_state_round_trip(self):
        rng = np.random.default_rng(4)
        def fresh():
            t = param(rng_init.copy())
            return t, Adam([("p", t)], lr=1e-3)

        rng_init = rng.normal(size=8)
        p1, o1 = fresh()
        p2, o2 = fresh()
        grads = [rng.normal(size=p1.data.shape) for _ in range(4)]
        for g in grads[:3]:
            p1.grad = g.copy()
            o1.step()
        state = {k: v.copy() for k, v in o1.state_items()}
        o2.load_state(state, o1.t)
        p2.data[...] = p1.data
        p1.grad = grads[3].copy()
        p2.grad = grads[3].copy()
        o1.step()
        o2.step()
        assert np.array_equal(p1.data, p2.data)


class TestPlateauSchedule:
    def test_twenty_stagnant_epochs_halve_once(self):
        s = PlateauSchedule(lr=1e-4, patience=20)
        s.update(0.5)
        for i in range(19):
            assert s.update(0.5) == 1e-4
        assert s.update(0.5) == 5e-5

    def test_improvement_resets_counter(self):
        s = PlateauSchedule(lr=1e-4)
        s.update(0.5)
        for _ in range(19):
            s.update(0.5)
        assert s.stale == 19
        s.update(0.6)
        assert s.stale == 0
        assert s.lr == 1e-4

    def test_forty_stagnant_epochs_halve_twice(self):
        s = PlateauSchedule(lr=1e-4)
        s.update(0.5)
        for _ in range(40):
            s.update(0.5)
        assert s.lr == 2.5e-5

    def test_equal_metric_is_not_improvement(self):
        s = PlateauSchedule(lr=1e-4, patience=2)
        s.update(0.5)
        s.update(0.5)
        assert s.stale == 1

    def test_nan_metric_faults(self):
        s = PlateauSchedule()
        with pytest.raises(TrainingFault):
            s.update(float("nan"))

    def test_lr_never_increases(self):
        rng = np.random.default_rng(5)
        s = PlateauSchedule(lr=1e-4, patience=3)
        prev = s.lr
        for m in rng.uniform(0, 1, size=200):
            lr = s.update(m)
            assert lr <= prev
            prev = lr
