import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepsmp import diffcore as dc
from deepsmp.config import bundled_configs, load_config
from deepsmp.optim import Adam, PiecewiseSchedule, adam_step, schedule_at


def test_table8_primal_bsde_schedule():
    s = PiecewiseSchedule((1000, 3000, 8000), (1e-2, 1e-3, 1e-4, 1e-5))
    assert s(0) == 1e-2
    assert s(1000) == 1e-2
    assert s(1001) == 1e-3
    assert s(9999) == 1e-5


def test_run_length_notation():
    s = PiecewiseSchedule.from_segments(1e-3, [(200, 1e-4), (800, 1e-5), (4000, 1e-6)])
    assert s.boundaries == (200, 1000, 5000)
    assert s(500) == 1e-4


def test_single_value_schedule():
    s = PiecewiseSchedule((), (3e-3,))
    assert all(s(k) == 3e-3 for k in (0, 1, 10**6))


def test_schedule_validation():
    with pytest.raises(ValueError):
        PiecewiseSchedule((10,), (1e-2,))
    with pytest.raises(ValueError):
        PiecewiseSchedule((10, 5), (1, 2, 3))
    with pytest.raises(ValueError):
        schedule_at(PiecewiseSchedule(), -1)


def test_bundled_schedules_non_increasing():
    for path in bundled_configs().values():
        cfg = load_config(path)
        for spec in (cfg.primal.bsde_schedule, cfg.primal.control_schedule, cfg.dual.bsde_schedule,
                     cfg.dual.control_schedule, cfg.dual.y_schedule):
            s = spec.build()
            vals = [s(k) for k in range(0, 20001, 50)]
            assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_adam_first_step():
    p = dc.Parameter("x", [[1.0]])
    opt = Adam([p])
    opt.step({p: np.array([[0.5]])}, 1e-2)
    delta = p.value[0, 0] - 1.0
    assert delta == pytest.approx(-1e-2 * 0.5 / (0.5 + 1e-7), rel=1e-12)
    # the quoted -9.99998e-3 is the same value rounded for eps = 1e-6
    assert delta == pytest.approx(-9.99998e-3, abs=2e-8)


def test_adam_zero_gradient_keeps_params():
    p = dc.Parameter("x", [[1.0, 2.0]])
    opt = Adam([p])
    opt.step({p: np.array([[1.0, 1.0]])}, 1e-2)
    before = p.value.copy()
    m_before = opt._m[0].copy()
    opt.step({p: np.zeros((1, 2))}, 1e-2)
    # momentum still moves the parameter, but the first moment decays
    np.testing.assert_allclose(opt._m[0], 0.9 * m_before)
    p2 = dc.Parameter("y", [[1.0]])
    fresh = Adam([p2])
    fresh.step({p2: np.zeros((1, 1))}, 1e-2)
    assert p2.value[0, 0] == 1.0
    assert not np.array_equal(before, np.zeros((1, 2)))


def test_adam_symmetry_and_isolation():
    a, b, c = dc.Parameter("a", [[0.0]]), dc.Parameter("b", [[0.0]]), dc.Parameter("c", [[0.0]])
    opt1, opt2 = Adam([a, b]), Adam([c])
    g = {a: np.array([[0.3]]), b: np.array([[0.3]]), c: np.array([[5.0]])}
    opt1.step(g, 1e-2)
    assert a.value[0, 0] == b.value[0, 0]
    assert c.value[0, 0] == 0.0
    opt2.step(g, 1e-2)
    assert opt1.t == 1 and opt2.t == 1


def test_adam_skips_non_finite():
    p = dc.Parameter("x", [[1.0]])
    opt = Adam([p])
    assert not opt.step({p: np.array([[np.nan]])}, 1e-2)
    assert opt.n_skipped == 1 and opt.t == 0 and p.value[0, 0] == 1.0


def test_adam_functional_wrapper():
    p = dc.Parameter("x", [[1.0]])
    state = Adam([p])
    adam_step([p], [np.array([[2.0]])], state, 1e-3)
    assert p.value[0, 0] == pytest.approx(1.0 - 1e-3, rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-8, 1e8), st.sampled_from([-1.0, 1.0]), st.floats(1e-5, 1e-1))
def test_first_step_bounded_by_lr(scale, sign, lr):
    p = dc.Parameter("x", [[0.0]])
    Adam([p]).step({p: np.array([[sign * scale]])}, lr)
    assert abs(p.value[0, 0]) <= lr * (1 + 1e-12)
