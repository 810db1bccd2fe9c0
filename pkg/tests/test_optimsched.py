import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from echoseg.dataset import ValidationError
from echoseg.optimsched import (
    ScheduleConfig,
    cycle_boundaries,
    cycle_starts,
    lr_at,
    schedule_state,
    sgd_step,
)

CFG = ScheduleConfig()


def test_anchor_points():
    assert lr_at(0, CFG) == 5e-3
    assert lr_at(50, CFG) == 5e-3
    assert lr_at(25, CFG) == 2.55e-3
    assert abs(lr_at(49.999, CFG) - 1e-4) < 1e-6


def test_three_cycles_in_200_epochs():
    # geometric series 50, 50 + 65.5, 115.5 + 85.805
    expected = [50.0, 50.0 + 50 * 1.31, 50.0 + 50 * 1.31 + 50 * 1.31**2]
    np.testing.assert_allclose(cycle_boundaries(CFG, 3), [50.0, 115.5, 201.305], atol=1e-9)
    np.testing.assert_allclose(cycle_boundaries(CFG, 3), expected, atol=1e-9)
    assert cycle_starts(CFG) == pytest.approx([0.0, 50.0, 115.5])


def test_restart_invariant():
    for start in cycle_starts(CFG):
        assert lr_at(start, CFG) == CFG.lr_max


def test_state_bookkeeping():
    s = schedule_state(120.0, CFG)
    assert s.cycle_index == 2
    assert s.cycle_length == pytest.approx(85.805)
    assert s.epoch_in_cycle == pytest.approx(4.5)


def test_out_of_range():
    with pytest.raises(ValueError):
        lr_at(200, CFG)
    with pytest.raises(ValidationError):
        ScheduleConfig(lr_min=1e-2, lr_max=1e-3)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 199.999))
def test_bounds(t):
    assert CFG.lr_min - 1e-15 <= lr_at(t, CFG) <= CFG.lr_max + 1e-15


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 199.99), st.floats(1e-4, 1.0))
def test_strictly_decreasing_within_cycle(t, dt):
    s = schedule_state(t, CFG)
    t2 = t + dt
    if t2 - t > 0 and s.epoch_in_cycle + dt < s.cycle_length and t2 < CFG.total_epochs:
        assert lr_at(t2, CFG) < lr_at(t, CFG)


def test_continuity_within_cycle():
    for t in np.linspace(0.5, 49.5, 50):
        assert abs(lr_at(t + 1e-7, CFG) - lr_at(t, CFG)) < 1e-9


def test_sgd_without_momentum():
    p = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([0.5, -1.0])}
    v = {"w": np.zeros(2)}
    new_p, _ = sgd_step(p, g, v, lr=0.1, momentum=0.0)
    np.testing.assert_allclose(new_p["w"], p["w"] - 0.1 * g["w"])


def test_sgd_coasts_on_velocity():
    p = {"w": np.array([0.0])}
    v = {"w": np.array([1.0])}
    zero = {"w": np.array([0.0])}
    p1, v1 = sgd_step(p, zero, v, lr=0.1, momentum=0.9)
    p2, v2 = sgd_step(p1, zero, v1, lr=0.1, momentum=0.9)
    # v1 = 0.9, v2 = 0.81 -> p2 = -0.1 * (0.9 + 0.81)
    assert p1["w"][0] == pytest.approx(-0.09)
    assert p2["w"][0] == pytest.approx(-0.171)


def test_sgd_two_steps_constant_grad():
    g = torch.tensor([2.0, -3.0], dtype=torch.float64)
    p = {"w": torch.zeros(2, dtype=torch.float64)}
    v = {"w": torch.zeros(2, dtype=torch.float64)}
    p, v = sgd_step(p, {"w": g}, v, 0.01, 0.9)
    p, v = sgd_step(p, {"w": g}, v, 0.01, 0.9)
    torch.testing.assert_close(p["w"], -0.01 * (g + 1.9 * g))


def test_sgd_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="bias"):
        sgd_step({"bias": np.zeros(1)}, {"bias": np.array([math.nan])}, {"bias": np.zeros(1)}, 0.1)
