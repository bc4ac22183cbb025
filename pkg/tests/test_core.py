"""Kernel: resistance, ideal direction, effective work, state update, gate"""

import itertools
import math

import numpy as np
import pytest

from epm_core import (
    ActionVector,
    AxisId,
    GateConfig,
    GateVerdict,
    PsychState,
    TrajectoryState,
    apply_window,
    check_gate,
    effective_work,
    ideal_direction,
    mean_alignment,
    resistance,
)
from epm_errors import ConfigError, KernelError, ZeroResistance
from epm_rubric import MdepWindowRating, assemble_action_vector, penalty_intensity


def test_resistance_is_euclidean_norm():
    assert resistance(PsychState(-3.0, -4.0, 0.0)) == pytest.approx(5.0)
    assert resistance(PsychState(0.0, 0.0, 0.0)) == 0.0


def test_ideal_direction_points_to_equilibrium():
    direction = ideal_direction(PsychState(-3.0, 0.0, -4.0))
    np.testing.assert_allclose(direction, [0.6, 0.0, 0.8])
    assert np.all(direction >= 0)
    assert np.linalg.norm(direction) == pytest.approx(1.0)


def test_ideal_direction_at_equilibrium_raises():
    with pytest.raises(ZeroResistance):
        ideal_direction(PsychState(0.0, 0.0, 0.0))


def test_effective_work_projection():
    aligned = effective_work(ActionVector(3, 0, 0), PsychState(-4, 0, 0))
    assert aligned.delta_e == pytest.approx(3.0)
    assert aligned.cos_theta == pytest.approx(1.0)
    assert aligned.magnitude == pytest.approx(3.0)

    orthogonal = effective_work(ActionVector(3, 0, 0), PsychState(0, -4, 0))
    assert orthogonal.delta_e == pytest.approx(0.0)
    assert orthogonal.cos_theta == pytest.approx(0.0)


def test_effective_work_all_prog2_on_deep_deficit():
    work = effective_work(ActionVector(3, 3, 3), PsychState(-21, -27, -27))
    assert work.delta_e == pytest.approx(225.0 / math.sqrt(1899.0))
    assert work.delta_e == pytest.approx(5.163, abs=1e-3)


def test_zero_action_has_undefined_cosine():
    work = effective_work(ActionVector.zero(), PsychState(-1, -1, -1))
    assert work.delta_e == 0.0
    assert work.cos_theta is None
    assert not work.cos_defined


def test_state_components_must_be_non_positive():
    with pytest.raises(KernelError):
        PsychState(0.5, -1.0, -1.0)
    with pytest.raises(KernelError):
        PsychState(float("nan"), -1.0, -1.0)


def test_action_components_are_bounded():
    ActionVector(-5, 3, 0)
    with pytest.raises(KernelError):
        ActionVector(4, 0, 0)
    with pytest.raises(KernelError):
        ActionVector(0, -6, 0)


def test_start_at_equilibrium_raises():
    with pytest.raises(ZeroResistance):
        TrajectoryState.start(PsychState(0, 0, 0))


def test_apply_window_clamps_at_equilibrium():
    traj = TrajectoryState.start(PsychState(-1, -2, 0))
    traj = apply_window(traj, ActionVector(3, 0, 1))
    assert traj.current.as_tuple() == (0.0, -2.0, 0.0)
    # work is measured against the pre-update state with the unclamped action
    assert traj.e_total == pytest.approx(3.0 / math.sqrt(5.0))
    assert traj.path_length == pytest.approx(math.sqrt(10.0))
    assert traj.window_count == 1


def test_window_at_equilibrium_does_no_work():
    traj = TrajectoryState.start(PsychState(-3, 0, 0))
    traj = apply_window(traj, ActionVector(3, 0, 0))
    assert resistance(traj.current) == 0.0
    traj = apply_window(traj, ActionVector(2, 0, 0))
    last = traj.windows[-1].work
    assert last.delta_e == 0.0
    assert last.cos_theta is None
    assert last.magnitude == pytest.approx(2.0)
    assert traj.e_total == pytest.approx(3.0)
    # the undefined window is left out of the mean
    assert mean_alignment(traj) == pytest.approx(1.0)


def test_apply_window_is_pure():
    start = TrajectoryState.start(PsychState(-4, 0, 0))
    after = apply_window(start, ActionVector(1, 0, 0))
    assert start.window_count == 0
    assert start.current.as_tuple() == (-4.0, 0.0, 0.0)
    assert after.points() == (start.initial, after.current)


def test_mean_alignment_with_no_defined_windows_is_zero():
    traj = TrajectoryState.start(PsychState(-2, -2, -2))
    traj = apply_window(traj, ActionVector.zero())
    assert mean_alignment(traj) == 0.0


def test_gate_success_by_resolution():
    traj = TrajectoryState.start(PsychState(-4, 0, 0))
    traj = apply_window(traj, ActionVector(3, 0, 0))
    assert check_gate(traj, GateConfig(), mean_alignment(traj)) is GateVerdict.CONTINUE
    traj = apply_window(traj, ActionVector(3, 0, 0))
    assert check_gate(traj, GateConfig(), mean_alignment(traj)) is GateVerdict.SUCCESS


def test_gate_needs_energy_even_when_aligned():
    traj = TrajectoryState.start(PsychState(-10, 0, 0))
    traj = apply_window(traj, ActionVector(1, 0, 0))
    assert mean_alignment(traj) == pytest.approx(1.0)
    assert check_gate(traj, GateConfig(), 1.0) is GateVerdict.CONTINUE


def test_gate_failure_on_deterioration():
    traj = TrajectoryState.start(PsychState(-4, 0, 0))
    traj = apply_window(traj, ActionVector(-1, 0, 0))
    assert check_gate(traj, GateConfig(), mean_alignment(traj)) is GateVerdict.FAILURE


def test_gate_success_wins_over_failure():
    cfg = GateConfig(eps_energy=0.5, tau_align=0.4)
    traj = TrajectoryState.start(PsychState(-4, 0, 0))
    traj = apply_window(traj, ActionVector(3, 0, 0))
    traj = apply_window(traj, ActionVector(0, -5, 0))
    assert resistance(traj.current) >= 1.25 * traj.r0
    assert traj.e_total > cfg.energy_threshold(traj.r0)
    assert mean_alignment(traj) == pytest.approx(0.5)
    assert check_gate(traj, cfg, mean_alignment(traj)) is GateVerdict.SUCCESS


def test_absolute_energy_threshold():
    cfg = GateConfig(eps_energy=2.0, energy_relative=False)
    assert cfg.energy_threshold(40.0) == 2.0
    assert GateConfig().energy_threshold(40.0) == 40.0


@pytest.mark.parametrize("kwargs", [
    {"eps_dist": 0.0}, {"eps_dist": 1.0}, {"tau_align": 0.0}, {"tau_align": 1.5},
    {"eps_energy": -1.0}, {"fail_deterioration": 0.0},
])
def test_gate_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        GateConfig(**kwargs)


def test_axis_parse_accepts_names_and_motivational():
    assert AxisId.parse("c") is AxisId.COGNITIVE
    assert AxisId.parse("Affective") is AxisId.AFFECTIVE
    assert AxisId.parse("motivational") is AxisId.PROACTIVE
    with pytest.raises(ValueError):
        AxisId.parse("X")


# =============================================================================
# PROPERTIES
# =============================================================================

CASES = 10_000


def _random_states(rng, n, low=-30.0, high=-0.5):
    return rng.uniform(low, high, size=(n, 3))


def test_effective_work_scales_with_the_action():
    rng = np.random.default_rng(20260101)
    states = _random_states(rng, CASES)
    actions = rng.uniform(-5.0, 3.0, size=(CASES, 3))
    scales = rng.uniform(0.01, 10.0, size=CASES)
    for state, v, lam in zip(states, actions, scales):
        base = effective_work(v, state)
        scaled = effective_work(lam * v, state)
        assert scaled.delta_e == pytest.approx(lam * base.delta_e, rel=1e-12, abs=1e-12)
        assert scaled.cos_theta == pytest.approx(base.cos_theta, abs=1e-12)


def test_work_never_exceeds_the_action_magnitude():
    rng = np.random.default_rng(7)
    states = _random_states(rng, CASES)
    actions = rng.uniform(-5.0, 3.0, size=(CASES, 3))
    for state, v in zip(states, actions):
        work = effective_work(v, state)
        assert abs(work.delta_e) <= work.magnitude + 1e-12
        assert -1.0 <= work.cos_theta <= 1.0


def test_aligned_action_lowers_resistance_by_its_magnitude():
    rng = np.random.default_rng(11)
    states = _random_states(rng, CASES)
    fractions = rng.uniform(0.01, 0.99, size=CASES)
    for state, frac in zip(states, fractions):
        p0 = PsychState.from_array(state)
        r0 = resistance(p0)
        # staying short of equilibrium keeps the clamp out of play
        lam = frac * min(3.0, r0)
        v = ActionVector(*(lam * ideal_direction(p0)))
        traj = apply_window(TrajectoryState.start(p0), v)
        assert resistance(traj.current) == pytest.approx(r0 - lam, abs=1e-9)
        assert traj.e_total == pytest.approx(lam, abs=1e-9)
        assert traj.windows[0].work.cos_theta == pytest.approx(1.0, abs=1e-12)


def test_gate_never_passes_without_enough_work():
    rng = np.random.default_rng(3)
    configs = [GateConfig(), GateConfig(eps_energy=0.25),
               GateConfig(eps_energy=2.0, energy_relative=False, tau_align=0.3)]
    successes = 0
    held_back = 0
    for _ in range(2_000):
        cfg = configs[int(rng.integers(len(configs)))]
        traj = TrajectoryState.start(PsychState.from_array(_random_states(rng, 1, -12.0, -0.5)[0]))
        for v in rng.uniform(-2.0, 3.0, size=(10, 3)):
            traj = apply_window(traj, ActionVector(*v))
            mean_cos = mean_alignment(traj)
            verdict = check_gate(traj, cfg, mean_cos)
            enough = traj.e_total > cfg.energy_threshold(traj.r0)
            if verdict is GateVerdict.SUCCESS:
                assert enough
                successes += 1
                break
            if not enough and mean_cos > cfg.tau_align:
                held_back += 1
    assert successes > 0
    assert held_back > 0


# =============================================================================
# EXHAUSTIVE WINDOW LEVELS
# =============================================================================

PROG_POINTS = {0: 0, 1: 1, 2: 3}
NEG_POINTS = {"C": {0: 0, -1: -2, -2: -4}, "A": {0: 0, -1: -2, -2: -5}, "P": {0: 0, -1: -2, -2: -5}}
LEVEL_GRID = list(itertools.product((0, 1, 2), (0, -1, -2), repeat=3))


def _rebuild(p0, actions):
    """P_T, E_total and path length from scratch"""
    state = np.asarray(p0, dtype=float)
    points = [state]
    e_total = 0.0
    path = 0.0
    for v in actions:
        v = np.asarray(v, dtype=float)
        norm = np.linalg.norm(state)
        if norm > 0:
            e_total += float(v @ (-state / norm))
        path += float(np.linalg.norm(v))
        state = np.minimum(state + v, 0.0)
        points.append(state)
    return points, e_total, path


@pytest.mark.parametrize("levels", LEVEL_GRID)
def test_incremental_trajectory_matches_rebuild(levels):
    pc, nc, pa, na, pp, np_ = levels
    window = MdepWindowRating.from_levels({"C": (pc, nc), "A": (pa, na), "P": (pp, np_)})
    v = assemble_action_vector(window)
    expected_v = (PROG_POINTS[pc] + NEG_POINTS["C"][nc],
                  PROG_POINTS[pa] + NEG_POINTS["A"][na],
                  PROG_POINTS[pp] + NEG_POINTS["P"][np_])
    assert v.as_tuple() == expected_v
    assert penalty_intensity(window) == 0.5 * (abs(nc) + abs(na) + abs(np_))

    # a shallow start so repeated progress reaches the clamp
    p0 = (-2.0, -5.0, -4.0)
    traj = TrajectoryState.start(PsychState(*p0))
    for _ in range(3):
        traj = apply_window(traj, v)

    points, e_total, path = _rebuild(p0, [expected_v] * 3)
    for got, want in zip(traj.points(), points):
        np.testing.assert_allclose(got.as_array(), want, rtol=0, atol=1e-12)
    assert traj.e_total == pytest.approx(e_total, rel=1e-12, abs=1e-12)
    assert traj.path_length == pytest.approx(path, rel=1e-12, abs=1e-12)
    assert traj.window_count == 3
