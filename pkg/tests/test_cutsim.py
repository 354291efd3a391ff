from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajstyle.cutsim import (ConstantPolicy, CutterModel, ExpertParams, ForceSensor, Geometry, MaterialParams,
                              Perturbation, ScriptedExpert, SimConfig, SimError, Simulator, TARGET_PERTURBATION,
                              cutting_force, episode_seeds, gravity_compensate, mean_cutting_force, run_episode,
                              scripted_expert, target_config)

from oracles import quadrature_mean

CUTTER = CutterModel()
PLASTIC = MaterialParams("m", 100.0, 0.1)


def test_zero_depth_gives_zero_force():
    for a in (0.0, 0.05, 1.3):
        assert np.all(cutting_force(CUTTER, PLASTIC, 0.0, 0.75, a) == 0.0)


def test_buried_tool_is_rejected():
    with pytest.raises(SimError):
        cutting_force(CUTTER, PLASTIC, 51.0, 0.75, 0.0)
    with pytest.raises(SimError):
        cutting_force(CUTTER, PLASTIC, -0.1, 0.75, 0.0)


def test_force_doubles_with_cutting_constant():
    a = cutting_force(CUTTER, MaterialParams("a", 70.0, 0.0), 1.2, 0.75, 0.031)
    b = cutting_force(CUTTER, MaterialParams("b", 140.0, 0.0), 1.2, 0.75, 0.031)
    np.testing.assert_allclose(b, 2 * a, rtol=1e-14)


def test_mean_force_matches_quadrature_oracle():
    got = mean_cutting_force(CUTTER, PLASTIC, 1.0, 0.75)
    want = quadrature_mean(100.0, 0.1, 1.0, 0.75)
    assert np.linalg.norm(got - want) <= 0.02 * np.linalg.norm(want)
    assert got[1] * want[1] > 0 and got[2] * want[2] > 0


def test_force_periodic_in_tooth_pitch():
    a = cutting_force(CUTTER, PLASTIC, 1.0, 0.75, 0.3)
    b = cutting_force(CUTTER, PLASTIC, 1.0, 0.75, 0.3 + CUTTER.tooth_spacing)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_cutter_validation():
    with pytest.raises(SimError):
        CutterModel(n_teeth=30).validate()
    doubled = CUTTER.scaled_teeth(2.0)
    assert doubled.n_teeth == 100
    doubled.validate()


def _free_sim(k=1000.0):
    cfg = SimConfig(material=MaterialParams("none", 0.0, 0.0), initial_action=(-0.5, 0.0, k, k, k))
    return Simulator(cfg, seed=0)


def test_critically_damped_step_has_no_overshoot():
    sim = _free_sim()
    z0 = sim.pos[2]
    sim.set_action(np.array([-0.5, 0.5, 1000.0, 1000.0, 1000.0]))  # reference drops 0.5 mm
    step = -0.5e-3
    w = math.sqrt(1000.0 / 5.0)
    zs, ts = [], []
    for _ in range(750):
        sim.step()
        zs.append(sim.pos[2] - z0)
        ts.append(sim.t)
    zs, ts = np.array(zs), np.array(ts)
    assert sim.pos[1] < sim.cfg.entry  # still in free space
    assert np.min(zs) >= step * 1.001
    exact = step * (1 - (1 + w * ts) * np.exp(-w * ts))
    assert np.max(np.abs(zs - exact)) < 0.02 * abs(step)


def test_zero_stiffness_stays_put():
    cfg = SimConfig(material=MaterialParams("none", 0.0, 0.0), impedance=replace(SimConfig().impedance, k_min=0.0))
    sim = Simulator(replace(cfg, initial_action=(-0.5, 0.0, 0.0, 0.0, 0.0)), seed=1)
    p0 = sim.pos.copy()
    for _ in range(50):
        sim.step()
    np.testing.assert_array_equal(sim.pos, p0)


def test_energy_nonincreasing_with_fixed_reference():
    sim = _free_sim(k=2500.0)
    sim.pos[0] = 2e-3  # transverse reference stays at 0
    m, k = 5.0, 2500.0
    energy = []
    for _ in range(400):
        sim.step()
        energy.append(0.5 * m * sim.vel[0] ** 2 + 0.5 * k * sim.pos[0] ** 2)
    assert np.all(np.diff(energy) <= 1e-15)


def test_sensor_lag_closed_form():
    for sub in (1, 10):
        s = ForceSensor(lag=0.04)
        got = []
        for _ in range(12):
            for _ in range(sub):
                s.update([0.0, 2.0, -1.0], 0.02 / sub)
            got.append(s.reading()[1])
        n = np.arange(1, 13)
        np.testing.assert_allclose(got, 2.0 * (1 - np.exp(-n * 0.02 / 0.04)), rtol=0, atol=1e-9)


def test_sensor_without_lag_is_identity_plus_drift():
    s = ForceSensor()
    np.testing.assert_array_equal(s.update([1.0, -2.0, 3.0], 0.002), [1.0, -2.0, 3.0])
    d = ForceSensor(drift_rate=0.5, direction=(0.0, 0.6, 0.8))
    d.update([0.0, 0.0, 0.0], 2.0)
    np.testing.assert_allclose(d.reading(), [0.0, 0.6, 0.8], atol=1e-15)


def test_baseline_completes_in_sixteen_seconds():
    ep = run_episode(SimConfig(material=PLASTIC), ConstantPolicy(), seed=3)
    assert not ep.meta["fault"]
    assert abs(ep.meta["completion_time"] - 16.0) <= 0.02 * 16.0


def test_zero_length_path():
    ep = run_episode(SimConfig(path_length=0.0), ConstantPolicy(), seed=0)
    assert len(ep.trajectory) == 0 and ep.meta["completion_time"] == 0.0 and not ep.meta["fault"]


def test_episode_determinism_and_progress_bounds():
    cfg = SimConfig(geometry=Geometry("curved"))
    a = run_episode(cfg, ScriptedExpert(), seed=11)
    b = run_episode(cfg, ScriptedExpert(), seed=11)
    assert a.trajectory.states.tobytes() == b.trajectory.states.tobytes()
    assert a.trajectory.actions.tobytes() == b.trajectory.actions.tobytes()
    p = a.trajectory.states[:, 6]
    assert p.min() >= 0.0 and p.max() <= 1.0


def test_perturbation_free_target_matches_source():
    cfg = SimConfig(geometry=Geometry("offset"))
    src = run_episode(cfg, ScriptedExpert(), seed=5)
    tgt = run_episode(target_config(cfg, Perturbation()), ScriptedExpert(), seed=5)
    assert src.trajectory.states.tobytes() == tgt.trajectory.states.tobytes()
    assert src.trajectory.domain_tag == tgt.trajectory.domain_tag == "source"


def test_target_domain_differs():
    cfg = SimConfig(material=PLASTIC)
    src = run_episode(cfg, ScriptedExpert(), seed=5)
    tgt = run_episode(target_config(cfg), ScriptedExpert(), seed=5)
    assert tgt.trajectory.domain_tag == "target"
    assert not np.array_equal(src.trajectory.states[:50], tgt.trajectory.states[:50])
    assert TARGET_PERTURBATION.teeth_multiplier == 2.0


def test_clamping_is_logged_not_raised():
    sim = Simulator(SimConfig(), seed=0)
    sim.set_action(np.array([5.0, 0.0, 1e6, 10.0, 1000.0]))
    lo, hi = SimConfig().action_bounds()
    assert np.all(sim.action >= lo) and np.all(sim.action <= hi) and sim.clamp_events == 1
    with pytest.raises(SimError):
        sim.set_action(np.array([np.nan, 0, 1, 1, 1]))


def _window(force, feed_adj=-0.2, rows=100):
    w = np.zeros((rows, 7))
    w[:, 1] = -0.6 * force
    w[:, 2] = 0.8 * force
    w[:, 3] = 0.75 * (1 + feed_adj)
    w[:, 5] = 1.0
    return w


def test_expert_free_space_reduces_feed():
    assert scripted_expert(_window(0.0, feed_adj=-0.5))[0] < 0
    ep = run_episode(SimConfig(material=PLASTIC), ScriptedExpert(), seed=2)
    first_contact = int(np.argmax(ep.blocks["contact_steps"] > 0))
    assert first_contact > 0
    assert np.all(ep.trajectory.actions[:first_contact, 0] < 0)


def test_expert_equilibrium_at_target_force():
    a = scripted_expert(_window(ExpertParams().target_force, feed_adj=0.1))
    assert a[0] == pytest.approx(0.1, abs=1e-12)


def test_expert_monotone_in_force():
    feeds = [scripted_expert(_window(f))[0] for f in np.linspace(0, 20, 81)]
    assert np.all(np.diff(feeds) <= 0)


def test_gravity_compensation_examples():
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    f = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(gravity_compensate(f, R, R, 2.0), R @ f, atol=1e-12)
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    np.testing.assert_allclose(gravity_compensate(f, Rx, np.eye(3), 0.0), Rx @ f, atol=1e-12)
    corr = gravity_compensate(np.zeros(3), Rx, np.eye(3), 1.0, 9.81)
    np.testing.assert_allclose(corr, [0.0, 9.81, 9.81], atol=1e-12)
    assert np.linalg.norm(corr) == pytest.approx(9.81 * math.sqrt(2))
    with pytest.raises(SimError):
        gravity_compensate(f, 2 * np.eye(3), np.eye(3), 1.0)


def test_episode_seeds_are_stable_and_distinct():
    a = episode_seeds(0, 5)
    assert a == episode_seeds(0, 5) and len(set(a)) == 5
    assert episode_seeds(0, 5, stream=1) != a


def test_material_randomisation_stays_in_range():
    rng = np.random.default_rng(0)
    base = MaterialParams(randomize=True)
    for _ in range(200):
        m = base.sample(rng)
        assert 5.0 <= m.k_c <= 5000.0 and 0.005 <= m.k_e <= 5.0


@settings(max_examples=50, deadline=None)
@given(kc=st.floats(0, 3000), ke=st.floats(0, 3), s=st.floats(0.1, 4), doc=st.floats(0, 5),
       angle=st.floats(0, 2 * math.pi))
def test_force_affine_in_constants(kc, ke, s, doc, angle):
    f = lambda a, b: cutting_force(CUTTER, MaterialParams("x", a, b), doc, 0.75, angle)  # noqa: E731
    np.testing.assert_allclose(f(s * kc, s * ke), s * f(kc, ke), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(f(kc, ke), f(kc, 0.0) + f(0.0, ke), rtol=1e-10, atol=1e-12)
    assert np.all(f(0.0, 0.0) == 0.0)
