import numpy as np
import pytest

from jpcm.controllers import (
    ControlConfig,
    Controller,
    Plan,
    WindowBuffer,
    build_jpcm,
    build_nominal_mpc,
    cold_start,
    rollout,
    shift_warm_start,
    with_mode,
)
from jpcm.dynamics import allocate_inverse, euler_step
from jpcm.factors import RelPoseMeas
from jpcm.fgo import LMConfig, U, W, X, solve_lm
from jpcm.states import QuadState, RotorSpeeds, Wrench
from jpcm.trajgen import CircleSpec, HoverSpec, horizon_refs

HOVER = HoverSpec((0.0, 0.0, 1.0))
TIGHT = LMConfig(max_iter=50, rel_tol=1e-12, abs_tol=1e-14)


def _hover_state():
    return QuadState(p=[0.0, 0.0, 1.0])


def test_config_validation():
    with pytest.raises(ValueError):
        ControlConfig(mode="pid")
    with pytest.raises(ValueError):
        ControlConfig(horizon=0)
    with pytest.raises(ValueError):
        ControlConfig(Q_k=(1.0, 2.0))
    assert ControlConfig(mode="nominal-mpc", window=5).effective_window == 1
    assert with_mode(ControlConfig(), "sw-jpcm", window=10).window == 10


def test_nominal_graph_structure(params):
    cfg = ControlConfig(mode="nominal-mpc")
    g = build_nominal_mpc(_hover_state(), horizon_refs(HOVER, 0, cfg.dt, 20), cfg, params)
    kinds = [k.kind for k in g.values]
    assert kinds.count("state") == 21 and kinds.count("wrench") == 20 and kinds.count("rotor") == 20
    assert g.count("dynamics") == 20
    assert g.count("reference") == 20
    assert g.count("input_rate") == 19
    assert g.count("caf") == 20 and g.count("clf") == 20
    assert g.count("prior") == 1
    terminal = [f for f in g.factors if f.name == "reference" and f.keys == (X(20),)]
    assert terminal[0].noise is cfg.noise["Q_N"]


def test_nominal_graph_needs_full_horizon(params):
    cfg = ControlConfig(mode="nominal-mpc")
    with pytest.raises(ValueError):
        build_nominal_mpc(_hover_state(), horizon_refs(HOVER, 0, cfg.dt, 5), cfg, params)


def test_jpcm_graph_structure(params):
    cfg = ControlConfig(mode="sw-jpcm", window=3)
    buf = WindowBuffer(3)
    x = _hover_state()
    for i in range(4):
        rel = RelPoseMeas(i - 1, i, np.eye(3), np.zeros(3)) if i else None
        buf.push(i, x, rel)
    g = build_jpcm(buf, horizon_refs(HOVER, 3, cfg.dt, 20), cfg, params)
    assert len(buf) == 3
    assert g.count("positioning") == 3
    # the relative pose into the oldest kept state has no partner left
    assert g.count("lidar") == 2
    assert g.count("prior") == 0
    assert X(1) in g.values and X(0) not in g.values
    assert g.count("dynamics") == 20


def test_window_buffer_rejects_stale_index():
    buf = WindowBuffer(2)
    buf.push(3, QuadState())
    with pytest.raises(ValueError):
        buf.push(3, QuadState())
    with pytest.raises(ValueError):
        build_jpcm(WindowBuffer(1), [], ControlConfig(), None)


def test_cold_start_uses_refs_and_hover(params):
    refs = horizon_refs(CircleSpec(), 0, 0.01, 4)
    z = QuadState(p=[9.0, 9.0, 9.0])
    plan = cold_start(z, refs, params)
    assert plan.states[0] is z
    np.testing.assert_array_equal(plan.states[3].p, refs[2].p)
    assert all(w.thrust == params.hover_thrust for w in plan.wrenches)
    np.testing.assert_allclose(plan.rotors[0].speeds, params.hover_speed())


def test_shift_index_map():
    s = [QuadState(p=[k, 0, 0]) for k in range(4)]
    w = [Wrench(k) for k in range(3)]
    u = [RotorSpeeds([k] * 4) for k in range(3)]
    out = shift_warm_start(Plan(s, w, u))
    assert [x.p[0] for x in out.states] == [1, 2, 3, 3]
    assert [x.thrust for x in out.wrenches] == [1, 2, 2]
    assert [x.speeds[0] for x in out.rotors] == [1, 2, 2]
    assert out.past == []
    out = shift_warm_start(Plan(s, w, u, past=[QuadState(p=[-1, 0, 0])]), window=3)
    assert [x.p[0] for x in out.past] == [-1, 0]


def test_shift_propagates_terminal_state(params):
    s = [QuadState(v=[1.0, 0, 0])] * 2
    plan = Plan(s, [params.hover_wrench()], [allocate_inverse(params.hover_wrench(), params)])
    out = shift_warm_start(plan, params, 0.01)
    np.testing.assert_allclose(out.states[-1].p, [0.01, 0, 0])


def test_rollout_satisfies_dynamics(params):
    w = [Wrench(11.0, [0.001, 0, 0])] * 3
    plan = rollout(Plan([QuadState()] * 4, w, [None] * 3), params, 0.01)
    for k in range(3):
        nxt = euler_step(plan.states[k], w[k], 0.01, params)
        np.testing.assert_array_equal(plan.states[k + 1].p, nxt.p)


def test_hover_mpc_returns_hover_wrench(params):
    cfg = ControlConfig(mode="nominal-mpc", lm=TIGHT)
    g = build_nominal_mpc(_hover_state(), horizon_refs(HOVER, 0, cfg.dt, cfg.horizon), cfg, params)
    res = solve_lm(g, cfg.lm)
    np.testing.assert_allclose(res.values[W(0)].vector(), [params.hover_thrust, 0, 0, 0], atol=1e-6)
    np.testing.assert_allclose(res.values[U(0)].speeds, params.hover_speed(), atol=1e-6)


@pytest.mark.parametrize("mode", ["nominal-mpc", "jpcm-gi", "sw-jpcm"])
def test_hover_controller_applies_hover_speeds(mode, params):
    cfg = ControlConfig(mode=mode, window=3 if mode == "sw-jpcm" else 1)
    ctl = Controller(cfg, params)
    hover_u = allocate_inverse(params.hover_wrench(), params).speeds
    for k in range(5):
        rel = RelPoseMeas(k - 1, k, np.eye(3), np.zeros(3)) if mode == "sw-jpcm" and k else None
        out = ctl.step(_hover_state(), horizon_refs(HOVER, k, cfg.dt, cfg.horizon), rel)
        assert not out.failed
        np.testing.assert_allclose(out.rotors.speeds, hover_u, atol=1e-6)


def test_warm_start_after_hover_converges_fast(params):
    cfg = ControlConfig(mode="nominal-mpc", lm=TIGHT)
    ctl = Controller(cfg, params)
    ctl.step(_hover_state(), horizon_refs(HOVER, 0, cfg.dt, cfg.horizon))
    out = ctl.step(_hover_state(), horizon_refs(HOVER, 1, cfg.dt, cfg.horizon))
    assert out.iterations <= 2


def test_controller_is_deterministic(params):
    spec = CircleSpec()
    z = QuadState(p=[1.45, 0.02, 1.03], v=[0.1, 4.9, 0.0])
    outs = []
    for _ in range(2):
        ctl = Controller(ControlConfig(mode="jpcm-gi"), params)
        outs.append([ctl.step(z, horizon_refs(spec, k, 0.01, 20)) for k in range(3)])
    for a, b in zip(*outs):
        np.testing.assert_array_equal(a.rotors.speeds, b.rotors.speeds)
        np.testing.assert_array_equal(a.estimate.p, b.estimate.p)


def test_jpcm_matches_nominal_when_positioning_is_tight(params):
    # With P as tight as the nominal pin the two graphs have the same optimum.
    spec = CircleSpec()
    refs = horizon_refs(spec, 0, 0.01, 20)
    z = refs[0].as_state().retract(np.r_[0.05, -0.03, 0.02, 0.02, 0.0, -0.01, np.zeros(6)])
    first = {}
    for mode in ("nominal-mpc", "jpcm-gi"):
        cfg = ControlConfig(mode=mode, P=(1e-8,) * 12, lm=TIGHT)
        out = Controller(cfg, params).step(z, refs)
        first[mode] = out.wrench.vector()
    np.testing.assert_allclose(first["jpcm-gi"], first["nominal-mpc"], atol=1e-6)


def test_jpcm_estimate_moves_toward_the_plan(params):
    # The current state is not pinned: with loose P the estimate is pulled
    # from the measurement toward the reference.
    refs = horizon_refs(HOVER, 0, 0.01, 20)
    z = QuadState(p=[0.0, 0.0, 1.3])
    out = Controller(ControlConfig(mode="jpcm-gi"), params).step(z, refs)
    assert 1.0 < out.estimate.p[2] < 1.3


def test_solver_breakdown_holds_last_input(params, monkeypatch):
    import jpcm.controllers as c
    from jpcm.fgo import SolveResult

    ctl = Controller(ControlConfig(mode="nominal-mpc"), params)
    refs = horizon_refs(HOVER, 0, 0.01, 20)
    good = ctl.step(_hover_state(), refs)
    monkeypatch.setattr(c, "solve_lm", lambda g, cfg: SolveResult(False, 1, 1.0, np.nan, g.values,
                                                                  "boom", diverged=True))
    bad = ctl.step(_hover_state(), horizon_refs(HOVER, 1, 0.01, 20))
    assert bad.failed and bad.reason == "boom"
    np.testing.assert_array_equal(bad.rotors.speeds, good.rotors.speeds)
