import numpy as np
import pytest

from jpcm.so3 import _log, is_rotation
from jpcm.trajgen import CircleSpec, HoverSpec, circle_ref, horizon_refs, hover_ref, reference_at


def test_circle_geometry():
    spec = CircleSpec(radius=1.5, speed=5.0)
    for t in np.linspace(0.0, 3.0, 31):
        r = circle_ref(spec, float(t))
        assert np.linalg.norm(r.p - np.array(spec.center)) == pytest.approx(1.5, abs=1e-12)
        assert np.linalg.norm(r.v) == pytest.approx(5.0, abs=1e-12)
        assert r.v @ (r.p - np.array(spec.center)) == pytest.approx(0.0, abs=1e-12)
        assert is_rotation(r.R, tol=1e-12)


def test_circle_starts_on_first_axis_and_is_periodic():
    spec = CircleSpec(radius=2.0, speed=3.0, center=(1.0, -1.0, 2.0))
    e1, e2 = spec.basis()
    np.testing.assert_allclose(circle_ref(spec, 0.0).p, np.array(spec.center) + 2.0 * e1, atol=1e-15)
    np.testing.assert_allclose(np.cross(e1, e2), spec.normal, atol=1e-15)
    np.testing.assert_allclose(circle_ref(spec, spec.period).p, circle_ref(spec, 0.0).p, atol=1e-12)


def test_thrust_attitude_aligns_body_z_with_required_force():
    spec = CircleSpec()
    r = circle_ref(spec, 0.4)
    acc = -(spec.speed ** 2 / spec.radius) * (r.p - np.array(spec.center)) / spec.radius
    f = acc + spec.gravity * np.array([0, 0, 1])
    np.testing.assert_allclose(r.R[:, 2], f / np.linalg.norm(f), atol=1e-12)
    # body x lies along the velocity's projection
    assert r.R[:, 0] @ r.v > 0
    assert abs(r.R[:, 1] @ r.v) < 1e-12


def test_level_attitude():
    r = circle_ref(CircleSpec(attitude="level"), 0.3)
    np.testing.assert_allclose(r.R[:, 2], [0, 0, 1], atol=1e-15)


def test_body_rate_matches_attitude_change():
    spec = CircleSpec()
    h = 1e-3
    a, b = circle_ref(spec, 1.0), circle_ref(spec, 1.0 + h)
    np.testing.assert_allclose(_log(a.R.T @ b.R) / h, a.omega, atol=1e-3)
    # constant-speed circle: yaw rate equals speed / radius
    assert np.linalg.norm(a.omega) == pytest.approx(spec.speed / spec.radius, rel=1e-6)


def test_circle_validation():
    with pytest.raises(ValueError):
        CircleSpec(radius=0.0)
    with pytest.raises(ValueError):
        CircleSpec(attitude="banked")
    with pytest.raises(ValueError):
        circle_ref(CircleSpec(), -0.1)


def test_horizon_refs_and_hover():
    spec = CircleSpec()
    refs = horizon_refs(spec, 7, 0.01, 20)
    assert len(refs) == 20
    np.testing.assert_array_equal(refs[0].p, circle_ref(spec, 0.08).p)
    np.testing.assert_array_equal(refs[-1].p, circle_ref(spec, 0.27).p)
    h = reference_at(HoverSpec((0.0, 0.0, 1.0)), 5.0)
    np.testing.assert_array_equal(h.p, [0, 0, 1])
    np.testing.assert_array_equal(h.R, np.eye(3))
    np.testing.assert_array_equal(hover_ref([1, 2, 3]).v, 0.0)
    with pytest.raises(TypeError):
        reference_at(object(), 0.0)


def test_cached_reference_is_read_only():
    r = circle_ref(CircleSpec(), 0.5)
    with pytest.raises(ValueError):
        r.p[0] = 0.0
