from __future__ import annotations

import numpy as np
import pytest

from core.geometry import (
    AnchorChain,
    OutOfRangeError,
    PlaneTarget,
    PoseCorrection,
    RayMeasurement,
    apply_correction,
    apply_correction_full,
    correct_points,
    interpolate_correction,
    interpolate_corrections,
    point_to_plane_residual,
    residual_jacobian,
    rotation_matrix,
)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _two_anchor_chain() -> AnchorChain:
    values = np.zeros((2, 6))
    values[1, 2] = 0.02
    return AnchorChain(5, values, spacing=0.5, arc_origin=10.0)


def _explicit_rotation(theta: np.ndarray) -> np.ndarray:
    omega, phi, kappa = theta
    rx = np.array([[1, 0, 0], [0, np.cos(omega), -np.sin(omega)], [0, np.sin(omega), np.cos(omega)]])
    ry = np.array([[np.cos(phi), 0, np.sin(phi)], [0, 1, 0], [-np.sin(phi), 0, np.cos(phi)]])
    rz = np.array([[np.cos(kappa), -np.sin(kappa), 0], [np.sin(kappa), np.cos(kappa), 0], [0, 0, 1]])
    return rz @ ry @ rx


def test_interpolate_at_first_anchor_returns_it():
    i, alpha, corr = interpolate_correction(_two_anchor_chain(), 10.0)
    assert i == 0
    assert alpha == 0.0
    assert np.array_equal(corr.t, np.zeros(3))


def test_interpolate_midpoint_is_linear():
    _, alpha, corr = interpolate_correction(_two_anchor_chain(), 10.25)
    assert alpha == pytest.approx(0.5)
    assert np.allclose(corr.t, [0.0, 0.0, 0.01], atol=1e-15)


def test_interpolate_last_anchor_uses_alpha_one():
    i, alpha, corr = interpolate_correction(_two_anchor_chain(), 10.5)
    assert (i, alpha) == (0, 1.0)
    assert np.allclose(corr.t, [0.0, 0.0, 0.02])


def test_interpolate_zero_chain_gives_zero():
    chain = AnchorChain.zeros(1, 12, spacing=0.5, arc_origin=3.0)
    for arc in np.linspace(3.0, chain.arc_end, 17):
        _, _, corr = interpolate_correction(chain, float(arc))
        assert np.array_equal(corr.vector, np.zeros(6))


def test_interpolate_outside_chain_raises():
    chain = _two_anchor_chain()
    with pytest.raises(OutOfRangeError):
        interpolate_correction(chain, 9.99)
    with pytest.raises(OutOfRangeError):
        interpolate_correction(chain, 10.51)


def test_interpolate_mirrored_chain_swaps_alpha():
    rng = np.random.default_rng(3)
    chain = AnchorChain(0, rng.normal(size=(9, 6)) * 0.01, spacing=0.5)
    mirrored = AnchorChain(0, chain.values[::-1].copy(), spacing=0.5)
    arcs = rng.uniform(0.0, chain.arc_end, size=200)
    _, _, a, ok = interpolate_corrections(chain, arcs)
    _, _, b, ok_m = interpolate_corrections(mirrored, chain.arc_end - arcs)
    assert ok.all() and ok_m.all()
    assert np.allclose(a, b, atol=1e-15)


def test_interpolate_vectorized_marks_out_of_range():
    chain = _two_anchor_chain()
    idx, alpha, values, ok = interpolate_corrections(chain, np.array([9.0, 10.1, 11.0, np.nan]))
    assert ok.tolist() == [False, True, False, False]
    assert np.array_equal(values[~ok], np.zeros((3, 6)))


def test_chain_covering_spans_arc_range():
    chain = AnchorChain.covering(2, 0.3, 7.1, spacing=0.5)
    assert chain.arc_origin == 0.0
    assert chain.arc_end >= 7.1
    assert chain.n == 16


def test_apply_zero_correction_is_identity():
    m = RayMeasurement(t0=[1.0, 1.0, 1.0], r=[5.0, 0.0, 0.0], arc=0.0, trajectory_id=0)
    assert np.array_equal(apply_correction(PoseCorrection.zero(), m), m.r + m.t0)


def test_apply_pure_translation():
    m = RayMeasurement(t0=[1.0, 1.0, 1.0], r=[5.0, 0.0, 0.0], arc=0.0, trajectory_id=0)
    corr = PoseCorrection([0.0, 0.0, 0.01], [0.0, 0.0, 0.0])
    assert np.allclose(apply_correction(corr, m), [6.0, 1.0, 1.01], atol=1e-15)


def test_small_kappa_matches_full_rotation():
    m = RayMeasurement(t0=[0.0, 0.0, 0.0], r=[10.0, 0.0, 0.0], arc=0.0, trajectory_id=0)
    corr = PoseCorrection(np.zeros(3), [0.0, 0.0, 0.001])
    assert np.linalg.norm(apply_correction(corr, m) - apply_correction_full(corr, m)) <= 1e-5


def test_rotation_matrix_matches_explicit_product():
    rng = np.random.default_rng(11)
    for _ in range(50):
        theta = rng.uniform(-0.05, 0.05, size=3)
        assert np.allclose(rotation_matrix(theta), _explicit_rotation(theta), atol=1e-14)


def test_linearization_error_bounded():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        theta = rng.uniform(-0.05, 0.05, size=3)
        r = rng.normal(size=3) * rng.uniform(0.5, 50.0)
        m = RayMeasurement(t0=rng.normal(size=3), r=r, arc=0.0, trajectory_id=0)
        corr = PoseCorrection(rng.normal(size=3) * 0.1, theta)
        err = np.linalg.norm(apply_correction(corr, m) - apply_correction_full(corr, m))
        assert err <= np.dot(theta, theta) * np.linalg.norm(r) + 1e-12


def test_correct_points_zero_is_bit_exact():
    rng = np.random.default_rng(5)
    xyz = rng.normal(size=(100, 3)) * 40.0
    t0 = rng.normal(size=(100, 3))
    assert np.array_equal(correct_points(xyz, t0, np.zeros((100, 6))), xyz)


def test_residual_examples():
    target = PlaneTarget([0.0, 0.0, 1.0], [0.0, 0.0, 1.0])
    assert point_to_plane_residual(target, np.array([3.0, 7.0, 0.0])) == 1.0
    assert point_to_plane_residual(target, np.array([-2.0, 4.0, 1.0])) == 0.0


def test_residual_matches_termwise_dot_products():
    rng = np.random.default_rng(8)
    for _ in range(100):
        w = _unit(rng.normal(size=3))
        s = rng.normal(size=3) * 10.0
        p = rng.normal(size=3) * 10.0
        expected = sum(w[k] * s[k] for k in range(3)) - sum(w[k] * p[k] for k in range(3))
        assert point_to_plane_residual(PlaneTarget(w, s), p) == pytest.approx(expected, abs=1e-12)


def test_plane_target_requires_unit_normal():
    with pytest.raises(ValueError):
        PlaneTarget([0.0, 0.0, 2.0], [0.0, 0.0, 0.0])


def test_jacobian_axis_example():
    target = PlaneTarget([0.0, 0.0, 1.0], [0.0, 0.0, 0.0])
    m = RayMeasurement(t0=np.zeros(3), r=[1.0, 0.0, 0.0], arc=0.0, trajectory_id=0)
    j_i, j_ip1 = residual_jacobian(target, m, 0.0)
    assert np.array_equal(j_i, [0.0, 0.0, 1.0, 0.0, -1.0, 0.0])
    assert np.array_equal(j_ip1, np.zeros(6))


def test_jacobian_rejects_bad_alpha():
    target = PlaneTarget([0.0, 0.0, 1.0], [0.0, 0.0, 0.0])
    m = RayMeasurement(t0=np.zeros(3), r=[1.0, 0.0, 0.0], arc=0.0, trajectory_id=0)
    with pytest.raises(ValueError):
        residual_jacobian(target, m, 1.5)


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(2024)
    h = 1e-6
    for _ in range(1000):
        w = _unit(rng.normal(size=3))
        target = PlaneTarget(w, rng.normal(size=3))
        m = RayMeasurement(t0=rng.normal(size=3), r=rng.normal(size=3) * rng.uniform(1.0, 30.0), arc=0.0, trajectory_id=0)
        alpha = float(rng.uniform(0.0, 1.0))
        j_i, j_ip1 = residual_jacobian(target, m, alpha)

        def f(delta: np.ndarray) -> float:
            # sensitivity of <w, R r + t> to the interpolated correction
            return float(np.dot(w, apply_correction_full(PoseCorrection.from_vector(delta), m)))

        fd = np.zeros(6)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            fd[k] = (f(e) - f(-e)) / (2.0 * h)
        scale = np.linalg.norm(fd)
        assert np.allclose(j_i, (1.0 - alpha) * fd, rtol=1e-5, atol=1e-5 * scale)
        assert np.allclose(j_ip1, alpha * fd, rtol=1e-5, atol=1e-5 * scale)


def test_pose_correction_bounds():
    assert PoseCorrection([0.2, 0.0, 0.0], [0.0, 0.0, 0.004]).within_bounds()
    assert not PoseCorrection([1.5, 0.0, 0.0], np.zeros(3)).within_bounds()
    assert not PoseCorrection([np.nan, 0.0, 0.0], np.zeros(3)).is_finite()
