import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from disorient.cloud import RigidTransform, random_rotation
from disorient.metrics import rre, rte
from disorient.registration.kabsch import Correspondence, DegenerateGeometryError, weighted_kabsch


def horn_quaternion(P, Q, w):
    """Independent oracle: Horn's closed-form absolute orientation via quaternions."""
    w = w / w.sum()
    mp, mq = w @ P, w @ Q
    S = ((P - mp) * w[:, None]).T @ (Q - mq)
    sxx, sxy, sxz = S[0]
    syx, syy, syz = S[1]
    szx, szy, szz = S[2]
    N = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz]])
    vals, vecs = np.linalg.eigh(N)
    q0, qx, qy, qz = vecs[:, -1]
    R = np.array([
        [q0 * q0 + qx * qx - qy * qy - qz * qz, 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
        [2 * (qy * qx + q0 * qz), q0 * q0 - qx * qx + qy * qy - qz * qz, 2 * (qy * qz - q0 * qx)],
        [2 * (qz * qx - q0 * qy), 2 * (qz * qy + q0 * qx), q0 * q0 - qx * qx - qy * qy + qz * qz]])
    return R, mq - R @ mp


def test_identity():
    P = np.random.default_rng(0).normal(size=(20, 3))
    T = weighted_kabsch(P, P)
    assert T.allclose(RigidTransform.identity(), 1e-12)


def test_pure_translation():
    P = np.random.default_rng(1).normal(size=(20, 3))
    T = weighted_kabsch(P, P + [1.0, 2.0, 3.0])
    np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(T.translation, [1, 2, 3], atol=1e-12)


def test_recovers_random_transform_with_weights(rng):
    for _ in range(20):
        R = random_rotation(rng)
        t = rng.uniform(-10, 10, 3)
        P = rng.uniform(-5, 5, (50, 3))
        T = weighted_kabsch(P, P @ R.T + t, rng.uniform(0.01, 1, 50))
        np.testing.assert_allclose(T.rotation, R, atol=1e-9)
        np.testing.assert_allclose(T.translation, t, atol=1e-9)


def test_matches_quaternion_oracle_on_noisy_data(rng):
    for _ in range(50):
        P = rng.uniform(-5, 5, (30, 3))
        Q = P @ random_rotation(rng).T + rng.uniform(-3, 3, 3) + rng.normal(0, 0.3, (30, 3))
        w = rng.uniform(0.1, 1.0, 30)
        T = weighted_kabsch(P, Q, w)
        R_o, t_o = horn_quaternion(P, Q, w)
        np.testing.assert_allclose(T.rotation, R_o, atol=1e-9)
        np.testing.assert_allclose(T.translation, t_o, atol=1e-9)


def test_reflection_is_corrected(rng):
    # a mirrored target has a best fit with det -1; the solver must stay in SO(3)
    P = rng.uniform(-1, 1, (10, 3))
    T = weighted_kabsch(P, P * [1, 1, -1])
    assert np.linalg.det(T.rotation) == pytest.approx(1.0)


def test_errors():
    P = np.eye(3)
    with pytest.raises(DegenerateGeometryError):
        weighted_kabsch(P[:2], P[:2])
    with pytest.raises(DegenerateGeometryError):
        weighted_kabsch(P, P, [1.0, 1.0, 0.0])
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometryError):
        weighted_kabsch(line, line + 1.0)
    with pytest.raises(ValueError):
        weighted_kabsch(P, P[:2])
    with pytest.raises(ValueError):
        weighted_kabsch(P, P, [1.0, -1.0, 1.0])


def test_correspondence_validation():
    with pytest.raises(ValueError):
        Correspondence(-1, 0)
    with pytest.raises(ValueError):
        Correspondence(0, 0, float("nan"))
    with pytest.raises(ValueError):
        Correspondence(0, 0, -0.5)


@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3))
def test_weight_rescaling_invariance(seed, c):
    g = np.random.default_rng(seed)
    P = g.uniform(-5, 5, (12, 3))
    Q = P @ random_rotation(g).T + g.normal(0, 0.5, (12, 3))
    w = g.uniform(0.1, 1.0, 12)
    a = weighted_kabsch(P, Q, w)
    b = weighted_kabsch(P, Q, c * w)
    assert a.allclose(b, 1e-9)


def test_thousand_instances_accuracy_and_speed():
    import time

    g = np.random.default_rng(2024)
    worst_r = worst_t = 0.0
    t0 = time.perf_counter()
    for _ in range(1000):
        n = int(g.integers(3, 501))
        R = random_rotation(g, np.pi)
        t = g.uniform(-10, 10, 3)
        P = g.uniform(-10, 10, (n, 3))
        T = weighted_kabsch(P, P @ R.T + t, g.uniform(0.01, 1.0, n))
        worst_r = max(worst_r, rre(T.rotation, R))
        worst_t = max(worst_t, rte(T.translation, t))
    elapsed = time.perf_counter() - t0
    assert worst_r < 1e-7 and worst_t < 1e-9 and elapsed < 5.0
