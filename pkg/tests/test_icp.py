import numpy as np
import pytest

from disorient.cloud import PointCloud, RigidTransform, compose, random_rotation, transform_cloud
from disorient.metrics import rre, rte
from disorient.registration.icp import IcpParams, icp_register


def test_self_registration_is_identity(small_scan):
    res = icp_register(small_scan, small_scan)
    assert res.converged and res.iterations == 1
    assert res.transform.allclose(RigidTransform.identity(), 0)
    assert res.residual == 0.0
    assert all(c.weight == 1.0 for c in res.correspondences)


def test_small_offset_recovered(small_scan):
    D = compose(RigidTransform.from_translation((0.1, 0, 0)), RigidTransform.from_yaw(np.radians(2)))
    res = icp_register(small_scan, transform_cloud(small_scan, D))
    assert res.converged
    assert rre(res.transform.rotation, D.rotation) < 0.1
    assert rte(res.transform.translation, D.translation) < 0.01


def test_far_apart_clouds_do_not_converge(rng):
    a = PointCloud(rng.uniform(-1, 1, (100, 3)))
    b = PointCloud(rng.uniform(-1, 1, (100, 3)) + [100.0, 0, 0])
    res = icp_register(a, b, params=IcpParams(max_distance=1.0))
    assert not res.converged and res.correspondences == []


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        icp_register(PointCloud(np.zeros((0, 3))), PointCloud(np.zeros((3, 3))))


def test_iterations_bounded_and_residual_nonnegative(small_scan, rng):
    D = RigidTransform(random_rotation(rng, np.radians(5)), rng.uniform(-1, 1, 3))
    res = icp_register(small_scan, transform_cloud(small_scan, D), params=IcpParams(max_iter=3))
    assert res.iterations <= 3 and res.residual >= 0


def test_correspondences_index_thinned_clouds(small_scan):
    res = icp_register(small_scan, small_scan, params=IcpParams(voxel=1.0))
    n_src, n_tgt = len(res.src_points), len(res.tgt_points)
    assert n_src < len(small_scan)
    assert all(c.src_index < n_src and c.tgt_index < n_tgt for c in res.correspondences)


def test_recovers_rigid_copies(small_scan):
    g = np.random.default_rng(11)
    for _ in range(20):
        D = RigidTransform(random_rotation(g, np.radians(10)),
                           g.uniform(-1, 1, 3) * 2 / np.sqrt(3))
        res = icp_register(small_scan, transform_cloud(small_scan, D),
                           params=IcpParams(max_distance=3.0, max_iter=100))
        assert np.abs(res.transform.as_matrix() - D.as_matrix()).max() < 1e-3
