import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uwsplat.errors import ArgumentError, DegenerateRotationError
from uwsplat.scene import (
    Camera,
    GaussianCloud,
    camera_distance,
    covariance_of,
    decode_medium,
    inverse_softplus,
    logit,
    matrix_to_quat,
    quat_to_matrix,
    sigmoid,
    softplus,
)

finite = st.floats(-5, 5, allow_nan=False)
quats = arrays(np.float64, 4, elements=st.floats(-1, 1, allow_nan=False)).filter(
    lambda q: np.linalg.norm(q) > 1e-3
)


@given(st.floats(-5, 5), st.floats(1e-3, 2))
def test_decoders_are_monotone(x, dx):
    assert softplus(x + dx) > softplus(x)
    assert sigmoid(x + dx) > sigmoid(x)


@given(finite)
def test_decoder_derivatives_match_central_differences(x):
    h = 1e-5
    d_soft = (softplus(x + h) - softplus(x - h)) / (2 * h)
    d_sig = (sigmoid(x + h) - sigmoid(x - h)) / (2 * h)
    s = sigmoid(x)
    assert abs(d_soft - s) <= 1e-6 * max(abs(s), 1e-6) + 1e-9
    assert abs(d_sig - s * (1 - s)) <= 1e-6 * max(s * (1 - s), 1e-6) + 1e-9


@given(st.floats(1e-6, 30))
def test_inverse_softplus_roundtrip(y):
    assert softplus(inverse_softplus(y)) == pytest.approx(y, rel=1e-9)


@given(st.floats(1e-6, 1 - 1e-6))
def test_logit_inverts_sigmoid(p):
    assert sigmoid(logit(p)) == pytest.approx(p, rel=1e-9)


@given(quats)
def test_quaternion_matrix_is_a_rotation(q):
    R = quat_to_matrix(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-9)


@given(quats, arrays(np.float64, 3, elements=st.floats(-3, 1)))
def test_covariance_ignores_quaternion_sign(q, log_s):
    cloud = GaussianCloud.from_decoded(np.zeros((2, 3)), rotations=[q, -q], scales=np.exp(log_s))
    np.testing.assert_array_equal(covariance_of(cloud, 0), covariance_of(cloud, 1))
    cov = covariance_of(cloud, 0)
    np.testing.assert_allclose(cov, cov.T, atol=1e-15)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_covariance_of_axis_aligned_gaussian():
    cloud = GaussianCloud.from_decoded([[0, 0, 0]], scales=[[0.1, 0.2, 0.3]])
    np.testing.assert_allclose(covariance_of(cloud, 0), np.diag([0.01, 0.04, 0.09]))
    np.testing.assert_allclose(cloud.covariances()[0], covariance_of(cloud, 0))


def test_zero_quaternion_is_rejected():
    with pytest.raises(DegenerateRotationError):
        quat_to_matrix(np.zeros(4))


def test_from_decoded_roundtrips_physical_values(rng):
    n = 6
    kw = dict(
        scales=rng.uniform(0.01, 1, (n, 3)),
        opacities=rng.uniform(0.05, 0.95, n),
        colors=rng.uniform(0, 1, (n, 3)),
        beta_d=rng.uniform(0.01, 2, (n, 3)),
        beta_b=rng.uniform(0.01, 2, (n, 3)),
        veil=rng.uniform(0.01, 0.99, (n, 3)),
    )
    cloud = GaussianCloud.from_decoded(rng.normal(size=(n, 3)), **kw)
    np.testing.assert_allclose(cloud.scales, kw["scales"], rtol=1e-12)
    np.testing.assert_allclose(cloud.opacities, kw["opacities"], rtol=1e-12)
    np.testing.assert_allclose(cloud.beta_d, kw["beta_d"], rtol=1e-9)
    np.testing.assert_allclose(cloud.beta_b, kw["beta_b"], rtol=1e-9)
    np.testing.assert_allclose(cloud.veil, kw["veil"], rtol=1e-12)
    bd, bb, v = decode_medium(cloud, 3)
    np.testing.assert_allclose(bd, kw["beta_d"][3], rtol=1e-9)
    np.testing.assert_allclose(v, kw["veil"][3], rtol=1e-12)


def test_zero_medium_decodes_to_tiny_values():
    cloud = GaussianCloud.from_decoded([[0, 0, 1]], beta_d=0, beta_b=0)
    assert np.all(cloud.beta_d <= 1e-11)
    assert np.all(cloud.beta_b <= 1e-11)


def test_cloud_rejects_mismatched_lengths():
    good = GaussianCloud.from_decoded(np.zeros((3, 3)))
    params = good.params()
    params["veil_raw"] = params["veil_raw"][:2]
    with pytest.raises(ArgumentError, match="veil_raw"):
        GaussianCloud(**params)


def test_decode_medium_index_check():
    cloud = GaussianCloud.from_decoded(np.zeros((2, 3)))
    with pytest.raises(ArgumentError):
        decode_medium(cloud, 2)


def test_subset_concat_copy_are_independent(rng):
    cloud = GaussianCloud.from_decoded(rng.normal(size=(5, 3)))
    both = cloud.subset([0, 1]).concat(cloud.subset([4]))
    assert both.count == 3
    np.testing.assert_array_equal(both.positions[2], cloud.positions[4])
    dup = cloud.copy()
    dup.positions[0] += 1
    assert not np.array_equal(dup.positions[0], cloud.positions[0])
    assert GaussianCloud.empty().count == 0


@given(arrays(np.float64, 3, elements=st.floats(-10, 10)), arrays(np.float64, 3, elements=st.floats(-10, 10)),
       st.floats(-3, 3))
def test_camera_distance_is_affine(a, b, t):
    cam = Camera.look_at([1.0, -4.0, 2.0], [0, 0, 0], width=32, height=24)
    lhs = camera_distance(a + t * (b - a), cam)
    rhs = camera_distance(a, cam) + t * (camera_distance(b, cam) - camera_distance(a, cam))
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_look_at_camera_geometry():
    eye = np.array([0.0, -3.0, 1.0])
    cam = Camera.look_at(eye, [0, 0, 1], width=64, height=48, fov_deg=90)
    np.testing.assert_allclose(cam.center, eye, atol=1e-12)
    assert camera_distance([0, 0, 1], cam) == pytest.approx(3.0)
    assert cam.fx == pytest.approx(32.0)
    half = cam.scaled(2)
    assert (half.width, half.height, half.fx, half.cx) == (32, 24, pytest.approx(16.0), 16.0)


def test_camera_validation():
    with pytest.raises(ArgumentError):
        Camera(0, 10, 1.0, 1.0, 0.0, 0.0)
    with pytest.raises(ArgumentError):
        Camera(10, 10, 1.0, 1.0, 5.0, 5.0, rotation=np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(ArgumentError):
        Camera(10, 10, 1.0, 1.0, 12.0, 5.0)
