import math

import numpy as np
import pytest

from bodydiff.errors import DataError, NumericError
from bodydiff.rotations import (
    axis_angle_to_matrix,
    axis_angle_to_rot6d,
    canonicalize_axis_angle,
    matrix_to_axis_angle,
    rot6d_to_axis_angle,
    rot6d_to_matrix,
)

# ---------------------------------------------------------------------------
# Independent oracle: axis-angle -> quaternion -> matrix, scalar math only.
# ---------------------------------------------------------------------------


def _quat_from_axis_angle(v):
    theta = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if theta == 0.0:
        return (1.0, 0.0, 0.0, 0.0)
    s = math.sin(theta / 2.0) / theta
    return (math.cos(theta / 2.0), v[0] * s, v[1] * s, v[2] * s)


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def _random_axis_angle(rng, max_angle=math.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return axis * angle


def test_zero_vector_gives_exact_identity():
    r = axis_angle_to_matrix(np.zeros(3))
    assert np.array_equal(r, np.eye(3))


def test_half_turn_about_z():
    r = axis_angle_to_matrix(np.array([0.0, 0.0, math.pi]))
    assert np.allclose(r, np.diag([-1.0, -1.0, 1.0]), atol=1e-12)


def test_matrix_matches_quaternion_oracle():
    rng = np.random.default_rng(20240601)
    for _ in range(500):
        v = _random_axis_angle(rng)
        got = axis_angle_to_matrix(v)
        want = _quat_to_matrix(_quat_from_axis_angle(v))
        assert np.abs(got - want).max() < 1e-12


def test_matrix_is_orthonormal_with_unit_determinant():
    rng = np.random.default_rng(7)
    v = np.stack([_random_axis_angle(rng) for _ in range(64)])
    r = axis_angle_to_matrix(v)
    gram = np.swapaxes(r, -1, -2) @ r
    assert np.abs(gram - np.eye(3)).max() < 1e-12
    assert np.abs(np.linalg.det(r) - 1.0).max() < 1e-12


def test_identity_matrix_maps_to_zero_vector():
    assert np.allclose(matrix_to_axis_angle(np.eye(3)), np.zeros(3), atol=1e-15)


def test_half_turn_matrix_maps_to_positive_z():
    v = matrix_to_axis_angle(np.diag([-1.0, -1.0, 1.0]))
    assert np.allclose(v, [0.0, 0.0, math.pi], atol=1e-12)


def test_round_trip_away_from_pi():
    rng = np.random.default_rng(20240602)
    vs = np.stack([_random_axis_angle(rng, max_angle=math.pi - 1e-3) for _ in range(1000)])
    back = matrix_to_axis_angle(axis_angle_to_matrix(vs))
    assert np.abs(back - vs).max() < 1e-9


def test_near_pi_reconstruction_stays_tight():
    rng = np.random.default_rng(20240603)
    for _ in range(200):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = math.pi - rng.uniform(0.0, 1e-3)
        r = axis_angle_to_matrix(axis * angle)
        v = matrix_to_axis_angle(r)
        assert np.linalg.norm(v) <= math.pi + 1e-12
        assert np.abs(axis_angle_to_matrix(v) - r).max() < 1e-8


@pytest.mark.parametrize(
    "axis",
    [
        (1.0, 0.0, 0.0),
        (0.0, 1.0, 0.0),
        (0.0, 0.0, 1.0),
        (1.0, -1.0, 0.0),
        (0.0, 1.0, -1.0),
        (1.0, 1.0, 1.0),
    ],
)
def test_pi_sign_tie_breaks_to_lexicographically_larger_axis(axis):
    n = np.asarray(axis, dtype=np.float64)
    n /= np.linalg.norm(n)
    # Build the half-turn matrix from the sign-free outer-product form so the
    # input carries no hint of which of +-n was used.
    r = 2.0 * np.outer(n, n) - np.eye(3)
    v = matrix_to_axis_angle(r)
    want = n if n[np.argmax(np.abs(n) > 1e-12)] > 0 else -n
    assert np.allclose(v, want * math.pi, atol=1e-12)


def test_rot6d_identity_columns():
    assert np.allclose(rot6d_to_axis_angle(np.array([1.0, 0, 0, 0, 1.0, 0])), np.zeros(3))


def test_rot6d_negated_columns_give_half_turn():
    v = rot6d_to_axis_angle(np.array([-1.0, 0, 0, 0, -1.0, 0]))
    assert np.allclose(v, [0.0, 0.0, math.pi], atol=1e-12)


def test_rot6d_agrees_with_matrix_path():
    rng = np.random.default_rng(20240604)
    vs = np.stack([_random_axis_angle(rng, max_angle=math.pi - 1e-3) for _ in range(500)])
    r6 = axis_angle_to_rot6d(vs)
    assert np.abs(rot6d_to_axis_angle(r6) - vs).max() < 1e-9


def test_rot6d_gram_schmidt_repairs_noisy_columns():
    rng = np.random.default_rng(20240605)
    v = _random_axis_angle(rng)
    r6 = axis_angle_to_rot6d(v) + rng.normal(scale=1e-3, size=6)
    r = rot6d_to_matrix(r6)
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12
    assert np.abs(np.linalg.det(r) - 1.0) < 1e-12


def test_rot6d_rejects_parallel_columns():
    with pytest.raises(DataError):
        rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))
    with pytest.raises(DataError):
        rot6d_to_matrix(np.array([1.0, 0, 0, -1.0, 1e-9, 0]))


def test_rot6d_rejects_zero_column():
    with pytest.raises(DataError):
        rot6d_to_matrix(np.array([0.0, 0, 0, 0, 1.0, 0]))


def test_matrix_input_validation():
    with pytest.raises(DataError):
        matrix_to_axis_angle(np.eye(3) * 1.5)
    with pytest.raises(DataError):
        matrix_to_axis_angle(np.diag([1.0, 1.0, -1.0]))  # reflection
    with pytest.raises(NumericError):
        axis_angle_to_matrix(np.array([np.nan, 0.0, 0.0]))
    with pytest.raises(NumericError):
        matrix_to_axis_angle(np.full((3, 3), np.inf))


def test_canonicalize_wraps_long_vectors():
    rng = np.random.default_rng(20240606)
    for _ in range(100):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(math.pi + 0.1, 4 * math.pi)
        v = canonicalize_axis_angle(axis * angle)
        assert np.linalg.norm(v) <= math.pi + 1e-12
        assert np.abs(
            axis_angle_to_matrix(v) - axis_angle_to_matrix(axis * angle)
        ).max() < 1e-10


def test_batched_shapes_pass_through():
    rng = np.random.default_rng(20240607)
    vs = rng.normal(scale=0.5, size=(4, 5, 3))
    r = axis_angle_to_matrix(vs)
    assert r.shape == (4, 5, 3, 3)
    back = matrix_to_axis_angle(r)
    assert back.shape == (4, 5, 3)
    assert np.abs(back - vs).max() < 1e-9
