"""Rotation format conversions: axis-angle, 3x3 matrix, and 6D.

All functions accept numpy arrays with arbitrary leading batch dimensions
and compute in float64. Axis-angle vectors encode a rotation as axis*angle
with the angle in radians; the canonical representative has magnitude <= pi.
The 6D form is the first two columns of the rotation matrix concatenated
(column-major), the usual continuous representation for learning.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, NumericError

# Below this angle the sin(t)/t style ratios switch to series expansions.
_SMALL_ANGLE = 1e-6
# Within this distance of pi the axis is recovered from the symmetric part.
_NEAR_PI = 1e-3


def _check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite values")


def _skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix K with K @ u = v x u. v: (..., 3) -> (..., 3, 3)."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    return np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )


def axis_angle_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula: R = I + sin(t)*K + (1-cos(t))*K^2 with t = ||v||.

    Args:
        v: (..., 3) axis-angle vectors.

    Returns:
        (..., 3, 3) rotation matrices. The zero vector maps to the identity
        exactly.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise DataError(f"axis-angle vectors must have last dim 3, got {v.shape}")
    _check_finite(v, "axis-angle input")

    theta = np.linalg.norm(v, axis=-1)
    # sin(t)/t and (1-cos(t))/t^2 via sinc so t = 0 is exact.
    a = np.sinc(theta / np.pi)
    half_sinc = np.sinc(theta / (2.0 * np.pi))
    b = 0.5 * half_sinc * half_sinc

    k = _skew(v)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * k2


def matrix_to_axis_angle(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`axis_angle_to_matrix`, returning the canonical vector.

    The result has magnitude in [0, pi]. At a half turn, where v and -v encode
    the same rotation, the lexicographically larger of the two axes is chosen.

    Args:
        r: (..., 3, 3) rotation matrices, orthonormal within 1e-6.

    Returns:
        (..., 3) axis-angle vectors.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-2:] != (3, 3):
        raise DataError(f"rotation matrices must have shape (..., 3, 3), got {r.shape}")
    _check_finite(r, "rotation matrix input")

    gram = np.swapaxes(r, -1, -2) @ r
    err = np.abs(gram - np.eye(3)).max(axis=(-1, -2))
    if np.any(err > 1e-6):
        raise DataError(f"input is not orthonormal within 1e-6 (max deviation {err.max():.3e})")
    if np.any(np.linalg.det(r) <= 0):
        raise DataError("input has non-positive determinant (reflection, not rotation)")

    trace = r[..., 0, 0] + r[..., 1, 1] + r[..., 2, 2]
    cos_t = np.clip((trace - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)

    # w = sin(t) * axis, from the antisymmetric part.
    w = 0.5 * np.stack(
        [
            r[..., 2, 1] - r[..., 1, 2],
            r[..., 0, 2] - r[..., 2, 0],
            r[..., 1, 0] - r[..., 0, 1],
        ],
        axis=-1,
    )
    sin_t = np.linalg.norm(w, axis=-1)

    small = theta < _SMALL_ANGLE
    near_pi = theta > np.pi - _NEAR_PI

    # Mid branch: v = w * t / sin(t). Guard the divisions; masked out elsewhere.
    safe_sin = np.where(sin_t > 0, sin_t, 1.0)
    v_mid = w * (theta / safe_sin)[..., None]

    # Small branch: t/sin(t) ~= 1 + t^2/6, and w ~= v there already.
    v_small = w * (1.0 + theta * theta / 6.0)[..., None]

    # Near pi the antisymmetric part degenerates; recover the axis from the
    # symmetric part instead: (S - cos(t) I) / (1 - cos(t)) = n n^T.
    sym = 0.5 * (r + np.swapaxes(r, -1, -2))
    denom = np.where(1.0 - cos_t > 0, 1.0 - cos_t, 1.0)
    outer = (sym - cos_t[..., None, None] * np.eye(3)) / denom[..., None, None]
    diag = np.clip(
        np.stack([outer[..., 0, 0], outer[..., 1, 1], outer[..., 2, 2]], axis=-1), 0.0, None
    )
    pick = np.argmax(diag, axis=-1)
    n_pick = np.sqrt(np.take_along_axis(diag, pick[..., None], axis=-1))
    row = np.take_along_axis(outer, pick[..., None, None], axis=-2)[..., 0, :]
    n = row / np.where(n_pick > 0, n_pick, 1.0)
    norm_n = np.linalg.norm(n, axis=-1, keepdims=True)
    n = n / np.where(norm_n > 0, norm_n, 1.0)

    # Sign: follow the antisymmetric part while it is meaningful, otherwise
    # take the lexicographically larger of +-n.
    dot = np.sum(w * n, axis=-1)
    sign_known = sin_t > 1e-8
    flip_by_dot = sign_known & (dot < 0)

    significant = np.abs(n) > 1e-12
    first = np.argmax(significant, axis=-1)
    lead = np.take_along_axis(n, first[..., None], axis=-1)[..., 0]
    flip_by_lex = ~sign_known & (lead < 0)

    n = np.where((flip_by_dot | flip_by_lex)[..., None], -n, n)
    v_pi = n * theta[..., None]

    v = np.where(near_pi[..., None], v_pi, np.where(small[..., None], v_small, v_mid))
    return v


def axis_angle_to_rot6d(v: np.ndarray) -> np.ndarray:
    """First two rotation-matrix columns of v, concatenated: (..., 3) -> (..., 6)."""
    r = axis_angle_to_matrix(v)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def rot6d_to_matrix(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt the two encoded columns and complete the frame by cross product.

    Args:
        r6: (..., 6) arrays holding two 3-vectors (intended matrix columns).

    Returns:
        (..., 3, 3) rotation matrices whose first two columns span the same
        plane as the inputs.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise DataError(f"6D rotations must have last dim 6, got {r6.shape}")
    _check_finite(r6, "6D rotation input")

    a1 = r6[..., 0:3]
    a2 = r6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    if np.any(n1 < 1e-12) or np.any(n2 < 1e-12):
        raise DataError("degenerate 6D rotation: a column is (near) zero")
    cross = np.cross(a1, a2)
    sin_angle = np.linalg.norm(cross, axis=-1) / (n1 * n2)
    cos_angle = np.sum(a1 * a2, axis=-1) / (n1 * n2)
    angle = np.arctan2(sin_angle, cos_angle)
    if np.any(np.minimum(angle, np.pi - angle) < 1e-6):
        raise DataError("degenerate 6D rotation: columns are near parallel")

    b1 = a1 / n1[..., None]
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = u2 / np.linalg.norm(u2, axis=-1, keepdims=True)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_to_axis_angle(r6: np.ndarray) -> np.ndarray:
    """(..., 6) -> (..., 3) canonical axis-angle, via the matrix form."""
    return matrix_to_axis_angle(rot6d_to_matrix(r6))


def canonicalize_axis_angle(v: np.ndarray) -> np.ndarray:
    """Map any axis-angle vector to the canonical representative with ||v|| <= pi."""
    return matrix_to_axis_angle(axis_angle_to_matrix(v))
