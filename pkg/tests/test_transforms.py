import numpy as np
import pytest

from endosim.transforms import (
    RigidTransform,
    from_rotation_translation,
    identity,
    random_transform,
    rot_x,
    rot_y,
    rot_z,
    trans,
    trans_z,
)


def test_identity_is_neutral():
    rng = np.random.default_rng(0)
    t = random_transform(rng)
    assert np.allclose((identity() @ t).matrix, t.matrix)
    assert np.allclose((t @ identity()).matrix, t.matrix)


def test_rejects_non_orthonormal():
    m = np.eye(4)
    m[0, 0] = 1.01
    with pytest.raises(ValueError):
        RigidTransform(m)


def test_rejects_reflection():
    m = np.eye(4)
    m[0, 0] = -1.0  # det = -1, still orthogonal
    with pytest.raises(ValueError):
        RigidTransform(m)


def test_rejects_bad_last_row():
    m = np.eye(4)
    m[3, 0] = 0.1
    with pytest.raises(ValueError):
        RigidTransform(m)


def test_rejects_nonfinite():
    m = np.eye(4)
    m[0, 3] = np.nan
    with pytest.raises(ValueError):
        RigidTransform(m)


def test_inverse_roundtrip():
    rng = np.random.default_rng(7)
    for _ in range(50):
        t = random_transform(rng)
        assert np.allclose((t @ t.inverse()).matrix, np.eye(4), atol=1e-12)
        assert np.allclose((t.inverse() @ t).matrix, np.eye(4), atol=1e-12)


def test_composition_associative():
    rng = np.random.default_rng(11)
    for _ in range(20):
        a, b, c = (random_transform(rng) for _ in range(3))
        assert np.allclose(((a @ b) @ c).matrix, (a @ (b @ c)).matrix, atol=1e-12)


def test_apply_matches_matrix_product():
    rng = np.random.default_rng(3)
    t = random_transform(rng)
    pts = rng.normal(size=(10, 3)) * 50
    homog = np.column_stack([pts, np.ones(10)])
    expected = (t.matrix @ homog.T).T[:, :3]
    assert np.allclose(t.apply(pts), expected)
    assert np.allclose(t.apply(pts[0]), expected[0])


def test_apply_preserves_distances():
    rng = np.random.default_rng(5)
    t = random_transform(rng)
    p, q = rng.normal(size=3) * 40, rng.normal(size=3) * 40
    d_before = np.linalg.norm(p - q)
    d_after = np.linalg.norm(t.apply(p) - t.apply(q))
    assert abs(d_before - d_after) < 1e-9


def test_elementary_builders():
    # rot_z(90 deg) takes x to y
    assert np.allclose(rot_z(np.pi / 2).apply(np.array([1.0, 0, 0])), [0, 1, 0])
    # rot_x(90 deg) takes y to z
    assert np.allclose(rot_x(np.pi / 2).apply(np.array([0, 1.0, 0])), [0, 0, 1])
    # rot_y(90 deg) takes z to x
    assert np.allclose(rot_y(np.pi / 2).apply(np.array([0, 0, 1.0])), [1, 0, 0])
    assert np.allclose(trans(1, 2, 3).translation, [1, 2, 3])
    assert np.allclose(trans_z(5).translation, [0, 0, 5])


def test_from_rotation_translation():
    r = rot_y(0.3).rotation
    t = from_rotation_translation(r, np.array([1.0, 2.0, 3.0]))
    assert np.allclose(t.rotation, r)
    assert np.allclose(t.translation, [1, 2, 3])


def test_matrix_is_readonly():
    t = identity()
    with pytest.raises(ValueError):
        t.matrix[0, 0] = 2.0
