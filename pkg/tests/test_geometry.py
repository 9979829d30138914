import numpy as np
import pytest

from refmoco.geometry import (
    CSV_HEADER,
    InvalidParameterError,
    MotionTrace,
    RigidParams,
    apply_rigid,
    apply_rigid_inverse,
    compose,
    inverse_rotate_kpoints,
    invert,
    rotate_kpoints,
    rotation_angles,
    rotation_matrices,
    rotation_matrix,
    rotation_matrix_derivatives,
    voxel_positions,
    kspace_frequencies,
    wrap_angle,
)


def plane(angle, a, b):
    """Independent oracle: rotation in the (a, b) plane turning e_a toward e_b."""
    r = np.eye(3)
    r[a, a] = r[b, b] = np.cos(angle)
    r[b, a] = np.sin(angle)
    r[a, b] = -np.sin(angle)
    return r


def test_zero_rotation_is_exact_identity():
    assert np.array_equal(rotation_matrix([0, 0, 0]), np.eye(3))


def test_quarter_turn_axial_maps_x_to_y():
    r = rotation_matrix([np.pi / 2, 0, 0])
    np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_rotation_matches_product_oracle():
    phi = (0.1, 0.2, 0.3)
    # xy acts first on a column point, yz last
    expected = plane(0.3, 1, 2) @ plane(0.2, 0, 2) @ plane(0.1, 0, 1)
    r = rotation_matrix(phi)
    assert np.abs(r - expected).max() < 1e-15
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_vectorized_matrices_match_scalar(rng):
    phis = rng.uniform(-np.pi, np.pi, (50, 3))
    batch = rotation_matrices(phis)
    for p, r in zip(phis, batch):
        assert np.abs(r - rotation_matrix(p)).max() < 1e-14


@pytest.mark.parametrize("bad", [[np.nan, 0, 0], [0, np.inf, 0]])
def test_non_finite_angles_rejected(bad):
    with pytest.raises(InvalidParameterError):
        rotation_matrix(bad)
    with pytest.raises(InvalidParameterError):
        RigidParams(np.zeros(3), bad)


def test_orthogonality_over_random_angles(rng):
    for phi in rng.uniform(-10, 10, (100, 3)):
        r = rotation_matrix(phi)
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12


def test_angle_wrapping_preserves_matrix():
    phi = np.array([3.5, -4.0, 7.0])
    p = RigidParams(np.zeros(3), phi)
    assert np.all(p.phi > -np.pi) and np.all(p.phi <= np.pi)
    np.testing.assert_allclose(p.matrix, rotation_matrix(phi), atol=1e-14)
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)


def test_apply_rigid_examples():
    assert np.allclose(apply_rigid(RigidParams(), [[1, 2, 3]]), [[1, 2, 3]])
    assert np.allclose(apply_rigid(RigidParams([1, 0, 0], np.zeros(3)), [[0, 0, 0]]), [[1, 0, 0]])
    p = RigidParams([1, -2, 0.5], [0.1, 0.2, 0.3])
    expected = plane(0.3, 1, 2) @ plane(0.2, 0, 2) @ plane(0.1, 0, 1) @ np.ones(3) + [1, -2, 0.5]
    assert np.abs(apply_rigid(p, [[1, 1, 1]])[0] - expected).max() < 1e-12


def test_apply_inverse_round_trip(rng):
    for _ in range(20):
        p = RigidParams(rng.normal(size=3) * 5, rng.uniform(-np.pi, np.pi, 3))
        pts = rng.normal(size=(10, 3)) * 20
        assert np.abs(apply_rigid(p, apply_rigid_inverse(p, pts)) - pts).max() < 1e-10


def test_inverse_rotate_kpoints():
    k = np.array([[0.3, -0.2, 0.0], [1.0, 2.0, 3.0]])
    assert np.array_equal(inverse_rotate_kpoints(np.zeros(3), k), k)
    np.testing.assert_allclose(inverse_rotate_kpoints([np.pi, 0, 0], k[:1]), [[-0.3, 0.2, 0.0]], atol=1e-15)
    phi = (0.4, -0.7, 1.1)
    assert np.abs(inverse_rotate_kpoints(phi, rotate_kpoints(phi, k)) - k).max() < 1e-12
    np.testing.assert_allclose(inverse_rotate_kpoints(phi, k), k @ rotation_matrix(phi), atol=1e-15)


def test_compose_and_invert(rng):
    a = RigidParams(rng.normal(size=3), rng.uniform(-1, 1, 3))
    b = RigidParams(rng.normal(size=3), rng.uniform(-1, 1, 3))
    pts = rng.normal(size=(5, 3))
    np.testing.assert_allclose(apply_rigid(compose(a, b), pts), apply_rigid(b, apply_rigid(a, pts)), atol=1e-12)
    ident = compose(a, invert(a))
    assert np.abs(ident.as_vector()).max() < 1e-12


def test_rotation_angles_round_trip(rng):
    for phi in rng.uniform(-1.4, 1.4, (20, 3)):
        np.testing.assert_allclose(rotation_angles(rotation_matrix(phi)), phi, atol=1e-12)


def test_rotation_derivatives_by_finite_differences(rng):
    phi = rng.uniform(-1, 1, 3)
    d = rotation_matrix_derivatives(phi)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (rotation_matrix(phi + e) - rotation_matrix(phi - e)) / (2 * h)
        assert np.abs(fd - d[j]).max() < 1e-8


def test_trace_csv_round_trip(rng):
    vals = np.column_stack([rng.normal(size=(7, 3)), rng.uniform(-np.pi, np.pi, (7, 3))])
    tr = MotionTrace(vals)
    rows = tr.to_csv_rows()
    assert len(CSV_HEADER) == 7 and len(rows[0]) == 7
    back = MotionTrace.from_csv_rows(rows)
    np.testing.assert_allclose(back.values, tr.values, atol=1e-12)


def test_trace_is_read_only_and_validated():
    tr = MotionTrace.identity(4)
    with pytest.raises(ValueError):
        tr.values[0, 0] = 1.0
    with pytest.raises(InvalidParameterError):
        MotionTrace(np.zeros((3, 5)))
    assert tr[2].is_identity()


def test_grid_conventions():
    x = voxel_positions((4, 5, 6), (1.0, 2.0, 0.5))
    assert x[0][2] == 0 and x[1][2] == 0 and x[2][3] == 0
    assert x[1][0] == -4.0
    k = kspace_frequencies((4, 4, 4), (2.0, 2.0, 2.0))
    np.testing.assert_allclose(k[0], 2 * np.pi * np.arange(-2, 2) / 8.0)
