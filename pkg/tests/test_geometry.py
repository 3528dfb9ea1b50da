"""Test poses, meshes, cameras and surface sampling."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.stats import chisquare

from specpose.errors import GeometryError
from specpose.geometry import (
    CameraIntrinsics,
    Mesh,
    PointSet,
    Pose,
    compose,
    exp_rotation,
    geodesic_angle,
    invert,
    log_rotation,
    mesh_diameter,
    orthonormality_residual,
    project,
    random_rotation,
    retract,
    rotation_about_axis,
    sample_surface_points,
    transform_points,
)
from specpose.meshes import icosphere, unit_cube

from tests.conftest import random_pose

seeds = st.integers(min_value=0, max_value=2**32 - 1)


class TestPose:
    """Test Pose construction and serialization."""

    def test_identity(self):
        """Test the identity pose is strictly valid."""
        pose = Pose.identity()

        assert pose.is_valid()
        assert_array_equal(pose.as_matrix(), np.eye(4))

    def test_rejects_scaled_rotation(self):
        """Test a scaled rotation reports its residual."""
        with pytest.raises(GeometryError, match="not orthonormal"):
            Pose(2.0 * np.eye(3), np.zeros(3))

    def test_rejects_reflection(self):
        """Test a reflection is not a rotation."""
        with pytest.raises(GeometryError, match="reflection"):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rejects_non_finite(self):
        """Test NaN translations are rejected."""
        with pytest.raises(GeometryError, match="non-finite"):
            Pose(np.eye(3), [np.nan, 0.0, 0.0])

    def test_tolerated_drift_is_reorthonormalized(self, rng):
        """Test a rotation inside the loose tolerance is projected back onto SO(3)."""
        R = random_rotation(rng)
        drifted = R + rng.uniform(-5e-8, 5e-8, size=(3, 3))
        assert orthonormality_residual(drifted) > 1e-9

        pose = Pose(drifted, np.zeros(3))

        assert pose.is_valid()
        assert orthonormality_residual(pose.rotation) <= 1e-12
        assert_allclose(pose.rotation, R, atol=1e-6)

    def test_exact_rotation_kept_bit_for_bit(self):
        """Test an already orthonormal rotation is stored unchanged."""
        R = rotation_about_axis([0.0, 0.0, 1.0], 0.3)

        assert_array_equal(Pose(R, np.zeros(3)).rotation, R)

    def test_arrays_are_read_only(self):
        """Test a pose cannot be mutated through its arrays."""
        pose = Pose.identity()

        with pytest.raises(ValueError):
            pose.translation[0] = 1.0

    def test_dict_round_trip(self, rng):
        """Test to_dict and from_dict reproduce the pose."""
        pose = random_pose(rng)

        restored = Pose.from_dict(pose.to_dict())

        assert restored.allclose(pose, atol=0.0)
        assert len(pose.to_dict()["rotation"]) == 9

    def test_from_dict_wrong_counts(self):
        """Test pose objects need 9 + 3 numbers."""
        with pytest.raises(GeometryError, match="9 rotation and 3 translation"):
            Pose.from_dict({"rotation": [1, 0, 0, 0, 1, 0], "translation": [0, 0, 1]})

    def test_from_dict_missing_key(self):
        """Test missing keys raise a GeometryError."""
        with pytest.raises(GeometryError, match="malformed pose"):
            Pose.from_dict({"rotation": [1, 0, 0, 0, 1, 0, 0, 0, 1]})

    def test_from_matrix(self):
        """Test 4x4 matrices are split into rotation and translation."""
        M = np.eye(4)
        M[:3, 3] = [0.1, 0.2, 0.3]

        pose = Pose.from_matrix(M)

        assert_array_equal(pose.translation, [0.1, 0.2, 0.3])
        with pytest.raises(GeometryError):
            Pose.from_matrix(np.eye(3))


class TestComposition:
    """Test compose, invert and the rotation maps."""

    def test_compose_with_identity(self, rng):
        """Test the identity is neutral."""
        p = random_pose(rng)

        assert compose(Pose.identity(), p).allclose(p)
        assert compose(p, Pose.identity()).allclose(p)

    @given(seeds)
    def test_compose_with_inverse(self, seed):
        """Test p composed with its inverse is the identity."""
        p = random_pose(np.random.default_rng(seed), spread=1.0)

        q = compose(p, invert(p))

        assert np.max(np.abs(q.rotation - np.eye(3))) < 1e-9
        assert np.linalg.norm(q.translation) < 1e-9

    @given(seeds)
    def test_compose_matches_matrix_product(self, seed):
        """Test compose agrees with the homogeneous matrix product."""
        rng = np.random.default_rng(seed)
        a, b = random_pose(rng), random_pose(rng)

        assert_allclose(compose(a, b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-12)

    def test_compose_applies_right_operand_first(self):
        """Test compose(a, b) applies b before a."""
        a = Pose(rotation_about_axis([0, 0, 1], np.pi / 2), np.zeros(3))
        b = Pose(np.eye(3), [1.0, 0.0, 0.0])

        assert_allclose(compose(a, b).apply([[0.0, 0.0, 0.0]])[0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_exp_of_zero_is_identity(self):
        """Test the exponential map returns I exactly at zero."""
        assert_array_equal(exp_rotation(np.zeros(3)), np.eye(3))

    @given(seeds)
    def test_exp_log_round_trip(self, seed):
        """Test log inverts exp for angles below pi."""
        rng = np.random.default_rng(seed)
        axis = rng.normal(size=3)
        w = axis / np.linalg.norm(axis) * rng.uniform(0.0, 3.0)

        assert_allclose(log_rotation(exp_rotation(w)), w, atol=1e-9)

    def test_geodesic_angle_small(self):
        """Test tiny angles keep full precision."""
        R = rotation_about_axis([0.0, 0.0, 1.0], 1e-8)

        assert geodesic_angle(np.eye(3), R) == pytest.approx(1e-8, rel=1e-6)

    def test_geodesic_angle_half_turn(self):
        """Test a half turn measures pi."""
        R = rotation_about_axis([1.0, 0.0, 0.0], np.pi)

        assert geodesic_angle(np.eye(3), R) == pytest.approx(np.pi)

    def test_retract_left_perturbation(self, rng):
        """Test retract rotates on the left and adds the translation."""
        pose = random_pose(rng)
        xi = np.array([0.01, -0.02, 0.03, 0.1, 0.2, 0.3])

        moved = retract(pose, xi)

        assert_allclose(moved.rotation, exp_rotation(xi[:3]) @ pose.rotation, atol=1e-15)
        assert_allclose(moved.translation, pose.translation + xi[3:], atol=1e-15)

    def test_rotation_about_zero_axis(self):
        """Test a zero axis is rejected."""
        with pytest.raises(GeometryError):
            rotation_about_axis([0.0, 0.0, 0.0], 1.0)


class TestTransformPoints:
    """Test rigid transformation of point sets."""

    def test_identity_pose(self, rng):
        """Test the identity leaves points unchanged."""
        pts = PointSet(rng.normal(size=(20, 3)))

        assert_array_equal(transform_points(Pose.identity(), pts).points, pts.points)

    def test_translation(self):
        """Test a pure translation of the origin."""
        pose = Pose(np.eye(3), [0.1, 0.0, 0.0])

        out = transform_points(pose, PointSet([[0.0, 0.0, 0.0]]))

        assert_allclose(out.points, [[0.1, 0.0, 0.0]])

    @given(seeds)
    def test_matches_per_point_loop(self, seed):
        """Test the vectorized transform against R x + T per point."""
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        pts = rng.normal(size=(15, 3))

        expected = np.array([pose.rotation @ x + pose.translation for x in pts])

        assert_allclose(transform_points(pose, pts).points, expected, atol=1e-12)

    @given(seeds)
    def test_preserves_distances(self, seed):
        """Test rigid motions keep pairwise distances."""
        rng = np.random.default_rng(seed)
        pose = random_pose(rng, spread=1.0)
        pts = rng.normal(size=(10, 3))

        moved = transform_points(pose, pts).points
        before = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        after = np.linalg.norm(moved[:, None] - moved[None], axis=2)

        assert np.max(np.abs(before - after)) < 1e-9

    def test_keeps_face_index(self):
        """Test face tags survive the transform."""
        pts = PointSet([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], face_index=[3, 4])

        assert_array_equal(transform_points(Pose.identity(), pts).face_index, [3, 4])

    def test_rejects_bad_shape(self):
        """Test points must be n x 3."""
        with pytest.raises(GeometryError, match="shape"):
            PointSet(np.zeros((4, 2)))


class TestProjection:
    """Test the pinhole camera model."""

    def test_optical_axis(self, intr):
        """Test the optical axis hits the principal point."""
        assert_allclose(project(intr, [0.0, 0.0, 1.0]), [320.0, 240.0])

    def test_offset_point(self, intr):
        """Test 500 * 0.1 + 320."""
        assert_allclose(project(intr, [0.1, 0.0, 1.0]), [370.0, 240.0])

    def test_behind_camera(self, intr):
        """Test points with z <= 0 are rejected."""
        with pytest.raises(GeometryError, match="behind camera"):
            project(intr, [0.0, 0.0, -1.0])

    @given(seeds, st.floats(min_value=0.1, max_value=10.0))
    def test_scale_ambiguity(self, seed, scale):
        """Test scaling a point leaves its projection unchanged."""
        rng = np.random.default_rng(seed)
        p = np.array([rng.normal(), rng.normal(), rng.uniform(0.5, 3.0)])
        intr = CameraIntrinsics.default()

        assert_allclose(project(intr, p * scale), project(intr, p), atol=1e-9)

    def test_invalid_intrinsics(self):
        """Test non-positive focal lengths are rejected."""
        with pytest.raises(GeometryError):
            CameraIntrinsics(0.0, 500.0, 320.0, 240.0, 640, 480)

    def test_intrinsics_round_trip(self):
        """Test intrinsics serialize through to_dict."""
        intr = CameraIntrinsics.centered(128, 150.0)

        assert CameraIntrinsics.from_dict(intr.to_dict()) == intr
        assert intr.cx == 64.0 and intr.size == (128, 128)


class TestMeshDiameter:
    """Test mesh diameters."""

    def test_unit_cube(self):
        """Test the cube diagonal."""
        assert mesh_diameter(unit_cube()) == pytest.approx(np.sqrt(3.0))

    def test_single_vertex(self):
        """Test one vertex has diameter 0."""
        mesh = Mesh([[1.0, 2.0, 3.0]], np.zeros((0, 3), dtype=int))

        assert mesh_diameter(mesh) == 0.0

    def test_empty_mesh(self):
        """Test an empty mesh is an error."""
        mesh = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))

        with pytest.raises(GeometryError, match="empty mesh"):
            mesh_diameter(mesh)

    def test_random_vertices_brute_force(self, rng):
        """Test against a double loop over vertex pairs."""
        verts = rng.normal(size=(10, 3))
        mesh = Mesh(verts, [[0, 1, 2]])

        expected = max(np.linalg.norm(a - b) for a in verts for b in verts)

        assert mesh_diameter(mesh) == pytest.approx(expected, abs=1e-12)

    def test_hull_path_matches_brute_force(self, rng):
        """Test the convex-hull shortcut on a large vertex set."""
        verts = rng.normal(size=(400, 3))
        mesh = Mesh(verts, [[0, 1, 2]])

        diffs = verts[:, None, :] - verts[None, :, :]
        expected = np.sqrt((diffs**2).sum(axis=2)).max()

        assert mesh_diameter(mesh) == pytest.approx(expected, abs=1e-12)

    @given(seeds)
    def test_invariant_under_pose(self, seed):
        """Test rigid motion does not change the diameter."""
        rng = np.random.default_rng(seed)
        mesh = icosphere(1, radius=0.05)

        moved = mesh.transformed(random_pose(rng, spread=1.0))

        assert abs(moved.diameter - mesh.diameter) < 1e-9


class TestMesh:
    """Test Mesh validation and helpers."""

    def test_triangle_index_out_of_range(self):
        """Test triangles must reference existing vertices."""
        with pytest.raises(GeometryError, match="out of range"):
            Mesh(np.zeros((3, 3)), [[0, 1, 3]])

    def test_centroid_is_vertex_mean(self, cube):
        """Test the default center is the vertex mean."""
        assert_allclose(cube.centroid, np.zeros(3), atol=1e-15)

    def test_center_override(self, cube):
        """Test an explicit center replaces the centroid."""
        mesh = Mesh(cube.vertices, cube.triangles, center=[0.1, 0.0, 0.0])

        assert_array_equal(mesh.centroid, [0.1, 0.0, 0.0])

    def test_welded_merges_duplicates(self):
        """Test coincident vertices are merged."""
        verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]
        mesh = Mesh(verts, [[0, 1, 2], [3, 5, 4]])

        welded = mesh.welded()

        assert welded.n_vertices == 4
        assert welded.n_triangles == 2

    def test_reindexed_keeps_geometry(self, cube, rng):
        """Test a vertex permutation keeps every triangle's coordinates."""
        perm = rng.permutation(cube.n_vertices)

        moved = cube.reindexed(perm)

        assert_array_equal(moved.vertices[moved.triangles], cube.vertices[cube.triangles])

    def test_concatenate(self, cube):
        """Test concatenated meshes offset triangle indices."""
        both = Mesh.concatenate([cube, cube])

        assert both.n_vertices == 16
        assert both.triangles.max() == 15

    def test_face_areas(self, cube):
        """Test the cube's faces sum to its surface area."""
        assert cube.face_areas.sum() == pytest.approx(6.0)

    def test_trimesh_view_round_trip(self, cube):
        """Test the trimesh view keeps vertex order and triangles."""
        tm = cube.as_trimesh

        back = Mesh.from_trimesh(tm, name="cube")

        assert_array_equal(back.vertices, cube.vertices)
        assert_array_equal(back.triangles, cube.triangles)
        assert tm.area == pytest.approx(6.0)


class TestSampleSurfacePoints:
    """Test area-weighted surface sampling."""

    def test_points_on_single_triangle(self):
        """Test every sample lies on the triangle."""
        tri = np.array([[0.1, 0.2, 0.3], [1.0, -0.5, 0.2], [0.3, 0.9, -0.4]])
        mesh = Mesh(tri, [[0, 1, 2]])

        pts = sample_surface_points(mesh, 100, seed=3).points

        normal = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        normal /= np.linalg.norm(normal)
        assert np.max(np.abs((pts - tri[0]) @ normal)) < 1e-9
        A = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
        coef, *_ = np.linalg.lstsq(A, (pts - tri[0]).T, rcond=None)
        assert np.all(coef >= -1e-9)
        assert np.all(coef.sum(axis=0) <= 1.0 + 1e-9)

    def test_area_weighting(self):
        """Test faces of area 1 and 3 are hit 1:3."""
        verts = [[0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 1], [3, 0, 1], [0, 2, 1]]
        mesh = Mesh(verts, [[0, 1, 2], [3, 4, 5]])

        pts = sample_surface_points(mesh, 10000, seed=0)
        counts = np.bincount(pts.face_index, minlength=2)

        assert chisquare(counts, [2500, 7500]).pvalue > 0.001

    def test_deterministic(self, cube):
        """Test equal seeds give equal samples."""
        a = sample_surface_points(cube, 50, seed=7)
        b = sample_surface_points(cube, 50, seed=7)

        assert_array_equal(a.points, b.points)

    def test_degenerate_surface(self):
        """Test zero-area meshes cannot be sampled."""
        mesh = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])

        with pytest.raises(GeometryError, match="degenerate surface"):
            sample_surface_points(mesh, 10)

    def test_sample_count_positive(self, cube):
        """Test n must be positive."""
        with pytest.raises(GeometryError):
            sample_surface_points(cube, 0)

    def test_random_rotation_is_valid(self, rng):
        """Test sampled rotations pass strict validation."""
        assert Pose(random_rotation(rng), np.zeros(3)).is_valid()
