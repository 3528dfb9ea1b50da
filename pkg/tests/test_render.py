"""Test sharp edges, rasterization, edge rendering and refiner inputs."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import ndimage

from specpose.errors import RenderError
from specpose.geometry import CameraIntrinsics, Mesh, Pose, random_rotation
from specpose.meshes import box, icosphere, unit_cube
from specpose.render import (
    NEAR_PLANE,
    RefinerInput,
    assemble_refiner_input,
    clip_triangle_near,
    crop_and_resize,
    disassemble_refiner_input,
    extract_sharp_edges,
    mask_bbox,
    rasterize,
    render_edges,
    render_view,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def _edge_keys(mesh, edges):
    """Geometric edges as sorted coordinate pairs, independent of vertex order."""
    segs = edges.segments(mesh)
    return {tuple(sorted((tuple(np.round(a, 9)), tuple(np.round(b, 9))))) for a, b in segs}


def _square(z, half=0.5):
    verts = [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
    return Mesh(verts, [[0, 1, 2], [0, 2, 3]])


def _floor():
    """Quad at y = 0.2 running from 1 m behind the camera to 5 m in front."""
    verts = [[-1.0, 0.2, -1.0], [1.0, 0.2, -1.0], [1.0, 0.2, 5.0], [-1.0, 0.2, 5.0]]
    return Mesh(verts, [[0, 1, 2], [0, 2, 3]], name="floor")


class TestSharpEdges:
    """Test dihedral-angle edge extraction."""

    def test_unit_cube(self, cube):
        """Test the cube has exactly its 12 geometric edges."""
        edges = extract_sharp_edges(cube, np.pi / 4)

        assert len(edges) == 12
        lengths = np.linalg.norm(np.diff(edges.segments(cube), axis=1)[:, 0], axis=1)
        assert_allclose(lengths, 1.0)

    def test_icosphere(self):
        """Test a fine sphere has no sharp edges."""
        assert len(extract_sharp_edges(icosphere(3), np.pi / 4)) == 0

    def test_coplanar_pair(self):
        """Test the shared edge of a flat quad is not sharp but its border is."""
        edges = extract_sharp_edges(_square(0.0))

        assert len(edges) == 4
        assert edges.boundary.all()
        assert (0, 2) not in {tuple(e) for e in edges.edges}

    def test_non_manifold(self):
        """Test an edge on three faces is rejected."""
        verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]]
        mesh = Mesh(verts, [[0, 1, 2], [0, 1, 3], [0, 1, 4]])

        with pytest.raises(RenderError, match="non-manifold edge"):
            extract_sharp_edges(mesh)

    def test_reindexing_invariance(self, cube, rng):
        """Test the geometric edge set ignores vertex order."""
        moved = cube.reindexed(rng.permutation(cube.n_vertices))

        assert _edge_keys(moved, extract_sharp_edges(moved)) == _edge_keys(cube, extract_sharp_edges(cube))

    def test_threshold_filters(self, cube):
        """Test a threshold above a right angle drops every cube edge."""
        assert len(extract_sharp_edges(cube, np.pi / 2 + 0.1)) == 0


class TestRasterize:
    """Test masks and depth buffers."""

    def test_square_area(self):
        """Test a square filling a known rectangle covers the analytic pixel count."""
        intr = CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
        # projects onto u, v in [24, 104]
        buffers = rasterize(_square(1.0, half=0.4), Pose.identity(), intr)

        expected = 80 * 80
        assert abs(int(buffers.mask.sum()) - expected) <= 0.02 * expected

    def test_behind_camera(self, cube, intr):
        """Test geometry behind the camera renders nothing."""
        buffers = rasterize(cube, Pose(np.eye(3), [0.0, 0.0, -5.0]), intr)

        assert not buffers.mask.any()
        assert np.all(np.isinf(buffers.depth))

    def test_z_buffer(self):
        """Test the nearer of two overlapping squares wins."""
        intr = CameraIntrinsics.centered(64, 40.0)
        mesh = Mesh.concatenate([_square(2.0, half=0.5), _square(1.0, half=0.1)])

        depth = rasterize(mesh, Pose.identity(), intr).depth

        assert depth[32, 32] == pytest.approx(1.0)
        assert depth[32, 25] == pytest.approx(2.0)

    @given(seeds)
    def test_mask_matches_depth(self, seed):
        """Test mask pixels are exactly the finite depth pixels."""
        rng = np.random.default_rng(seed)
        pose = Pose(random_rotation(rng), [0.0, 0.0, 3.0])

        buffers = rasterize(unit_cube(), pose, CameraIntrinsics.centered(64, 60.0))

        assert_array_equal(buffers.mask, np.isfinite(buffers.depth))

    def test_depth_matches_ray_intersection(self):
        """Test interior depths on a tilted triangle against ray casting."""
        intr = CameraIntrinsics.centered(64, 50.0)
        verts = np.array([[-1.0, -1.0, 2.0], [1.5, -1.0, 3.0], [0.0, 1.5, 2.5]])
        tri = Mesh(verts, [[0, 1, 2]])

        buffers = rasterize(tri, Pose.identity(), intr)

        normal = np.cross(verts[1] - verts[0], verts[2] - verts[0])
        interior = ndimage.binary_erosion(buffers.mask, iterations=2)
        rows, cols = np.nonzero(interior)
        for r, c in zip(rows, cols):
            ray = np.array([(c - intr.cx) / intr.fx, (r - intr.cy) / intr.fy, 1.0])
            z = (normal @ verts[0]) / (normal @ ray)
            assert buffers.depth[r, c] == pytest.approx(z, abs=1e-6)

    def test_integer_shift(self):
        """Test moving the principal point by whole pixels shifts the mask."""
        intr = CameraIntrinsics.centered(96, 80.0)
        moved_intr = CameraIntrinsics(80.0, 80.0, intr.cx + 5, intr.cy - 3, 96, 96)
        pose = Pose(random_rotation(np.random.default_rng(3)), [0.0, 0.0, 3.0])
        mesh = box(0.5, 0.4, 0.3)

        base = rasterize(mesh, pose, intr).mask
        shifted = rasterize(mesh, pose, moved_intr).mask

        assert_array_equal(shifted, np.roll(np.roll(base, 5, axis=1), -3, axis=0))

    def test_shared_edges_have_no_gaps(self):
        """Test the fill rule leaves no holes along a quad's diagonal."""
        intr = CameraIntrinsics.centered(64, 64.0)

        mask = rasterize(_square(1.0, half=0.3), Pose.identity(), intr).mask

        x0, y0, x1, y1 = mask_bbox(mask)
        assert mask[y0:y1, x0:x1].all()

    def test_floor_crossing_near_plane(self, intr):
        """Test a floor plane reaching behind the camera renders its visible part."""
        floor = _floor()

        buffers = rasterize(floor, Pose.identity(), intr)

        assert buffers.mask.any()
        assert not buffers.mask[: int(intr.cy) + 1].any()
        # row 400 looks down at y / z = 160 / fy, which meets y = 0.2 at z = 0.625
        assert buffers.depth[400, 320] == pytest.approx(0.625, rel=1e-6)
        assert buffers.depth[479, 320] == pytest.approx(0.2 * intr.fy / (479 - intr.cy), rel=1e-6)


class TestClipTriangleNear:
    """Test near-plane clipping of camera-frame triangles."""

    def test_in_front_unchanged(self):
        """Test a triangle fully in front comes back as is."""
        tri = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 2.0], [0.0, 1.0, 3.0]])

        assert_array_equal(clip_triangle_near(tri), tri[None])

    def test_fully_behind(self):
        """Test a triangle fully behind the near plane vanishes."""
        tri = np.array([[0.0, 0.0, -1.0], [1.0, 0.0, -2.0], [0.0, 1.0, 0.0]])

        assert clip_triangle_near(tri).shape == (0, 3, 3)

    @pytest.mark.parametrize(
        "tri,count,area",
        [
            # one vertex behind: the front part is a quad of area 4 - 1
            ([[0.0, 0.0, -1.0], [2.0, 0.0, 1.0], [-2.0, 0.0, 1.0]], 2, 3.0),
            # two vertices behind: the front part is the tip of area 4 / 4
            ([[0.0, 0.0, 1.0], [2.0, 0.0, -1.0], [-2.0, 0.0, -1.0]], 1, 1.0),
        ],
    )
    def test_partial(self, tri, count, area):
        """Test the kept pieces lie in front and cover the front area."""
        clipped = clip_triangle_near(np.array(tri))

        assert clipped.shape == (count, 3, 3)
        assert np.all(clipped[:, :, 2] >= NEAR_PLANE)
        cross = np.cross(clipped[:, 1] - clipped[:, 0], clipped[:, 2] - clipped[:, 0])
        assert 0.5 * np.linalg.norm(cross, axis=1).sum() == pytest.approx(area, rel=1e-5)


class TestRenderEdges:
    """Test visible sharp-edge rendering."""

    def test_cube_face_on(self, cube):
        """Test the near face outline is drawn and the far face is hidden."""
        intr = CameraIntrinsics.centered(128, 100.0)
        pose = Pose(np.eye(3), [0.0, 0.0, 4.0])
        buffers = render_view(cube, extract_sharp_edges(cube), pose, intr)
        image = buffers.edge_image

        def project(x, y, z):
            return int(round(intr.fx * x / z + intr.cx)), int(round(intr.fy * y / z + intr.cy))

        # near face at z = 3.5, far face at z = 4.5
        near_x0, near_y0 = project(-0.5, -0.5, 3.5)
        near_x1, _ = project(0.5, -0.5, 3.5)
        assert image[near_y0, near_x0 + 3 : near_x1 - 3].all()
        far_x0, far_y0 = project(-0.5, -0.5, 4.5)
        far_x1, _ = project(0.5, -0.5, 4.5)
        assert not image[far_y0, far_x0 + 3 : far_x1 - 3].any()

    def test_empty_edge_set(self, intr):
        """Test a smooth mesh draws nothing."""
        sphere = icosphere(3, radius=0.1)

        buffers = render_view(sphere, extract_sharp_edges(sphere), Pose(np.eye(3), [0, 0, 0.5]), intr)

        assert not buffers.edge_image.any()

    def test_behind_camera(self, cube, intr):
        """Test an object behind the camera draws no edges."""
        buffers = render_view(cube, extract_sharp_edges(cube), Pose(np.eye(3), [0.0, 0.0, -5.0]), intr)

        assert not buffers.edge_image.any()

    def test_mismatched_depth(self, cube, intr):
        """Test the depth buffer must match the image size."""
        edges = extract_sharp_edges(cube)

        with pytest.raises(RenderError, match="depth buffer"):
            render_edges(edges, cube, Pose(np.eye(3), [0, 0, 3.0]), intr, np.zeros((10, 10)))

    @given(seeds)
    def test_edges_near_mask(self, seed):
        """Test every edge pixel lies within 2 px of the mask."""
        rng = np.random.default_rng(seed)
        cube = unit_cube()
        pose = Pose(random_rotation(rng), [0.0, 0.0, 3.0])

        buffers = render_view(cube, extract_sharp_edges(cube), pose, CameraIntrinsics.centered(96, 80.0))

        near = ndimage.binary_dilation(buffers.mask, iterations=2)
        assert not np.any(buffers.edge_image & ~near)
        assert buffers.edge_image.any()

    def test_floor_edges_near_mask(self, intr):
        """Test edges of a plane crossing the near plane stay on its mask."""
        floor = _floor()

        buffers = render_view(floor, extract_sharp_edges(floor), Pose.identity(), intr)

        assert buffers.edge_image.any()
        near = ndimage.binary_dilation(buffers.mask, iterations=2)
        assert not np.any(buffers.edge_image & ~near)

    def test_line_width(self, cube):
        """Test wider lines cover more pixels."""
        intr = CameraIntrinsics.centered(96, 80.0)
        pose = Pose(random_rotation(np.random.default_rng(0)), [0.0, 0.0, 3.0])
        edges = extract_sharp_edges(cube)

        thin = render_view(cube, edges, pose, intr, width=1).edge_image
        thick = render_view(cube, edges, pose, intr, width=3).edge_image

        assert thick.sum() > thin.sum()
        assert np.all(thick[thin])


class TestMaskBbox:
    """Test bounding boxes of masks."""

    def test_exclusive_corner(self):
        """Test the upper corner is exclusive."""
        mask = np.zeros((10, 12), dtype=bool)
        mask[2:5, 3:9] = True

        assert mask_bbox(mask) == (3, 2, 9, 5)

    def test_empty(self):
        """Test an empty mask has no box."""
        assert mask_bbox(np.zeros((4, 4), dtype=bool)) is None


def _reference_bilinear(image, row, col):
    """Scalar bilinear sample with zeros outside the image."""
    h, w = image.shape
    r0, c0 = int(np.floor(row)), int(np.floor(col))
    fr, fc = row - r0, col - c0
    total = 0.0
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            r, c = r0 + dr, c0 + dc
            if 0 <= r < h and 0 <= c < w:
                total += wr * wc * image[r, c]
    return total


class TestCropAndResize:
    """Test the square crop and bilinear resize."""

    def test_identity_crop(self, rng):
        """Test a 240 x 240 box returns the region unchanged."""
        image = rng.random((300, 320))

        crop = crop_and_resize(image, (40, 30, 280, 270))

        assert_allclose(crop, image[30:270, 40:280], atol=1e-12)

    def test_downsample_constant(self):
        """Test a 480 x 480 box halves a constant region to the same constant."""
        image = np.full((500, 500, 3), 0.25)

        crop = crop_and_resize(image, (10, 10, 490, 490))

        assert crop.shape == (240, 240, 3)
        assert_allclose(crop, 0.25, atol=1e-12)

    def test_partially_out_of_frame(self, rng):
        """Test zero padding against a scalar reference resampler."""
        image = rng.random((60, 80))
        bbox = (-20, 30, 40, 90)

        crop = crop_and_resize(image, bbox, out_size=48)

        side = 60
        left = (bbox[0] + bbox[2] - 1) / 2 - side / 2 + 0.5
        top = (bbox[1] + bbox[3] - 1) / 2 - side / 2 + 0.5
        scale = side / 48
        for i in range(48):
            for j in range(48):
                r = top + (i + 0.5) * scale - 0.5
                c = left + (j + 0.5) * scale - 0.5
                assert crop[i, j] == pytest.approx(_reference_bilinear(image, r, c), abs=1e-12)

    def test_no_intersection(self):
        """Test boxes outside the image are rejected."""
        with pytest.raises(RenderError, match="does not intersect"):
            crop_and_resize(np.zeros((10, 10)), (20, 20, 30, 30))

    def test_empty_box(self):
        """Test a zero-area box is rejected."""
        with pytest.raises(RenderError, match="empty bounding box"):
            crop_and_resize(np.zeros((10, 10)), (2, 2, 2, 5))


class TestRefinerInput:
    """Test five-channel refiner inputs."""

    def test_all_zero(self):
        """Test zero inputs give a zero tensor."""
        tensor = assemble_refiner_input(
            np.zeros((240, 240, 3), dtype=np.uint8), np.zeros((240, 240)), np.zeros((240, 240))
        )

        assert tensor.channels.shape == (5, 240, 240)
        assert not tensor.channels.any()

    def test_mask_only(self):
        """Test a mask lands in channel 4 alone."""
        mask = np.zeros((240, 240), dtype=bool)
        mask[50:100, 60:90] = True

        tensor = assemble_refiner_input(np.zeros((240, 240, 3), dtype=np.uint8), np.zeros((240, 240)), mask)

        assert_array_equal(tensor.channels[4], mask)
        assert not tensor.channels[:4].any()

    def test_round_trip(self, rng):
        """Test disassembly recovers the inputs bit for bit."""
        rgb = rng.random((240, 240, 3)).astype(np.float32)
        edge = rng.random((240, 240)) > 0.9
        mask = rng.random((240, 240)) > 0.5

        out_rgb, out_edge, out_mask = disassemble_refiner_input(assemble_refiner_input(rgb, edge, mask))

        assert_array_equal(out_rgb, rgb)
        assert_array_equal(out_edge, edge)
        assert_array_equal(out_mask, mask)

    def test_uint8_scaling(self):
        """Test 8-bit images are divided by 255."""
        rgb = np.full((240, 240, 3), 255, dtype=np.uint8)

        tensor = assemble_refiner_input(rgb, np.zeros((240, 240)), np.zeros((240, 240)))

        assert np.all(tensor.channels[:3] == 1.0)

    def test_size_mismatch(self):
        """Test inputs must already be 240 x 240."""
        with pytest.raises(RenderError):
            assemble_refiner_input(np.zeros((200, 240, 3)), np.zeros((240, 240)), np.zeros((240, 240)))
        with pytest.raises(RenderError, match="edge"):
            assemble_refiner_input(np.zeros((240, 240, 3)), np.zeros((100, 240)), np.zeros((240, 240)))

    def test_rejects_non_binary_mask(self):
        """Test channels 3 and 4 must be binary."""
        channels = np.zeros((5, 8, 8), dtype=np.float32)
        channels[4, 0, 0] = 0.5

        with pytest.raises(RenderError, match="binary"):
            RefinerInput(channels)
