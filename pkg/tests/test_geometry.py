import numpy as np
import pytest

from spikefield.errors import InputError
from spikefield.geometry import (ScalarGrid, TriangleMesh, chamfer_distance,
                                 export_mesh, load_mesh, marching_cubes,
                                 nearest_distances, sample_density_grid,
                                 sample_mesh_surface)


def brute_force_chamfer(a, b):
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def sphere_field(pts):
    return np.maximum(0.0, 1.0 - np.linalg.norm(pts, axis=-1))


class TestSampleDensityGrid:
    def test_constant_field(self):
        g = sample_density_grid(lambda p: np.full(len(p), 2.5), 4,
                                ((-1, -1, -1), (1, 1, 1)))
        assert np.all(g.values == 2.5)

    def test_resolution_two_gives_box_corners(self):
        g = sample_density_grid(lambda p: p[:, 0] + 10 * p[:, 1] + 100 * p[:, 2],
                                2, ((0, 0, 0), (1, 1, 1)))
        assert g.values.shape == (2, 2, 2)
        assert g.values[0, 0, 0] == 0.0
        assert g.values[1, 1, 1] == 111.0

    def test_injected_analytic_field_is_exact(self):
        g = sample_density_grid(lambda p: np.linalg.norm(p, axis=-1), 9,
                                ((-1, -1, -1), (1, 1, 1)))
        axes = [np.linspace(-1, 1, 9)] * 3
        expected = np.sqrt(sum(v ** 2 for v in np.meshgrid(*axes, indexing="ij")))
        np.testing.assert_allclose(g.values, expected, atol=1e-12)

    def test_non_finite_density_names_point(self):
        def fn(p):
            out = np.ones(len(p))
            out[np.linalg.norm(p, axis=-1) < 0.1] = np.nan
            return out

        with pytest.raises(InputError, match="lattice point"):
            sample_density_grid(fn, 5, ((-1, -1, -1), (1, 1, 1)))


class TestMarchingCubes:
    def test_all_below_level_gives_empty_mesh(self):
        g = ScalarGrid(np.zeros((4, 4, 4)), (-1, -1, -1), (1, 1, 1))
        mesh = marching_cubes(g, 1.0)
        assert mesh.is_empty

    def test_sphere_vertices_near_analytic_radius(self):
        g = sample_density_grid(sphere_field, 64, ((-1, -1, -1), (1, 1, 1)))
        mesh = marching_cubes(g, 0.5)  # 1 - |x| = 0.5 at radius 0.5
        assert len(mesh.triangles) > 100
        radii = np.linalg.norm(mesh.vertices, axis=-1)
        voxel = g.spacing.max()
        assert np.abs(radii - 0.5).max() <= 1.5 * voxel

    def test_vertex_scalar_equals_level(self):
        rng = np.random.default_rng(0)
        vals = rng.uniform(0, 1, size=(8, 8, 8))
        g = ScalarGrid(vals, (0, 0, 0), (1, 1, 1))
        mesh = marching_cubes(g, 0.42)
        # every vertex lies on one lattice edge; linear interpolation of the
        # two endpoint values at the vertex must reproduce the level
        frac = (mesh.vertices - g.box_min) / g.spacing
        on_axis = np.abs(frac - np.round(frac)) > 1e-12
        assert (on_axis.sum(axis=1) <= 1).all()
        for v, off_mask in zip(frac, on_axis):
            if not off_mask.any():
                continue  # vertex exactly at a lattice point (t == 1)
            axis = int(np.argmax(off_mask))
            p0 = np.floor(v).astype(int)
            p1 = p0.copy()
            p1[axis] += 1
            t = v[axis] - p0[axis]
            interp = (1 - t) * vals[tuple(p0)] + t * vals[tuple(p1)]
            assert abs(interp - 0.42) < 1e-9

    def test_sign_flip_reverses_winding_only(self):
        g = sample_density_grid(sphere_field, 24, ((-1, -1, -1), (1, 1, 1)))
        mesh = marching_cubes(g, 0.5)
        g_neg = ScalarGrid(-g.values, g.box_min, g.box_max)
        mesh_neg = marching_cubes(g_neg, -0.5)
        np.testing.assert_allclose(mesh.vertices, mesh_neg.vertices, atol=1e-12)
        assert len(mesh.triangles) == len(mesh_neg.triangles)
        np.testing.assert_array_equal(mesh.triangles, mesh_neg.triangles[:, ::-1])

    def test_nested_level_sets(self):
        g = sample_density_grid(sphere_field, 48, ((-1, -1, -1), (1, 1, 1)))
        inner = marching_cubes(g, 0.6)   # radius 0.4
        outer = marching_cubes(g, 0.3)   # radius 0.7
        r_in = np.linalg.norm(inner.vertices, axis=-1)
        r_out = np.linalg.norm(outer.vertices, axis=-1)
        voxel = g.spacing.max()
        assert r_in.max() <= r_out.min() + voxel

    def test_non_finite_level_rejected(self):
        g = ScalarGrid(np.zeros((2, 2, 2)), (0, 0, 0), (1, 1, 1))
        with pytest.raises(InputError):
            marching_cubes(g, np.nan)


class TestMeshIO:
    def test_empty_mesh_round_trips(self, tmp_path):
        mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        for fmt in ("obj", "ply"):
            path = tmp_path / f"empty.{fmt}"
            export_mesh(mesh, path)
            loaded = load_mesh(path)
            assert loaded.is_empty

    def test_single_triangle_obj_layout(self, tmp_path):
        mesh = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.5]]),
                            np.array([[0, 1, 2]]))
        path = tmp_path / "tri.obj"
        export_mesh(mesh, path)
        lines = path.read_text().splitlines()
        assert sum(ln.startswith("v ") for ln in lines) == 3
        assert lines[-1] == "f 1 2 3"

    def test_ply_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        tris = np.array([sorted(rng.choice(17, size=3, replace=False))
                         for _ in range(9)])
        mesh = TriangleMesh(rng.standard_normal((17, 3)), tris)
        path_a = tmp_path / "a.ply"
        path_b = tmp_path / "b.ply"
        export_mesh(mesh, path_a)
        loaded = load_mesh(path_a)
        assert np.array_equal(mesh.vertices, loaded.vertices)
        assert np.array_equal(mesh.triangles, loaded.triangles)
        export_mesh(loaded, path_b)
        assert path_a.read_bytes() == path_b.read_bytes()

    def test_obj_round_trip_nine_significant_digits(self, tmp_path):
        rng = np.random.default_rng(2)
        verts = rng.standard_normal((25, 3)) * 10.0 ** rng.integers(-3, 3, (25, 1))
        mesh = TriangleMesh(verts, np.array([[0, 1, 2]]))
        path = tmp_path / "m.obj"
        export_mesh(mesh, path)
        loaded = load_mesh(path)
        np.testing.assert_allclose(loaded.vertices, mesh.vertices, rtol=1e-8)

    def test_unwritable_path_raises(self):
        mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(InputError, match="missing-dir"):
            export_mesh(mesh, "/missing-dir/out.obj")


class TestChamfer:
    def test_identical_sets(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((100, 3))
        assert chamfer_distance(a, a) == 0.0

    def test_single_pair(self):
        assert chamfer_distance(np.array([[0.0, 0, 0]]),
                                np.array([[1.0, 0, 0]])) == pytest.approx(1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a = rng.standard_normal((rng.integers(5, 400), 3))
            b = rng.standard_normal((rng.integers(5, 400), 3)) * rng.uniform(0.2, 2)
            fast = chamfer_distance(a, b)
            slow = brute_force_chamfer(a, b)
            assert fast == pytest.approx(slow, abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((50, 3))
        b = rng.standard_normal((70, 3))
        assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a),
                                                       abs=1e-15)

    def test_translation_invariant(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((60, 3))
        b = rng.standard_normal((40, 3))
        t = np.array([10.0, -3.0, 0.5])
        assert chamfer_distance(a + t, b + t) == pytest.approx(
            chamfer_distance(a, b), abs=1e-12)

    def test_empty_set_rejected(self):
        with pytest.raises(InputError):
            chamfer_distance(np.zeros((0, 3)), np.zeros((3, 3)))

    def test_queries_far_outside_point_cloud(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(-1, 1, (30, 3))
        b = a + np.array([100.0, 0, 0])
        exact = np.linalg.norm(b[:, None, :] - a[None, :, :], axis=-1).min(1)
        np.testing.assert_allclose(nearest_distances(b, a), exact, atol=1e-12)


class TestSurfaceSampling:
    def test_points_inside_single_triangle(self):
        mesh = TriangleMesh(np.array([[0, 0, 0], [2, 0, 0], [0, 3, 0]]),
                            np.array([[0, 1, 2]]))
        pts = sample_mesh_surface(mesh, 500, np.random.default_rng(8))
        assert np.all(pts[:, 2] == 0.0)
        # barycentric validity: x/2 + y/3 <= 1, x,y >= 0
        assert (pts[:, 0] >= 0).all() and (pts[:, 1] >= 0).all()
        assert (pts[:, 0] / 2 + pts[:, 1] / 3 <= 1 + 1e-12).all()

    def test_area_weighting_binomial(self):
        # areas 9:1 -> expected split 9000/1000 of 10000 within 3 sigma
        mesh = TriangleMesh(
            np.array([[0, 0, 0], [3, 0, 0], [0, 6, 0],
                      [10, 0, 0], [11, 0, 0], [10, 2, 0]]),
            np.array([[0, 1, 2], [3, 4, 5]]))
        pts = sample_mesh_surface(mesh, 10_000, np.random.default_rng(9))
        n_big = int((pts[:, 0] < 5).sum())
        sigma = np.sqrt(10_000 * 0.9 * 0.1)
        assert abs(n_big - 9000) <= 3 * sigma

    def test_deterministic_given_seed(self):
        mesh = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                            np.array([[0, 1, 2]]))
        a = sample_mesh_surface(mesh, 64, np.random.default_rng(10))
        b = sample_mesh_surface(mesh, 64, np.random.default_rng(10))
        assert np.array_equal(a, b)

    def test_empty_mesh_rejected(self):
        mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(InputError):
            sample_mesh_surface(mesh, 10, np.random.default_rng(0))
