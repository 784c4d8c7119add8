import time

import numpy as np
import pytest

from partmesh.bvh import TriangleBVH, brute_force_closest


def random_mesh(n_faces, rng, scale=1.0):
    verts = rng.normal(size=(n_faces * 3, 3)) * scale
    faces = np.arange(n_faces * 3).reshape(n_faces, 3)
    return verts, faces


def grid_mesh(n=6):
    xs, ys = np.meshgrid(np.linspace(0, 1, n + 1), np.linspace(0, 1, n + 1))
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros((n + 1) ** 2)], axis=1)
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b = a + n + 1
            faces.append((a, b, a + 1))
            faces.append((a + 1, b, b + 1))
    return verts, np.array(faces, dtype=np.int64)


def test_matches_brute_force_on_random_soup():
    rng = np.random.default_rng(0)
    verts, faces = random_mesh(500, rng)
    queries = rng.normal(size=(1000, 3)) * 1.5
    bvh = TriangleBVH(verts, faces)
    f1, p1, b1, d1 = bvh.query(queries)
    f2, p2, b2, d2 = brute_force_closest(verts, faces, queries)
    np.testing.assert_allclose(d1, d2, atol=1e-9)
    np.testing.assert_allclose(p1, p2, atol=1e-9)
    # where distances tie between faces the indices may legitimately
    # differ only if the tie is numerically exact; require equality
    np.testing.assert_array_equal(f1, f2)


def test_matches_brute_force_on_structured_grid():
    verts, faces = grid_mesh(8)
    rng = np.random.default_rng(1)
    queries = rng.uniform(-0.5, 1.5, size=(400, 3))
    queries[:, 2] = rng.uniform(-0.3, 0.3, size=400)
    bvh = TriangleBVH(verts, faces)
    f1, p1, _, d1 = bvh.query(queries)
    f2, p2, _, d2 = brute_force_closest(verts, faces, queries)
    np.testing.assert_allclose(d1, d2, atol=1e-12)
    np.testing.assert_array_equal(f1, f2)


def test_tie_break_prefers_lower_face_index():
    # two identical triangles stacked; every query ties exactly
    verts = np.array([
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
    ])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    bvh = TriangleBVH(verts, faces)
    f, _, _, _ = bvh.query(np.array([[0.2, 0.2, 0.5], [5.0, 5.0, 5.0]]))
    np.testing.assert_array_equal(f, [0, 0])


def test_query_point_on_surface():
    verts, faces = grid_mesh(4)
    bvh = TriangleBVH(verts, faces)
    f, p, b, d = bvh.query(np.array([[0.3, 0.4, 0.0]]))
    assert d[0] < 1e-12
    np.testing.assert_allclose(p[0], [0.3, 0.4, 0.0], atol=1e-12)


def test_single_face_tree():
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    faces = np.array([[0, 1, 2]])
    bvh = TriangleBVH(verts, faces)
    f, p, b, d = bvh.query(np.array([[0.0, 0.0, 2.0]]))
    assert f[0] == 0
    assert abs(d[0] - 2.0) < 1e-12


def test_empty_tree_raises():
    bvh = TriangleBVH(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(ValueError):
        bvh.query(np.zeros((1, 3)))


def test_faster_than_brute_force_on_large_mesh():
    rng = np.random.default_rng(2)
    verts, faces = random_mesh(3000, rng)
    queries = rng.normal(size=(2000, 3))
    bvh = TriangleBVH(verts, faces)
    t0 = time.perf_counter()
    bvh.query(queries)
    t_bvh = time.perf_counter() - t0
    # generous bound; mostly a regression guard against degenerate trees
    assert t_bvh < 5.0
