import math

import numpy as np
import pytest

from meshdream import tensor as T
from meshdream.geometry import TriMesh, build_tet_grid, marching_tets, sphere_sdf
from meshdream.render import (CameraPose, downsample, eta_resize, project_points, rasterize, read_ppm,
                              view_projection, write_ppm)
from meshdream.tensor import Tensor, backward

from oracles import icosphere


def look_at_reference(eye, target, fov, near=0.1, far=100.0):
    """Textbook gluLookAt * gluPerspective, built without the library's helpers."""
    f = np.asarray(target, float) - eye
    f /= np.linalg.norm(f)
    s = np.cross(f, [0.0, 1.0, 0.0])
    s /= np.linalg.norm(s)
    u = np.cross(s, f)
    rot = np.eye(4)
    rot[0, :3], rot[1, :3], rot[2, :3] = s, u, -f
    trans = np.eye(4)
    trans[:3, 3] = -np.asarray(eye)
    c = 1.0 / math.tan(fov / 2)
    proj = np.zeros((4, 4))
    proj[0, 0] = proj[1, 1] = c
    proj[2, 2] = (far + near) / (near - far)
    proj[2, 3] = 2 * far * near / (near - far)
    proj[3, 2] = -1.0
    return proj @ rot @ trans


@pytest.fixture(scope="module")
def sphere():
    return icosphere(3, 0.5)


# -- camera and projection ------------------------------------------------
def test_origin_projects_to_center():
    cam = CameraPose.orbit(0.0, 0.0, math.radians(40), radius=2.0)
    assert np.allclose(cam.position, [0, 0, 2])
    px, _ = project_points(np.zeros((1, 3)), cam, 64)
    assert np.allclose(px[0], [32.0, 32.0], atol=1e-12)


def test_yaw_pi_mirrors_columns():
    fov = math.radians(40)
    a = CameraPose.orbit(0.0, 0.0, fov, radius=2.0)
    b = CameraPose.orbit(math.pi, 0.0, fov, radius=2.0)
    p = np.array([[0.3, 0.0, 0.0]])
    ca, cb = project_points(p, a, 64)[0][0, 0], project_points(p, b, 64)[0][0, 0]
    assert ca > 32 and cb < 32
    assert abs((ca - 32) + (cb - 32)) < 1e-9


def test_view_projection_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(20):
        yaw = rng.uniform(-math.pi, math.pi)
        pitch = math.radians(rng.uniform(-15, 45))
        fov = math.radians(rng.uniform(25, 45))
        cam = CameraPose.orbit(yaw, pitch, fov, radius=rng.uniform(1.5, 4.0))
        ref = look_at_reference(cam.position, [0, 0, 0], fov)
        assert np.abs(view_projection(cam) - ref).max() < 1e-9


def test_camera_pose_validation():
    with pytest.raises(ValueError):
        CameraPose(0, 0, 2, 0, 0, 0.0)
    with pytest.raises(ValueError):
        CameraPose(0, 0, 2, 0, math.pi / 2, 0.5)


# -- rasterization --------------------------------------------------------
def test_empty_mesh_gives_empty_buffers():
    empty = TriMesh(Tensor(np.zeros((0, 3))), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 2), dtype=np.int64))
    fb = rasterize(empty, CameraPose.orbit(0, 0, 0.7), 16)
    assert not fb.mask.any()
    assert np.all(np.isinf(fb.depth))
    assert not fb.normal_map.data.any()


def test_rejects_small_resolution(sphere):
    with pytest.raises(ValueError):
        rasterize(sphere, CameraPose.orbit(0, 0, 0.7), 4)


def test_sphere_mask_radius_matches_pinhole(sphere):
    fov = math.radians(40)
    fb = rasterize(sphere, CameraPose.orbit(0.3, 0.2, fov), 64)
    measured = math.sqrt(fb.mask.sum() / math.pi)
    expected = 32 * (0.5 / 2.5) / math.tan(fov / 2)
    assert abs(measured - expected) < 1.5


def test_mask_depth_consistency_and_normal_range(sphere):
    rng = np.random.default_rng(1)
    for _ in range(5):
        cam = CameraPose.orbit(rng.uniform(-3, 3), rng.uniform(-0.2, 0.7), rng.uniform(0.45, 0.8))
        fb = rasterize(sphere, cam, 32)
        assert np.array_equal(fb.mask == 1, np.isfinite(fb.depth))
        assert set(np.unique(fb.mask)) <= {0.0, 1.0}
        nm = fb.normal_map.data
        assert nm.min() >= 0 and nm.max() <= 1


def test_depth_is_distance_along_view(sphere):
    fb = rasterize(sphere, CameraPose.orbit(0, 0, 0.7), 64)
    # centre pixel sees the sphere's near pole at depth ~ 2.5 - 0.5
    assert abs(fb.depth[32, 32] - 2.0) < 0.01


def test_rotational_consistency():
    grid = build_tet_grid(20)
    mesh = marching_tets(grid, Tensor(sphere_sdf(grid.vertices, 0.5)), Tensor(np.zeros_like(grid.vertices)))
    for yaw in (0.0, 0.4, 1.1):
        a = rasterize(mesh, CameraPose.orbit(yaw, 0.3, 0.7), 64).mask.sum()
        b = rasterize(mesh, CameraPose.orbit(yaw + math.pi / 2, 0.3, 0.7), 64).mask.sum()
        assert abs(a - b) / a < 0.02


def test_deterministic(sphere):
    cam = CameraPose.orbit(0.9, 0.1, 0.6)
    a, b = rasterize(sphere, cam, 48), rasterize(sphere, cam, 48)
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.depth.tobytes() == b.depth.tobytes()
    assert a.normal_map.data.tobytes() == b.normal_map.data.tobytes()


def test_front_facing_normals_point_to_camera(sphere):
    cam = CameraPose.orbit(0.0, 0.0, 0.7)
    n = rasterize(sphere, cam, 64).normal_map.data[32, 32] * 2 - 1
    assert n[2] > 0.95


def test_nearest_triangle_wins():
    verts = np.array([[-1, -1, 0.0], [1, -1, 0], [0, 1, 0], [-1, -1, 0.5], [1, -1, 0.5], [0, 1, 0.5]])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    mesh = TriMesh(Tensor(verts), faces, np.zeros((6, 2), dtype=np.int64))
    fb = rasterize(mesh, CameraPose.orbit(0, 0, 0.7), 16)
    assert set(fb.coverage.faces) == {1}


def test_vertex_gradient_matches_finite_differences(sphere):
    cam = CameraPose.orbit(0.4, 0.3, 0.7)
    base = sphere.vertices.data

    def value(v):
        fb = rasterize(TriMesh(v, sphere.faces, sphere.source_edges), cam, 32)
        return T.reduce_mean(fb.normal_map), fb.coverage

    v = Tensor(base, requires_grad=True)
    out, cov = value(v)
    grad = backward(out)[v]
    # a vertex on the visible side whose neighbourhood covers pixels
    vid = int(cov.corner_ids[len(cov.corner_ids) // 2, 0])
    h = 1e-6
    errs = []
    for axis in range(3):
        plus, minus = base.copy(), base.copy()
        plus[vid, axis] += h
        minus[vid, axis] -= h
        fp, cp = value(Tensor(plus))
        fm, cm = value(Tensor(minus))
        assert np.array_equal(cp.faces, cov.faces) and np.array_equal(cm.faces, cov.faces)
        fd = (fp.item() - fm.item()) / (2 * h)
        errs.append(abs(fd - grad[vid, axis]) / max(abs(fd), abs(grad[vid, axis]), 1e-12))
    assert grad[vid].any()
    assert max(errs) < 1e-3


def test_attribute_gradient_flows():
    mesh = icosphere(1, 0.5)
    color = Tensor(np.full((mesh.num_vertices, 3), 0.5), requires_grad=True)
    fb = rasterize(mesh, CameraPose.orbit(0, 0, 0.7), 16, {"color": color})
    g = backward(T.reduce_sum(fb.attributes["color"]))[color]
    # each covered pixel's barycentrics sum to one
    assert abs(g.sum() - 3 * fb.mask.sum()) < 1e-9


# -- resizing and I/O -----------------------------------------------------
def test_eta_resize_examples():
    assert eta_resize(np.array([[1.0, 1.0], [0.0, 0.0]]), 1)[0, 0] == 0.5
    assert np.array_equal(eta_resize(np.ones((64, 64)), 8), np.ones((8, 8)))
    m = (np.random.default_rng(2).random((16, 16)) > 0.5).astype(float)
    assert np.array_equal(eta_resize(m, 16), m)
    assert eta_resize(m, 4).min() >= 0 and eta_resize(m, 4).max() <= 1


def test_eta_resize_rejects_non_divisor():
    with pytest.raises(ValueError):
        eta_resize(np.ones((64, 64)), 5)


def test_downsample_is_box_mean():
    img = np.arange(48.0).reshape(4, 4, 3)
    out = downsample(Tensor(img), 2).data
    assert np.allclose(out, img.reshape(2, 2, 2, 2, 3).mean(axis=(1, 3)))
    with pytest.raises(ValueError):
        downsample(Tensor(img), 3)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(3).integers(0, 256, size=(5, 7, 3)) / 255.0
    write_ppm(tmp_path / "x.ppm", img)
    back = read_ppm(tmp_path / "x.ppm")
    assert back.shape == (5, 7, 3)
    assert np.array_equal(back, np.round(img * 255).astype(np.uint8))
