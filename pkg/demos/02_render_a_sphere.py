"""Rasterize a marching-tets sphere and shade it under each lighting preset.

Writes a normal map plus one shaded PPM per (preset, roughness, metallic)
combination, and checks the silhouette against the pinhole prediction.

    python demos/02_render_a_sphere.py [outdir]
"""
import math
import sys
from pathlib import Path

import numpy as np

from meshdream.geometry import build_tet_grid, face_and_vertex_normals, marching_tets, sphere_sdf
from meshdream.material import PRESETS, constant_material, env_preset, shade
from meshdream.render import CameraPose, rasterize, write_ppm
from meshdream.tensor import Tensor, normalize_rows

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

grid = build_tet_grid(24)
mesh = marching_tets(grid, Tensor(sphere_sdf(grid.vertices, 0.5)), Tensor(np.zeros_like(grid.vertices)))
normals = face_and_vertex_normals(mesh)[1]
cam = CameraPose.orbit(yaw=0.6, pitch=math.radians(20), fov=math.radians(35))
fb = rasterize(mesh, cam, 128, {"normal": normals})

radius = math.sqrt(fb.mask.sum() / math.pi)
expected = 64 * math.tan(math.asin(0.5 / 2.5)) / math.tan(cam.fov / 2)
print(f"silhouette radius {radius:.2f} px, pinhole prediction {expected:.2f} px")
write_ppm(out / "sphere_normals.ppm", fb.normal_map.data)

cov = fb.coverage
points = cov.interpolate(mesh.vertices).data
n = normalize_rows(cov.interpolate(normals))
for preset in PRESETS:
    env = env_preset(preset)
    for rough, metal in ((0.9, 0.0), (0.3, 0.0), (0.3, 1.0)):
        mat = constant_material(cov.count, kd=(0.75, 0.45, 0.3), roughness=rough, metallic=metal)
        img = cov.to_image(shade(points, n, cam.position, mat, env)).data
        name = f"sphere_{preset}_r{rough}_m{metal:g}.ppm"
        write_ppm(out / name, img, srgb=True)
        print(f"{name}: mean linear radiance {img[fb.mask > 0].mean():.3f}")
