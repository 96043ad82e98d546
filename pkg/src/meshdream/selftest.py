"""Quick oracle checks run by ``meshdream selftest``.

Each check is small enough that the whole suite finishes in a few seconds;
the test suite carries the exhaustive versions.
"""
from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import tensor as T
from .cglora import CameraEncoder, CgLoraSpec, build_adapter_set, init_adapters, lora_forward
from .denoiser import Denoiser, DenoiserConfig, TextEncoder
from .geometry import build_tet_grid, euler_characteristic, is_watertight, marching_tets, sphere_sdf
from .losses import ama_loss, normalize_attention, sds_surrogate
from .material import EnvMap, brdf, constant_material, shade
from .nn import as_leaves
from .render import CameraPose, rasterize
from .tensor import Tensor


def check_gradients() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    cases = [
        (lambda a, b: T.reduce_sum(T.matmul(a, b) * T.matmul(a, b)), [(3, 4), (4, 2)]),
        (lambda a: T.reduce_sum(T.softmax(a, axis=1) * T.exp(a)), [(3, 5)]),
        (lambda a: T.reduce_sum(T.silu(a) * T.sigmoid(a) + T.tanh(a)), [(6,)]),
        (lambda a: T.reduce_max(a) - T.reduce_min(a) + T.reduce_mean(T.sqrt(a * a + 1.0)), [(7,)]),
    ]
    worst = max(T.gradcheck(fn, [rng.normal(size=s) for s in shapes]) for fn, shapes in cases)
    return worst < 1e-5, f"max rel err {worst:.2e}"


def check_lora_identity() -> tuple[bool, str]:
    cfg = DenoiserConfig(d=16, heads=2, layers=2, res=8, d_txt=16)
    net = Denoiser(cfg)
    spec = CgLoraSpec(d=16, d_txt=16, d_cam=16)
    rng = np.random.default_rng(1)
    params = init_adapters(spec, rng, cfg.layers)
    enc = CameraEncoder(16, 16)
    params.update(enc.init_params(rng))
    leaves = as_leaves(params, False)
    text = TextEncoder(16).encode("a red apple")
    cam = CameraPose.orbit(0.4, 0.2, 0.6)
    adapters = build_adapter_set(Tensor(text.pooled), enc(leaves, cam), leaves, spec, cfg.layers)
    x = Tensor(rng.normal(size=(8, 8, 3)))
    a, _ = net.predict_noise(x, text, 300, adapters)
    b, _ = net.predict_noise(x, text, 300)
    return bool(np.array_equal(a.data, b.data)), "B = 0 output equals base output"


def check_lora_equivalence() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(5, 8)), rng.normal(size=(8, 8))
    at, ac, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2)), rng.normal(size=(4, 8))
    got = lora_forward(Tensor(x), Tensor(w), Tensor(at), Tensor(ac), Tensor(b)).data
    want = x @ (w + np.concatenate([at, ac], axis=1) @ b)
    err = float(np.abs(got - want).max())
    return err < 1e-12, f"max abs diff {err:.1e}"


def check_attention_normalization() -> tuple[bool, str]:
    raw = Tensor(np.random.default_rng(3).random((4, 4)))
    a = normalize_attention(raw).data
    flat = normalize_attention(Tensor(np.full((4, 4), 0.25))).data
    ok = a.min() == 0.0 and a.max() < 1.0 and not flat.any()
    return ok, f"min {a.min()}, max {a.max():.9f}"


def check_ama_bounds() -> tuple[bool, str]:
    ones = [Tensor(np.ones((4, 4)))] * 2
    hi, _ = ama_loss(ones, [np.zeros((4, 4))] * 2)
    lo, _ = ama_loss(ones, [np.ones((4, 4))] * 2)
    return hi.item() == 1.0 and lo.item() == 0.0, f"extremes {hi.item()}, {lo.item()}"


def check_sds_fixed_point() -> tuple[bool, str]:
    img = Tensor(np.random.default_rng(4).random((4, 4, 3)), requires_grad=True)
    eps = np.random.default_rng(5).normal(size=(4, 4, 3))
    g = T.backward(sds_surrogate(img, eps, eps, 0.7))[img]
    return not g.any(), "eps_hat = eps gives zero gradient"


def check_marching_tets() -> tuple[bool, str]:
    details, ok = [], True
    for res in (8, 16):
        grid = build_tet_grid(res)
        mesh = marching_tets(grid, Tensor(sphere_sdf(grid.vertices)), Tensor(np.zeros_like(grid.vertices)))
        chi = euler_characteristic(mesh)
        ok &= is_watertight(mesh) and chi == 2
        details.append(f"res {res}: chi={chi}")
    return ok, ", ".join(details)


def check_projection() -> tuple[bool, str]:
    grid = build_tet_grid(24)
    mesh = marching_tets(grid, Tensor(sphere_sdf(grid.vertices)), Tensor(np.zeros_like(grid.vertices)))
    cam = CameraPose.orbit(0.7, 0.3, math.radians(35))
    fb = rasterize(mesh, cam, 64)
    measured = math.sqrt(fb.mask.sum() / math.pi)
    angular = math.asin(0.5 / 2.5)
    expected = 32.0 * math.tan(angular) / math.tan(cam.fov / 2)
    return abs(measured - expected) < 1.5, f"radius {measured:.2f} px vs {expected:.2f} px"


def check_lambert() -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    n = rng.normal(size=(20, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    light = np.array([0.0, 1.0, 0.0])
    env = EnvMap.directional(light, [2.0, 1.5, 1.0])
    mat = constant_material(20, kd=(0.6, 0.5, 0.4), roughness=1.0)
    got = shade(np.zeros((20, 3)), Tensor(n), np.array([0.0, 0.0, 3.0]), mat, env, specular=False).data
    want = np.array([0.6, 0.5, 0.4]) * np.array([2.0, 1.5, 1.0]) * np.clip(n @ light, 0, None)[:, None] / np.pi
    err = float(np.abs(got - want).max())
    return err < 1e-9, f"max abs diff {err:.1e}"


def check_reciprocity() -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    def unit(k):
        v = rng.normal(size=(k, 3))
        v[:, 1] = np.abs(v[:, 1])
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    wi, wo = unit(1000), unit(1000)
    n = np.tile([0.0, 1.0, 0.0], (1000, 1))
    kd, krm = rng.random((1000, 3)), np.column_stack([0.08 + 0.92 * rng.random(1000), rng.random(1000)])
    err = float(np.abs(brdf(wi, wo, n, kd, krm) - brdf(wo, wi, n, kd, krm)).max())
    return err < 1e-9, f"max abs diff {err:.1e}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("autodiff gradients", check_gradients),
    ("lora identity at init", check_lora_identity),
    ("lora concatenated forward", check_lora_equivalence),
    ("attention normalization", check_attention_normalization),
    ("ama bounds", check_ama_bounds),
    ("sds fixed point", check_sds_fixed_point),
    ("marching tets closed sphere", check_marching_tets),
    ("pinhole projection", check_projection),
    ("lambert shading", check_lambert),
    ("brdf reciprocity", check_reciprocity),
]


def run_all(emit: Callable[[str], None] = print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        emit(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({time.perf_counter() - start:.2f}s)")
    return all_ok
