"""Appearance: hash-grid material field, environment lighting and a
Cook-Torrance/GGX reflectance integrated over a fixed directional quadrature."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import (Tensor, broadcast_to, clamp, concat, dot_rows, matmul, normalize_rows,
                     reshape, sigmoid, sqrt)

ROUGHNESS_FLOOR = 0.08
NORMAL_SCALE = 0.2
GUARD = 1e-7
LOBE_WIDENING = 1.6


# ---------------------------------------------------------------------------
# material field
# ---------------------------------------------------------------------------
@dataclass
class Material:
    kd: Tensor     # (P, 3) in [0, 1]
    kn: Tensor     # (P, 3) in [-1, 1]
    krm: Tensor    # (P, 2): roughness in [0.08, 1], metallic in [0, 1]

    @property
    def roughness(self) -> Tensor:
        return reshape(self.krm[:, 0], (-1,))

    @property
    def metallic(self) -> Tensor:
        return reshape(self.krm[:, 1], (-1,))


@dataclass
class MaterialField:
    """Single-hidden-layer MLP over coordinates plus hash-grid features, 8 sigmoid outputs."""

    encoding: nn.HashGridSpec = field(default_factory=nn.HashGridSpec)
    hidden: int = 32

    def init_params(self, rng: np.random.Generator) -> nn.Params:
        params = {"table": nn.init_hash_table(self.encoding, rng)}
        params.update(nn.init_mlp(rng, [3 + self.encoding.out_dim, self.hidden, 8]))
        return params

    def raw(self, leaves: dict[str, Tensor], points: np.ndarray) -> Tensor:
        points = np.clip(np.asarray(points, dtype=np.float64), -1.0, 1.0)
        plan = nn.hash_plan(self.encoding, points)
        feats = concat([Tensor(points), nn.hash_encode(leaves["table"], plan)], axis=1)
        return sigmoid(nn.mlp_forward(feats, leaves, depth=2))

    def sample(self, leaves: dict[str, Tensor], points: np.ndarray) -> Material:
        out = self.raw(leaves, points)
        kd = out[:, 0:3]
        kn = out[:, 3:6] * 2.0 - 1.0
        rough = out[:, 6:7] * (1.0 - ROUGHNESS_FLOOR) + ROUGHNESS_FLOOR
        return Material(kd, kn, concat([rough, out[:, 7:8]], axis=1))


def constant_material(n: int, kd=(0.8, 0.8, 0.8), roughness: float = 0.5, metallic: float = 0.0,
                      kn=(0.0, 0.0, 0.0)) -> Material:
    return Material(Tensor(np.tile(kd, (n, 1))), Tensor(np.tile(kn, (n, 1))),
                    Tensor(np.tile([roughness, metallic], (n, 1))))


# ---------------------------------------------------------------------------
# environment lighting
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class EnvMap:
    directions: np.ndarray   # (S, 3) unit
    radiance: np.ndarray     # (S, 3) >= 0
    weights: np.ndarray      # (S,) solid angle per sample

    def __post_init__(self):
        if np.any(self.radiance < 0):
            raise ValueError("environment radiance must be non-negative")

    @property
    def size(self) -> int:
        return len(self.directions)

    def check_solid_angle(self, tol: float = 1e-6) -> bool:
        return abs(self.weights.sum() - 4 * np.pi) <= tol

    def scaled(self, k: float) -> "EnvMap":
        return EnvMap(self.directions, self.radiance * k, self.weights)

    @classmethod
    def directional(cls, direction, radiance) -> "EnvMap":
        """A single delta light: unit solid-angle weight, so ``radiance`` acts as irradiance."""
        d = np.asarray(direction, dtype=np.float64)
        return cls((d / np.linalg.norm(d))[None], np.asarray(radiance, dtype=np.float64).reshape(1, 3),
                   np.ones(1))


def sphere_quadrature(samples: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Equal-area stratified directions: height bands times azimuth sectors."""
    bands = int(round(np.sqrt(samples)))
    while samples % bands:
        bands -= 1
    sectors = samples // bands
    z = 1.0 - (np.arange(bands) + 0.5) * (2.0 / bands)
    phi = (np.arange(sectors) + 0.5) * (2 * np.pi / sectors)
    zz, pp = np.meshgrid(z, phi, indexing="ij")
    # stagger alternate bands so sample columns do not line up
    pp = pp + (np.arange(bands)[:, None] % 2) * (np.pi / sectors)
    r = np.sqrt(1.0 - zz ** 2)
    # y is up
    dirs = np.stack([r * np.cos(pp), zz, r * np.sin(pp)], axis=-1).reshape(-1, 3)
    return dirs, np.full(len(dirs), 4 * np.pi / len(dirs))


def _lobe(dirs, axis, sharpness):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.exp(sharpness * (dirs @ axis - 1.0))


def env_preset(name: str, samples: int = 64) -> EnvMap:
    dirs, w = sphere_quadrature(samples)
    up = dirs[:, 1]
    if name == "uniform":
        rad = np.ones((len(dirs), 3))
    elif name == "three-point":
        key = _lobe(dirs, (1.0, 1.0, 1.0), 6.0)[:, None] * [2.4, 2.2, 2.0]
        fill = _lobe(dirs, (-1.0, 0.3, 1.0), 4.0)[:, None] * [0.6, 0.7, 0.9]
        rim = _lobe(dirs, (0.0, 0.6, -1.0), 6.0)[:, None] * [1.2, 1.2, 1.2]
        rad = key + fill + rim + 0.05
    elif name == "sunset":
        sky = np.clip(up, 0.0, 1.0)[:, None]
        horizon = np.exp(-8.0 * np.abs(up))[:, None]
        sun = _lobe(dirs, (1.0, 0.15, 0.0), 20.0)[:, None] * [4.0, 1.8, 0.6]
        rad = 0.15 + sky * [0.25, 0.35, 0.7] + horizon * [1.0, 0.45, 0.2] + sun
        rad = rad * np.where(up < -0.05, 0.3, 1.0)[:, None]
    else:
        raise ValueError(f"unknown environment preset {name!r} (uniform, three-point, sunset)")
    return EnvMap(dirs, np.asarray(rad, dtype=np.float64), w)


PRESETS = ("uniform", "three-point", "sunset")


def load_envmap(path: str | os.PathLike) -> EnvMap:
    """Read ``dx dy dz r g b dw`` lines."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 columns, got {len(vals)}")
            rows.append([float(v) for v in vals])
    table = np.array(rows).reshape(-1, 7)
    dirs = table[:, :3] / np.linalg.norm(table[:, :3], axis=1, keepdims=True)
    return EnvMap(dirs, table[:, 3:6], table[:, 6])


def save_envmap(path: str | os.PathLike, env: EnvMap) -> None:
    with open(path, "w") as fh:
        for d, l, w in zip(env.directions, env.radiance, env.weights):
            fh.write(" ".join(f"{x:.12g}" for x in (*d, *l, w)) + "\n")


def resolve_envmap(name_or_path: str, samples: int = 64) -> EnvMap:
    if name_or_path in PRESETS:
        return env_preset(name_or_path, samples)
    return load_envmap(name_or_path)


# ---------------------------------------------------------------------------
# reflectance
# ---------------------------------------------------------------------------
def perturb_normal(n_geom: Tensor, kn: Tensor) -> Tensor:
    """Offset unit normals by the normal-variation term and renormalize."""
    n = normalize_rows(n_geom + kn * NORMAL_SCALE)
    side = np.where(np.einsum("ij,ij->i", n.data, n_geom.data) < 0, -1.0, 1.0)
    if np.any(side < 0):
        n = n * Tensor(np.repeat(side[:, None], 3, axis=1))
    return n


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def brdf_terms(wi, wo, n, kd, krm) -> tuple[np.ndarray, np.ndarray]:
    """Diffuse and specular parts of the reflectance on plain arrays (broadcasting)."""
    wi, wo, n = (np.asarray(x, dtype=np.float64) for x in (wi, wo, n))
    kd, krm = np.asarray(kd, dtype=np.float64), np.asarray(krm, dtype=np.float64)
    rough, metal = krm[..., 0:1], krm[..., 1:2]
    alpha = rough ** 2
    a2 = alpha ** 2
    nl = np.clip(np.sum(n * wi, axis=-1, keepdims=True), 0.0, None)
    nv = np.maximum(np.sum(n * wo, axis=-1, keepdims=True), GUARD)
    h = _normalize(wi + wo)
    nh = np.sum(n * h, axis=-1, keepdims=True)
    vh = np.sum(wo * h, axis=-1, keepdims=True)
    d = a2 / (np.pi * (nh ** 2 * (a2 - 1.0) + 1.0) ** 2)

    def g1(x):
        return 2.0 * x / (x + np.sqrt(a2 + (1.0 - a2) * x * x))

    g = g1(nl) * g1(nv)
    f0 = 0.04 * (1.0 - metal) + kd * metal
    fres = f0 + (1.0 - f0) * (1.0 - vh) ** 5
    diffuse = (1.0 - metal) * kd / np.pi
    specular = d * g * fres / np.maximum(4.0 * nl * nv, GUARD)
    return diffuse * np.ones_like(specular), specular


def brdf(wi, wo, n, kd, krm) -> np.ndarray:
    d, s = brdf_terms(wi, wo, n, kd, krm)
    return d + s


def quadrature_alpha(env: EnvMap) -> float:
    """Smallest GGX width the light quadrature resolves; 0 for delta lights."""
    if not env.check_solid_angle():
        return 0.0
    return LOBE_WIDENING * float(np.sqrt(4 * np.pi / env.size))


def shade(points: np.ndarray, normals: Tensor, eye: np.ndarray, material: Material, env: EnvMap,
          specular: bool = True, min_alpha: float | None = None) -> Tensor:
    """Outgoing radiance per point: sum over light samples of L * f * max(0, w_i . n) * dw.

    ``normals`` are unit shading normals (P, 3); ``eye`` is the camera
    position. Everything the sum needs per (point, light) pair is reduced to
    matrix products with the (S, 3) radiance table, so no (P, S, 3)
    intermediates are formed.

    GGX widths are widened in quadrature by ``min_alpha`` (default
    :func:`quadrature_alpha`) so lobes narrower than the light sampling do not
    alias into hot spots.
    """
    if min_alpha is None:
        min_alpha = quadrature_alpha(env)
    P = normals.shape[0]
    S = env.size
    wo = _normalize(np.asarray(eye)[None, :] - points)
    ldirs = env.directions
    lw = Tensor(env.radiance * env.weights[:, None])                  # (S, 3)

    nl = matmul(normals, Tensor(ldirs.T))                             # (P, S)
    cos_pos = clamp(nl, 0.0)
    kd, rough, metal = material.kd, material.roughness, material.metallic

    def col(x):   # (P,) -> (P, 3)
        return broadcast_to(reshape(x, (-1, 1)), (P, 3))

    diffuse = col(1.0 - metal) * kd * (1.0 / np.pi)
    radiance = diffuse * matmul(cos_pos, lw)
    if not specular:
        return radiance

    nv = clamp(dot_rows(normals, Tensor(wo)), GUARD)                  # (P,)
    lv = wo @ ldirs.T                                                 # (P, S) constant
    hl = np.sqrt(np.maximum(2.0 + 2.0 * lv, GUARD))
    vh = (1.0 + lv) / hl
    schlick = Tensor((1.0 - np.clip(vh, 0.0, 1.0)) ** 5)

    def wide(x):  # (P,) -> (P, S)
        return broadcast_to(reshape(x, (-1, 1)), (P, S))

    nv_w = wide(nv)
    nh = (nl + nv_w) / Tensor(hl)
    alpha = rough * rough
    a2 = wide(alpha * alpha + min_alpha ** 2)
    dist = a2 / ((nh * nh * (a2 - 1.0) + 1.0) ** 2 * np.pi)
    g1_l = cos_pos * 2.0 / (cos_pos + sqrt(a2 + (1.0 - a2) * cos_pos * cos_pos))
    g1_v = nv_w * 2.0 / (nv_w + sqrt(a2 + (1.0 - a2) * nv_w * nv_w))
    denom = clamp(cos_pos * nv_w * 4.0, GUARD)
    x = cos_pos * dist * g1_l * g1_v / denom                          # (P, S)
    f0 = col(1.0 - metal) * 0.04 + kd * col(metal)
    spec = f0 * matmul(x, lw) + (1.0 - f0) * matmul(x * schlick, lw)
    return radiance + spec
