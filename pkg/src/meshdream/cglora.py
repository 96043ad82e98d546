"""Camera-guided low-rank adapters.

The down-projection of each adapter is not a free parameter: it is generated
every step from a pooled text feature and an encoded camera pose,

    A_txt = reshape(t @ U_txt @ V_txt),   A_cam = reshape(c @ U_cam @ V_cam),

and applied as ``y = x W + [x A_txt, x A_cam] B`` with ``B`` zero at start.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .render import CameraPose
from .tensor import Tensor, ShapeError, concat, matmul, reshape

PROJECTIONS = ("q", "k", "v", "o")


def camera_features(pose: CameraPose) -> np.ndarray:
    """Position plus (sin, cos) of yaw, pitch and fov: 9 values."""
    return np.array([
        pose.x, pose.y, pose.z,
        math.sin(pose.yaw), math.cos(pose.yaw),
        math.sin(pose.pitch), math.cos(pose.pitch),
        math.sin(pose.fov), math.cos(pose.fov),
    ])


@dataclass(frozen=True)
class CameraEncoder:
    d_cam: int = 64
    hidden: int = 64

    def init_params(self, rng: np.random.Generator) -> nn.Params:
        return nn.init_mlp(rng, [9, self.hidden, self.hidden, self.d_cam], prefix="pos.")

    def __call__(self, leaves: dict[str, Tensor], pose: CameraPose) -> Tensor:
        x = Tensor(camera_features(pose)[None, :])
        return nn.mlp_forward(x, leaves, depth=3, prefix="pos.")        # (1, d_cam)


@dataclass(frozen=True)
class CgLoraSpec:
    d: int = 32
    d_txt: int = 64
    d_cam: int = 64
    rank: int = 4
    gen_rank: int = 4

    def __post_init__(self):
        if self.rank % 2:
            raise ValueError("adapter rank must be even")

    @property
    def half(self) -> int:
        return self.rank // 2

    def param_count(self) -> int:
        r2 = self.d * self.half
        return self.gen_rank * (self.d_txt + self.d_cam) + 2 * self.gen_rank * r2 + self.rank * self.d

    def init_layer(self, rng: np.random.Generator, prefix: str) -> nn.Params:
        r2 = self.d * self.half
        return {
            f"{prefix}.U_txt": rng.normal(0.0, 1.0 / math.sqrt(self.d_txt), (self.d_txt, self.gen_rank)),
            f"{prefix}.V_txt": rng.normal(0.0, 1.0 / math.sqrt(self.gen_rank * self.d), (self.gen_rank, r2)),
            f"{prefix}.U_cam": rng.normal(0.0, 1.0 / math.sqrt(self.d_cam), (self.d_cam, self.gen_rank)),
            f"{prefix}.V_cam": rng.normal(0.0, 1.0 / math.sqrt(self.gen_rank * self.d), (self.gen_rank, r2)),
            f"{prefix}.B": np.zeros((self.rank, self.d)),
        }


def layer_names(num_blocks: int) -> list[str]:
    return [f"lora.{b}.{p}" for b in range(num_blocks) for p in PROJECTIONS]


def init_adapters(spec: CgLoraSpec, rng: np.random.Generator, num_blocks: int) -> nn.Params:
    params: nn.Params = {}
    for name in layer_names(num_blocks):
        params.update(spec.init_layer(rng, name))
    return params


def generate_adapters(t: Tensor, c: Tensor, leaves: dict[str, Tensor], prefix: str,
                      spec: CgLoraSpec) -> tuple[Tensor, Tensor]:
    """Down-projections (d, r/2) from text feature ``t`` and camera feature ``c``.

    The flat ``d * r/2`` product is reshaped row-major.
    """
    t = reshape(t, (1, -1)) if t.ndim == 1 else t
    c = reshape(c, (1, -1)) if c.ndim == 1 else c
    if t.shape[1] != spec.d_txt or c.shape[1] != spec.d_cam:
        raise ShapeError(f"feature widths {t.shape[1]}, {c.shape[1]} do not match "
                         f"d_txt={spec.d_txt}, d_cam={spec.d_cam}")
    a_txt = matmul(matmul(t, leaves[f"{prefix}.U_txt"]), leaves[f"{prefix}.V_txt"])
    a_cam = matmul(matmul(c, leaves[f"{prefix}.U_cam"]), leaves[f"{prefix}.V_cam"])
    return reshape(a_txt, (spec.d, spec.half)), reshape(a_cam, (spec.d, spec.half))


def lora_forward(x: Tensor, w: Tensor, a_txt: Tensor, a_cam: Tensor, b: Tensor) -> Tensor:
    """``x W + [x A_txt, x A_cam] B``."""
    if a_txt.shape != a_cam.shape or a_txt.shape[0] != x.shape[1] or b.shape != (2 * a_txt.shape[1], w.shape[1]):
        raise ShapeError(f"lora_forward: x {x.shape}, W {w.shape}, A_txt {a_txt.shape}, "
                         f"A_cam {a_cam.shape}, B {b.shape}")
    low = concat([matmul(x, a_txt), matmul(x, a_cam)], axis=1)
    return matmul(x, w) + matmul(low, b)


def build_adapter_set(t: Tensor, c: Tensor, leaves: dict[str, Tensor], spec: CgLoraSpec,
                      num_blocks: int) -> dict[str, tuple[Tensor, Tensor, Tensor]]:
    """Generate ``(A_txt, A_cam, B)`` for every attention projection."""
    out = {}
    for name in layer_names(num_blocks):
        a_txt, a_cam = generate_adapters(t, c, leaves, name, spec)
        out[name] = (a_txt, a_cam, leaves[f"{name}.B"])
    return out
