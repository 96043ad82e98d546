"""Small neural-field building blocks shared by the geometry and material fields.

Parameters live in plain ``dict[str, np.ndarray]`` containers. A forward pass
wraps them in leaf tensors, which keeps optimizer steps, checkpoints and
finite-difference checks free of hidden state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_op, matmul, silu

Params = dict[str, np.ndarray]

_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashGridSpec:
    """Multiresolution hash-grid layout over the cube [-1, 1]^3."""

    levels: int = 4
    features: int = 2
    log2_table: int = 12
    base_resolution: int = 4
    growth: float = 2.0

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    def resolutions(self) -> list[int]:
        return [int(np.floor(self.base_resolution * self.growth ** l)) for l in range(self.levels)]


@dataclass(frozen=True)
class HashPlan:
    """Precomputed corner rows and trilinear weights for a fixed point set."""

    rows: np.ndarray     # (N, levels, 8) flat indices into the (levels*T, F) table
    weights: np.ndarray  # (N, levels, 8)


def hash_plan(spec: HashGridSpec, points: np.ndarray) -> HashPlan:
    pts = np.clip(np.asarray(points, dtype=np.float64), -1.0, 1.0)
    u = (pts + 1.0) * 0.5
    n = len(pts)
    T = spec.table_size
    rows = np.empty((n, spec.levels, 8), dtype=np.int64)
    weights = np.empty((n, spec.levels, 8))
    for level, res in enumerate(spec.resolutions()):
        pos = u * res
        base = np.minimum(np.floor(pos).astype(np.int64), res - 1)
        frac = pos - base
        dense = (res + 1) ** 3 <= T
        for c in range(8):
            off = np.array([(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1])
            corner = base + off
            w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
            if dense:
                idx = corner[:, 0] + (res + 1) * (corner[:, 1] + (res + 1) * corner[:, 2])
            else:
                cu = corner.astype(np.uint64)
                h = cu[:, 0] * np.uint64(_PRIMES[0])
                h ^= cu[:, 1] * np.uint64(_PRIMES[1])
                h ^= cu[:, 2] * np.uint64(_PRIMES[2])
                idx = (h % np.uint64(T)).astype(np.int64)
            rows[:, level, c] = level * T + idx
            weights[:, level, c] = w
    return HashPlan(rows, weights)


def hash_encode(table: Tensor, plan: HashPlan) -> Tensor:
    """Trilinearly interpolated hash-grid features, shape (N, levels*features).

    ``table`` has shape (levels, T, F). Only the table receives gradients.
    """
    levels, T, F = table.shape
    flat = table.data.reshape(levels * T, F)
    gathered = flat[plan.rows]                                 # (N, L, 8, F)
    out = np.einsum("nlcf,nlc->nlf", gathered, plan.weights).reshape(len(plan.rows), levels * F)
    rows = plan.rows.reshape(-1)
    w = plan.weights

    def vjp(g):
        g = g.reshape(len(w), levels, 1, F) * w[..., None]       # (N, L, 8, F)
        g = g.reshape(-1, F)
        grad = np.empty((levels * T, F))
        for f in range(F):
            grad[:, f] = np.bincount(rows, weights=g[:, f], minlength=levels * T)
        return (grad.reshape(levels, T, F),)

    return make_op(out, (table,), vjp)


def init_hash_table(spec: HashGridSpec, rng: np.random.Generator, scale: float = 1e-4) -> np.ndarray:
    return rng.uniform(-scale, scale, size=(spec.levels, spec.table_size, spec.features))


def init_mlp(rng: np.random.Generator, sizes: list[int], prefix: str = "") -> Params:
    params: Params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}w{i}"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out))
        params[f"{prefix}b{i}"] = np.zeros(fan_out)
    return params


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = y + b.broadcast_to(y.shape)
    return y


def mlp_forward(x: Tensor, leaves: dict[str, Tensor], depth: int, prefix: str = "") -> Tensor:
    """Dense layers with SiLU between them and a linear output."""
    h = x
    for i in range(depth):
        h = linear(h, leaves[f"{prefix}w{i}"], leaves[f"{prefix}b{i}"])
        if i < depth - 1:
            h = silu(h)
    return h


def as_leaves(params: Params, requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


class Adam:
    """Adam over named parameter arrays.

    ``step`` returns fresh arrays and never mutates its inputs, so parameter
    snapshots taken before a step stay valid.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-15):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: Params = {}
        self.v: Params = {}
        self.t = 0

    def step(self, params: Params, grads: dict[str, np.ndarray]) -> Params:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = {}
        for name, value in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(value)
            m = b1 * self.m.get(name, np.zeros_like(value)) + (1.0 - b1) * g
            v = b2 * self.v.get(name, np.zeros_like(value)) + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state_arrays(self, prefix: str) -> Params:
        arrays = {f"{prefix}.m.{k}": v for k, v in self.m.items()}
        arrays.update({f"{prefix}.v.{k}": v for k, v in self.v.items()})
        return arrays

    def load_arrays(self, prefix: str, arrays: Params, t: int) -> None:
        self.t = t
        self.m = {k[len(prefix) + 3:]: v for k, v in arrays.items() if k.startswith(f"{prefix}.m.")}
        self.v = {k[len(prefix) + 3:]: v for k, v in arrays.items() if k.startswith(f"{prefix}.v.")}
