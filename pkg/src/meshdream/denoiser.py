"""Frozen toy noise predictor standing in for a pretrained latent diffusion UNet.

Image tokens attend to a hashed text-token sequence (CLS first) in ``layers``
cross-attention blocks. Every attention projection accepts an optional
camera-guided adapter, and each block records the spatial attention map of
the image queries toward the CLS key.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .cglora import PROJECTIONS, lora_forward
from .losses import NU, normalize_attention
from .tensor import Tensor, ShapeError, broadcast_to, matmul, reshape, silu, softmax, sqrt, transpose


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule. Index 0 is the clean signal (alpha_bar = 1)."""

    t_max: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    @property
    def alphas_bar(self) -> np.ndarray:
        betas = np.linspace(self.beta_start, self.beta_end, self.t_max)
        return np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    def alpha(self, t: int) -> float:
        return float(np.sqrt(self.alphas_bar[t]))

    def sigma(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alphas_bar[t]))

    def weight(self, t: int) -> float:
        return self.sigma(t) ** 2

    def sample_t(self, rng: np.random.Generator, lo: float = 0.02, hi: float = 0.98) -> int:
        return int(rng.integers(int(lo * self.t_max), int(hi * self.t_max) + 1))


def add_noise(x, t: int, eps, schedule: NoiseSchedule):
    """``alpha_t x + sigma_t eps`` for tensors or arrays."""
    if tuple(np.shape(eps)) != tuple(np.shape(x.data if isinstance(x, Tensor) else x)):
        raise ShapeError("noise and signal shapes differ")
    a, s = schedule.alpha(t), schedule.sigma(t)
    if isinstance(x, Tensor):
        return x * a + Tensor(np.asarray(eps) * s)
    return a * np.asarray(x) + s * np.asarray(eps)


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------
def tokenize(prompt: str) -> list[str]:
    return re.findall(r"\w+", prompt.lower())


def direction_suffix(yaw: float) -> str:
    a = abs(math.remainder(yaw, 2 * math.pi))
    if a < math.pi / 4:
        return ", front view"
    if a < 3 * math.pi / 4:
        return ", side view"
    return ", back view"


@dataclass(frozen=True)
class TextEncoding:
    tokens: tuple[str, ...]
    features: np.ndarray   # (n + 1, d_txt), row 0 is CLS
    pooled: np.ndarray     # (d_txt,), mean of the word rows


@dataclass(frozen=True)
class TextEncoder:
    """Frozen hashed embeddings: each token maps to a seeded Gaussian vector."""

    d_txt: int = 64
    seed: int = 0

    def embed(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.normal(size=self.d_txt)

    def encode(self, prompt: str) -> TextEncoding:
        tokens = tokenize(prompt)
        if not tokens:
            raise ValueError("prompt has no tokens")
        rows = [self.embed("<|cls|>")] + [self.embed(t) for t in tokens]
        feats = np.stack(rows)
        return TextEncoding(tuple(tokens), feats, feats[1:].mean(axis=0))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DenoiserConfig:
    d: int = 32
    heads: int = 4
    layers: int = 3
    res: int = 16
    patch: int = 1
    d_txt: int = 64
    seed: int = 1234
    # softmax temperature divisor; sqrt(d) by default, sqrt(d / heads) is the per-head variant
    score_divisor: float | None = None
    nu: float = NU
    stop_minmax: bool = False
    # eps_hat = (x_t - blur(x_t)) / sigma_t + residual_gain * network(x_t); the
    # smoothing term stands in for an image prior, the network carries the
    # attention (and therefore the adapters). residual_gain=1, prior_radius=0
    # gives the bare network.
    prior_radius: int = 1
    residual_gain: float = 0.1
    t_max: int = 1000

    @property
    def grid(self) -> int:
        return self.res // self.patch

    @property
    def divisor(self) -> float:
        return self.score_divisor if self.score_divisor is not None else math.sqrt(self.d)


def box_blur_matrix(res: int, radius: int) -> np.ndarray:
    """(res^2, res^2) row-stochastic box filter with edge clamping."""
    idx = np.arange(res)
    one = np.zeros((res, res))
    for o in range(-radius, radius + 1):
        one[idx, np.clip(idx + o, 0, res - 1)] += 1.0
    one /= 2 * radius + 1
    return np.kron(one, one)


@dataclass
class AttentionRecord:
    layer: int
    heads: np.ndarray       # (H, h, w) per-head spatial softmax toward CLS
    raw: Tensor             # (h, w) head average
    normalized: Tensor      # (h, w) min-max normalized


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _rms_norm(x: Tensor) -> Tensor:
    ms = (x * x).mean(axis=1)
    inv = reshape(sqrt(ms + 1e-6), (-1, 1)).broadcast_to(x.shape)
    return x / inv


class Denoiser:
    """Seeded, frozen noise predictor. Weights never change after construction."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        self.config = config
        c = config
        if c.res % c.patch or c.d % c.heads:
            raise ValueError("res must divide by patch and d by heads")
        rng = np.random.default_rng(c.seed)
        pin = 3 * c.patch * c.patch
        n_tok = c.grid * c.grid

        def gauss(fan_in, shape, gain=1.0):
            return rng.normal(0.0, gain / math.sqrt(fan_in), size=shape)

        w = {
            "patch": gauss(pin, (pin, c.d)),
            "pos": rng.normal(0.0, 0.5, size=(n_tok, c.d)),
            "ctx": gauss(c.d_txt, (c.d_txt, c.d)),
            "out": gauss(c.d, (c.d, pin)),
        }
        for b in range(c.layers):
            for p in PROJECTIONS:
                w[f"b{b}.{p}"] = gauss(c.d, (c.d, c.d))
            w[f"b{b}.ff1"] = gauss(c.d, (c.d, 2 * c.d))
            w[f"b{b}.ff2"] = gauss(2 * c.d, (2 * c.d, c.d), gain=0.5)
        self._arrays = w
        self.weights = {k: Tensor(v, name=k) for k, v in w.items()}
        self.schedule = NoiseSchedule(c.t_max)
        self._blur = Tensor(box_blur_matrix(c.res, c.prior_radius)) if c.prior_radius > 0 else None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(self.weights[k].data.tobytes())
        return h.hexdigest()

    def with_tracked_weights(self) -> "Denoiser":
        """Copy whose weights are gradient-tracking leaves (for leak checks)."""
        twin = Denoiser.__new__(Denoiser)
        twin.config = self.config
        twin._arrays = self._arrays
        twin.schedule = self.schedule
        twin._blur = self._blur
        twin.weights = {k: Tensor(v, requires_grad=True, name=k) for k, v in self._arrays.items()}
        return twin

    # -- pieces ------------------------------------------------------------
    def _proj(self, x: Tensor, block: int, proj: str, adapters) -> Tensor:
        w = self.weights[f"b{block}.{proj}"]
        if adapters is None:
            return matmul(x, w)
        a_txt, a_cam, b = adapters[f"lora.{block}.{proj}"]
        return lora_forward(x, w, a_txt, a_cam, b)

    def _patchify(self, x: Tensor) -> Tensor:
        c = self.config
        g, p = c.grid, c.patch
        if p == 1:
            return reshape(x, (g * g, 3))
        x = reshape(x, (g, p, g, p * 3))
        x = transpose(x, (0, 2, 1, 3))
        return reshape(x, (g * g, p * p * 3))

    def _unpatchify(self, tokens: Tensor) -> Tensor:
        c = self.config
        g, p = c.grid, c.patch
        if p == 1:
            return reshape(tokens, (g, g, 3))
        x = reshape(tokens, (g, g, p, p * 3))
        x = transpose(x, (0, 2, 1, 3))
        return reshape(x, (c.res, c.res, 3))

    def predict_noise(self, x_t: Tensor, text: TextEncoding, t: int,
                      adapters: dict | None = None) -> tuple[Tensor, list[AttentionRecord]]:
        """Predicted noise shaped like ``x_t`` plus one attention record per block."""
        c = self.config
        if x_t.shape != (c.res, c.res, 3):
            raise ShapeError(f"denoiser expects ({c.res}, {c.res}, 3), got {x_t.shape}")
        if text.features.shape[1] != c.d_txt:
            raise ShapeError(f"text width {text.features.shape[1]} != d_txt {c.d_txt}")
        W = self.weights
        n = c.grid * c.grid
        H, dh = c.heads, c.d // c.heads
        n_txt = text.features.shape[0]

        h = matmul(self._patchify(x_t), W["patch"]) + W["pos"]
        h = h + Tensor(np.broadcast_to(timestep_embedding(t, c.d), (n, c.d)))
        ctx = matmul(Tensor(text.features), W["ctx"])

        records = []
        inv = 1.0 / c.divisor
        for b in range(c.layers):
            hn = _rms_norm(h)
            q = self._proj(hn, b, "q", adapters)
            k = self._proj(ctx, b, "k", adapters)
            v = self._proj(ctx, b, "v", adapters)
            qh = transpose(reshape(q, (n, H, dh)), (1, 0, 2))            # (H, n, dh)
            kh = transpose(reshape(k, (n_txt, H, dh)), (1, 2, 0))        # (H, dh, T)
            vh = transpose(reshape(v, (n_txt, H, dh)), (1, 0, 2))        # (H, T, dh)
            scores = matmul(qh, kh) * inv                                 # (H, n, T)

            cls_scores = reshape(scores[:, :, 0], (H, n))
            spatial = softmax(cls_scores, axis=1)                         # per head, over positions
            raw = reshape(spatial.mean(axis=0), (c.grid, c.grid))
            records.append(AttentionRecord(
                b, spatial.data.reshape(H, c.grid, c.grid), raw, normalize_attention(raw, c.nu, c.stop_minmax)))

            attn = softmax(scores, axis=2)
            mixed = reshape(transpose(matmul(attn, vh), (1, 0, 2)), (n, c.d))
            h = h + self._proj(mixed, b, "o", adapters)
            ff = matmul(silu(matmul(_rms_norm(h), W[f"b{b}.ff1"])), W[f"b{b}.ff2"])
            h = h + ff

        eps = self._unpatchify(matmul(_rms_norm(h), W["out"]))
        if self._blur is None:
            return eps * c.residual_gain if c.residual_gain != 1.0 else eps, records
        flat = reshape(x_t, (c.res * c.res, 3))
        detail = reshape(flat - matmul(self._blur, flat), (c.res, c.res, 3))
        sigma = max(self.schedule.sigma(min(max(t, 0), c.t_max)), 1e-3)
        return detail * (1.0 / sigma) + eps * c.residual_gain, records
