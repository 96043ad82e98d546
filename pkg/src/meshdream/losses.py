"""Training signals: ellipsoid MSE, score-distillation surrogate and
attention-mask alignment."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, ShapeError, broadcast_to, reduce_max, reduce_min

NU = 1e-6


def mse_init_loss(predictions: Tensor, targets) -> Tensor:
    """Mean squared difference between predicted and target SDF values."""
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.size == 0 or targets.size == 0:
        raise ValueError("mse_init_loss needs at least one sample")
    if predictions.shape != targets.shape:
        raise ShapeError(f"predictions {predictions.shape} vs targets {targets.shape}")
    diff = predictions - Tensor(targets)
    return (diff * diff).mean()


def sds_gradient(eps_pred: np.ndarray, eps: np.ndarray, weight: float) -> np.ndarray:
    """Per-pixel ``w(t) (eps_pred - eps)`` with both noises taken as constants."""
    eps_pred, eps = np.asarray(eps_pred), np.asarray(eps)
    if eps_pred.shape != eps.shape:
        raise ShapeError(f"eps_pred {eps_pred.shape} vs eps {eps.shape}")
    return weight * (eps_pred - eps)


def sds_surrogate(image: Tensor, eps_pred, eps, weight: float) -> Tensor:
    """Scalar whose gradient w.r.t. ``image`` is exactly ``w(t) (eps_pred - eps)``.

    ``eps_pred`` may be a tensor; only its value is used, so no gradient ever
    reaches the denoiser.
    """
    eps_pred = eps_pred.data if isinstance(eps_pred, Tensor) else eps_pred
    grad = sds_gradient(eps_pred, eps, weight)
    if grad.shape != image.shape:
        raise ShapeError(f"rendered image {image.shape} vs noise {grad.shape}")
    return (image * Tensor(grad)).sum()


def normalize_attention(raw: Tensor, nu: float = NU, stop_minmax: bool = False) -> Tensor:
    """Min-max normalize an attention map into [0, 1).

    By default gradients also flow through the min and max (to the first
    attaining entry of each). With ``stop_minmax`` they are read as constants,
    which lets the optimizer rescale the raw map without moving the
    normalized one.
    """
    if stop_minmax:
        lo = float(raw.data.min())
        hi = float(raw.data.max())
        return (raw - lo) * (1.0 / (hi - lo + nu))
    lo = broadcast_to(reduce_min(raw), raw.shape)
    hi = broadcast_to(reduce_max(raw), raw.shape)
    return (raw - lo) / (hi - lo + nu)


def ama_loss(records: Sequence, mask_targets: Sequence[np.ndarray] | np.ndarray,
             num_layers: int | None = None) -> tuple[Tensor, list[float]]:
    """Mean over layers of the per-pixel mean |a_i - eta(m)|.

    ``records`` holds normalized maps (tensors, or objects with a
    ``normalized`` tensor). ``mask_targets`` is either one pooled mask per
    record or a single full-resolution mask that is pooled to each layer's
    size. Returns the loss and the per-layer terms.
    """
    from .render import eta_resize

    maps = [getattr(r, "normalized", r) for r in records]
    if num_layers is not None and len(maps) != num_layers:
        raise ValueError(f"expected {num_layers} attention records, got {len(maps)}")
    if not maps:
        raise ValueError("ama_loss needs at least one attention record")
    if isinstance(mask_targets, np.ndarray) and mask_targets.ndim == 2:
        targets = [eta_resize(mask_targets, *m.shape) for m in maps]
    else:
        targets = [np.asarray(t, dtype=np.float64) for t in mask_targets]
    terms = []
    for a, target in zip(maps, targets):
        if a.shape != target.shape:
            raise ShapeError(f"attention map {a.shape} vs mask {target.shape}")
        terms.append((a - Tensor(target)).abs().mean())
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    total = total * (1.0 / len(terms))
    return total, [t.item() for t in terms]


@dataclass
class LossReport:
    iteration: int
    stage: str
    sds: float
    ama: float
    ama_layers: list[float] = field(default_factory=list)
    grad_norms: dict[str, float] = field(default_factory=dict)

    CSV_HEADER = "iter,stage,sds,ama,grad_norm_geo,grad_norm_mat,grad_norm_lora"

    def csv_row(self) -> str:
        g = self.grad_norms
        return (f"{self.iteration},{self.stage},{self.sds:.12e},{self.ama:.12e},"
                f"{g.get('geo', 0.0):.12e},{g.get('mat', 0.0):.12e},{g.get('lora', 0.0):.12e}")
