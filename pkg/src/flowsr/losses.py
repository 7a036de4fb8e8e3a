"""Region-decomposed data loss, regularisation and the adversarial loss variants.

Scores are discriminator outputs before any activation. Every function works
on torch tensors so that the results can be differentiated; numpy inputs are
accepted and converted.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import DimensionError, ValidationError
from .nets import as_tensor, input_gradient, param_l2
from .volume import Region

__all__ = [
    "Variant",
    "LossConfig",
    "LossReport",
    "region_mse",
    "data_losses",
    "mask_nonfluid",
    "adv_vanilla",
    "adv_relativistic",
    "adv_wasserstein",
    "adversarial_losses",
    "gradient_penalty",
    "generator_total",
    "discriminator_total",
]


class Variant(str, enum.Enum):
    VANILLA = "vanilla"
    RELATIVISTIC = "relativistic"
    WASSERSTEIN = "wasserstein"


@dataclass(frozen=True)
class LossConfig:
    lambda_g: float = 1e-3
    mu_g: float = 5e-7
    mu_d: float = 5e-5
    lambda_gp: float = 10.0
    variant: Variant = Variant.WASSERSTEIN

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("lambda_g", "mu_g", "mu_d", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


@dataclass
class LossReport:
    mse_nonfluid: float = 0.0
    mse_bound: float = 0.0
    mse_core: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    l2_g: float = 0.0
    l2_d: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    @property
    def data_loss(self):
        return self.mse_nonfluid + self.mse_bound + self.mse_core

    def recompute_totals(self, cfg):
        self.total_g = self.data_loss + cfg.lambda_g * self.adv_g + cfg.mu_g * self.l2_g
        self.total_d = self.adv_d + cfg.mu_d * self.l2_d
        return self

    def as_dict(self):
        return asdict(self)


def _pair(x_sr, x_hr, labels):
    x_sr = as_tensor(x_sr)
    x_hr = as_tensor(x_hr, x_sr.dtype)
    labels = torch.as_tensor(labels)
    if x_sr.shape != x_hr.shape:
        raise DimensionError(f"SR {tuple(x_sr.shape)} and HR {tuple(x_hr.shape)} shapes differ")
    if tuple(labels.shape) != tuple(x_sr.shape[:-1]):
        raise DimensionError(f"labels {tuple(labels.shape)} do not match patch grid {tuple(x_sr.shape[:-1])}")
    return x_sr, x_hr, labels


def region_mse(x_sr, x_hr, labels, region):
    """Mean squared vector error over the voxels of ``region`` (0 for an empty region).

    Batched inputs are pooled: the mean runs over every region voxel in the batch.
    """
    x_sr, x_hr, labels = _pair(x_sr, x_hr, labels)
    sel = labels == int(region)
    n = int(sel.sum())
    if n == 0:
        return x_sr.sum() * 0.0
    sq = ((x_sr - x_hr) ** 2).sum(-1)
    return sq[sel].sum() / n


def data_losses(x_sr, x_hr, labels):
    """``(mse_nonfluid, mse_bound, mse_core)`` as tensors."""
    return tuple(region_mse(x_sr, x_hr, labels, r) for r in (Region.NONFLUID, Region.BOUNDARY, Region.CORE))


def mask_nonfluid(x, labels):
    """Zero every NonFluid voxel; fluid voxels pass through untouched."""
    x = as_tensor(x)
    labels = torch.as_tensor(labels)
    if tuple(labels.shape) != tuple(x.shape[:-1]):
        raise DimensionError("labels do not match patch grid")
    fluid = (labels != int(Region.NONFLUID)).unsqueeze(-1)
    return torch.where(fluid, x, torch.zeros((), dtype=x.dtype))


def _scores(s, name):
    s = as_tensor(s, torch.float64) if not isinstance(s, torch.Tensor) else s
    s = s.reshape(-1)
    if s.numel() == 0:
        raise ValidationError(f"{name} is empty")
    return s


# -log(sigmoid(z)) = softplus(-z);  -log(1 - sigmoid(z)) = softplus(z)


def adv_vanilla(scores_hr, scores_sr):
    hr, sr = _scores(scores_hr, "scores_hr"), _scores(scores_sr, "scores_sr")
    loss_g = F.softplus(-sr).mean()
    loss_d = F.softplus(-hr).mean() + F.softplus(sr).mean()
    return loss_g, loss_d


def adv_relativistic(scores_hr, scores_sr):
    """Relativistic average losses; each sample is compared to the other set's batch mean."""
    hr, sr = _scores(scores_hr, "scores_hr"), _scores(scores_sr, "scores_sr")
    rel_hr = hr - sr.mean()
    rel_sr = sr - hr.mean()
    loss_g = F.softplus(rel_hr).mean() + F.softplus(-rel_sr).mean()
    loss_d = F.softplus(-rel_hr).mean() + F.softplus(rel_sr).mean()
    return loss_g, loss_d


def adv_wasserstein(scores_hr, scores_sr, gp=0.0):
    hr, sr = _scores(scores_hr, "scores_hr"), _scores(scores_sr, "scores_sr")
    if not isinstance(gp, torch.Tensor) and gp < 0:
        raise ValidationError("gp must be >= 0")
    loss_g = sr.mean()
    loss_d = hr.mean() - sr.mean() + gp
    return loss_g, loss_d


def adversarial_losses(variant, scores_hr, scores_sr, gp=0.0):
    variant = Variant(variant)
    if variant is Variant.VANILLA:
        return adv_vanilla(scores_hr, scores_sr)
    if variant is Variant.RELATIVISTIC:
        return adv_relativistic(scores_hr, scores_sr)
    return adv_wasserstein(scores_hr, scores_sr, gp)


def gradient_penalty(critic, x_hr, x_sr, beta, lambda_gp=10.0):
    """``lambda_gp * mean((||grad D(x_hat)|| - 1)^2)`` at ``x_hat = beta*x_hr + (1-beta)*x_sr``.

    ``beta`` holds one value per batch sample. The result is differentiable with
    respect to the critic's parameters through the input gradient.
    """
    x_hr = as_tensor(x_hr)
    x_sr = as_tensor(x_sr, x_hr.dtype)
    if x_hr.shape != x_sr.shape:
        raise DimensionError("x_hr and x_sr shapes differ")
    beta = torch.as_tensor(beta, dtype=x_hr.dtype).reshape(-1)
    if beta.numel() != x_hr.shape[0]:
        raise DimensionError(f"need one beta per sample ({x_hr.shape[0]}), got {beta.numel()}")
    if torch.any(beta < 0) or torch.any(beta > 1):
        raise ValidationError("beta must lie in [0, 1]")
    b = beta.reshape((-1,) + (1,) * (x_hr.dim() - 1))
    x_hat = (b * x_hr.detach() + (1.0 - b) * x_sr.detach()).requires_grad_(True)
    grad = input_gradient(critic, x_hat, create_graph=True)
    norms = grad.flatten(1).norm(dim=1)
    return lambda_gp * ((norms - 1.0) ** 2).mean()


def generator_total(x_sr, x_hr, labels, adv_g, theta_g, cfg):
    """Generator objective: three region MSEs + weighted adversarial + L2 terms.

    Returns ``(total, parts)`` where ``parts`` maps LossReport field names to
    tensors. The NonFluid target is whatever ``x_hr`` holds there (zero for
    phantom data).
    """
    nonfluid, bound, core = data_losses(x_sr, x_hr, labels)
    l2 = param_l2(theta_g)
    adv = adv_g if isinstance(adv_g, torch.Tensor) else torch.as_tensor(float(adv_g), dtype=nonfluid.dtype)
    total = nonfluid + bound + core + cfg.lambda_g * adv + cfg.mu_g * l2
    parts = {"mse_nonfluid": nonfluid, "mse_bound": bound, "mse_core": core, "adv_g": adv, "l2_g": l2, "total_g": total}
    return total, parts


def discriminator_total(adv_d, theta_d, cfg):
    l2 = param_l2(theta_d)
    total = adv_d + cfg.mu_d * l2
    return total, {"adv_d": adv_d, "l2_d": l2, "total_d": total}
