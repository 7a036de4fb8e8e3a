"""Functional generator/discriminator networks, gradients, Adam and weight interpolation.

Networks are plain ordered dicts ``name -> torch.Tensor`` (a *ParamSet*); the
architecture is recovered from the parameter names, so a checkpoint alone
defines the network. Velocity tensors use the ``(..., z, y, x, 3)`` layout of
the rest of the package and are moved to channels-first internally.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError, ValidationError

__all__ = [
    "GeneratorSpec",
    "DiscriminatorSpec",
    "AdamState",
    "init_generator",
    "init_discriminator",
    "forward_generator",
    "forward_discriminator",
    "generator_features",
    "backward",
    "input_gradient",
    "adam_init",
    "adam_step",
    "interpolate_weights",
    "count_params",
    "param_l2",
    "trilinear_upsample",
    "as_tensor",
]

LEAKY_SLOPE = 0.2
RES_SCALE = 0.2
KERNEL = 3


@dataclass(frozen=True)
class GeneratorSpec:
    """Residual-in-residual dense generator, scaled down by default.

    ``growth`` and ``branch_width`` default to ``width // 2``.
    """

    n_rrdb: int = 2
    width: int = 16
    n_hr_blocks: int = 1
    growth: int = None
    branch_width: int = None

    def __post_init__(self):
        if self.n_rrdb < 1:
            raise ValidationError("n_rrdb must be >= 1")
        if self.width < 4:
            raise ValidationError("width must be >= 4")
        if self.n_hr_blocks < 0:
            raise ValidationError("n_hr_blocks must be >= 0")
        if self.growth is None:
            object.__setattr__(self, "growth", self.width // 2)
        if self.branch_width is None:
            object.__setattr__(self, "branch_width", self.width // 2)


@dataclass(frozen=True)
class DiscriminatorSpec:
    n_down_blocks: int = 2
    width: int = 16
    hidden: int = 32
    input_size: int = 24

    def __post_init__(self):
        if self.n_down_blocks < 0 or self.width < 1 or self.hidden < 1:
            raise ValidationError("invalid discriminator spec")
        if self.final_size < 1:
            raise ValidationError("no spatial positions left before flatten")

    @property
    def final_size(self):
        n = self.input_size
        for _ in range(self.n_down_blocks):
            n = (n + 2 - KERNEL) // 2 + 1
        return n


def as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float32)


# ----------------------------------------------------------------------------
# initialisation


def _conv_param(rng, c_in, c_out, dtype, zero=False):
    fan_in = c_in * KERNEL**3
    shape = (c_out, c_in, KERNEL, KERNEL, KERNEL)
    w = np.zeros(shape) if zero else rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return torch.tensor(w, dtype=dtype), torch.zeros(c_out, dtype=dtype)


def _dense_param(rng, n_in, n_out, dtype, zero=False):
    w = np.zeros((n_out, n_in)) if zero else rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_out, n_in))
    return torch.tensor(w, dtype=dtype), torch.zeros(n_out, dtype=dtype)


def _finish(params):
    return {k: v.requires_grad_(True) for k, v in params.items()}


def init_generator(spec, rng, dtype=torch.float32, zero_head=False):
    """Gaussian He initialisation with zero biases, drawn from ``rng`` in a fixed order."""
    p = {}
    w, g = spec.width, spec.growth

    def conv(name, c_in, c_out, zero=False):
        p[name + ".w"], p[name + ".b"] = _conv_param(rng, c_in, c_out, dtype, zero)

    conv("in", 3, w)
    for i in range(spec.n_rrdb):
        for j in range(2):
            pre = f"rrdb{i}.db{j}"
            conv(pre + ".c0", w, g)
            conv(pre + ".c1", w + g, g)
            conv(pre + ".c2", w + 2 * g, w)
    conv("trunk", w, w)
    conv("up", w, w)
    for i in range(spec.n_hr_blocks):
        conv(f"hr{i}.c0", w, w)
        conv(f"hr{i}.c1", w, w)
    for c in range(3):
        conv(f"branch{c}.c0", w, spec.branch_width)
        conv(f"branch{c}.out", spec.branch_width, 1, zero=zero_head)
    return _finish(p)


def init_discriminator(spec, rng, dtype=torch.float32, zero_head=False):
    p = {}
    w = spec.width
    p["in.w"], p["in.b"] = _conv_param(rng, 3, w, dtype)
    for i in range(spec.n_down_blocks):
        p[f"down{i}.w"], p[f"down{i}.b"] = _conv_param(rng, w, w, dtype)
    flat = w * spec.final_size**3
    p["fc0.w"], p["fc0.b"] = _dense_param(rng, flat, spec.hidden, dtype)
    p["head.w"], p["head.b"] = _dense_param(rng, spec.hidden, 1, dtype, zero=zero_head)
    return _finish(p)


def count_params(params):
    return sum(int(t.numel()) for t in params.values())


def param_l2(params):
    """Sum of squared parameter values (weights and biases)."""
    return sum((t * t).sum() for t in params.values())


# ----------------------------------------------------------------------------
# forward passes


def _lrelu(x):
    return F.leaky_relu(x, LEAKY_SLOPE)


def _conv(p, name, x, stride=1):
    return F.conv3d(x, p[name + ".w"], p[name + ".b"], stride=stride, padding=KERNEL // 2)


def _to_channels_first(x):
    return x.movedim(-1, 1)


def _to_channels_last(x):
    return x.movedim(1, -1)


def trilinear_upsample(x):
    """x2 trilinear upsampling of a channels-first ``(B, C, D, H, W)`` tensor (half-voxel aligned)."""
    return F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)


def _count_prefix(params, pattern):
    idx = {int(m.group(1)) for k in params for m in [re.match(pattern, k)] if m}
    return len(idx)


def _dense_block(p, pre, x):
    c0 = _lrelu(_conv(p, pre + ".c0", x))
    c1 = _lrelu(_conv(p, pre + ".c1", torch.cat([x, c0], 1)))
    c2 = _conv(p, pre + ".c2", torch.cat([x, c0, c1], 1))
    return x + RES_SCALE * c2


def _generator(p, x):
    """Channels-first forward returning ``(output, {'middle': ..., 'end': ...})``."""
    feat = _conv(p, "in", x)
    h = feat
    for i in range(_count_prefix(p, r"rrdb(\d+)\.")):
        inner = _dense_block(p, f"rrdb{i}.db1", _dense_block(p, f"rrdb{i}.db0", h))
        h = h + RES_SCALE * inner
    middle = feat + _conv(p, "trunk", h)
    h = _lrelu(_conv(p, "up", trilinear_upsample(middle)))
    for i in range(_count_prefix(p, r"hr(\d+)\.")):
        h = h + _conv(p, f"hr{i}.c1", _lrelu(_conv(p, f"hr{i}.c0", h)))
    end = h
    comps = [_conv(p, f"branch{c}.out", _lrelu(_conv(p, f"branch{c}.c0", end))) for c in range(3)]
    return torch.cat(comps, 1), {"middle": middle, "end": end}


def _batched(x, size, what):
    x = as_tensor(x)
    single = x.dim() == 4
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 5 or tuple(x.shape[1:]) != (size, size, size, 3):
        raise DimensionError(f"{what} expects ({size}, {size}, {size}, 3) patches, got {tuple(x.shape)}")
    return x, single


def forward_generator(params, x_lr, check_shape=True):
    """Super-resolve ``(12, 12, 12, 3)`` (optionally batched) patches to ``(24, 24, 24, 3)``.

    ``check_shape=False`` admits other cubic sizes, which keeps finite-difference
    checks affordable.
    """
    if check_shape:
        x, single = _batched(x_lr, 12, "generator")
    else:
        x = as_tensor(x_lr)
        single = x.dim() == 4
        x = x.unsqueeze(0) if single else x
    out, _ = _generator(params, _to_channels_first(x))
    out = _to_channels_last(out)
    return out[0] if single else out


def generator_features(params, x_lr, tap):
    """Flattened activations per patch at ``tap`` ('middle' or 'end'), shape ``(B, n)``."""
    if tap not in ("middle", "end"):
        raise ValidationError(f"tap must be 'middle' or 'end', got {tap!r}")
    x, _ = _batched(x_lr, 12, "generator")
    _, taps = _generator(params, _to_channels_first(x))
    return taps[tap].reshape(x.shape[0], -1)


def _discriminator(p, x):
    h = _lrelu(_conv(p, "in", x))
    for i in range(_count_prefix(p, r"down(\d+)\.")):
        h = _lrelu(_conv(p, f"down{i}", h, stride=2))
    h = _lrelu(F.linear(h.flatten(1), p["fc0.w"], p["fc0.b"]))
    return F.linear(h, p["head.w"], p["head.b"])[:, 0]


def forward_discriminator(params, x, check_shape=True):
    """Unbounded pre-activation realism score for each ``(24, 24, 24, 3)`` patch."""
    if check_shape:
        x, single = _batched(x, 24, "discriminator")
    else:
        x = as_tensor(x)
        single = x.dim() == 4
        x = x.unsqueeze(0) if single else x
    score = _discriminator(params, _to_channels_first(x))
    return score[0] if single else score


# ----------------------------------------------------------------------------
# gradients and optimisation


def backward(loss, params, create_graph=False):
    """Reverse-mode gradients of a scalar ``loss`` for every tensor in ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
        if isinstance(loss, torch.Tensor) and loss.grad_fn is None and loss.dim() == 0:
            # constant loss: nothing recorded, gradient is identically zero
            return {k: torch.zeros_like(v) for k, v in params.items()}
        raise ValidationError("loss has no recorded graph")
    names = list(params)
    grads = torch.autograd.grad(
        loss, [params[k] for k in names], allow_unused=True, create_graph=create_graph
    )
    return {k: torch.zeros_like(params[k]) if g is None else g for k, g in zip(names, grads)}


def input_gradient(critic, x, create_graph=True):
    """Gradient of ``sum(critic(x))`` with respect to ``x``.

    ``critic`` is a discriminator ParamSet or any callable mapping a batch to
    per-sample scores. With ``create_graph`` the result stays differentiable in
    the critic's parameters, which the gradient penalty relies on.
    """
    if not callable(critic):
        params = critic
        critic = lambda z: forward_discriminator(params, z, check_shape=False)  # noqa: E731
    x = as_tensor(x)
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    score = critic(x)
    (grad,) = torch.autograd.grad(score.sum(), x, create_graph=create_graph)
    return grad


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params):
    return AdamState(
        0,
        {k: torch.zeros_like(p.detach()) for k, p in params.items()},
        {k: torch.zeros_like(p.detach()) for k, p in params.items()},
    )


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if set(params) != set(grads):
        raise ValidationError("parameter and gradient names differ")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_p, new_m, new_v = {}, {}, {}
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise DimensionError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {k}")
            m = beta1 * state.m[k] + (1.0 - beta1) * g
            v = beta2 * state.v[k] + (1.0 - beta2) * g * g
            update = lr * (m / c1) / (torch.sqrt(v / c2) + eps)
            new_p[k] = (p.detach() - update).requires_grad_(True)
            new_m[k], new_v[k] = m, v
    return new_p, AdamState(step, new_m, new_v)


def interpolate_weights(theta_psnr, theta_gan, alpha):
    """Convex blend ``(1 - alpha) * theta_psnr + alpha * theta_gan``; endpoints are exact copies."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    if list(theta_psnr) != list(theta_gan):
        raise ValidationError("parameter names differ between the two networks")
    out = {}
    with torch.no_grad():
        for k, a in theta_psnr.items():
            b = theta_gan[k]
            if a.shape != b.shape:
                raise DimensionError(f"shape mismatch for {k}: {tuple(a.shape)} vs {tuple(b.shape)}")
            if alpha == 0.0:
                out[k] = a.detach().clone()
            elif alpha == 1.0:
                out[k] = b.detach().clone()
            else:
                out[k] = (1.0 - alpha) * a.detach() + alpha * b.detach()
    return _finish(out)
