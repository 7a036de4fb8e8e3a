"""Independent reference implementations used by the tests."""

import itertools
import math

import numpy as np


def wrap(v, venc):
    return np.mod(v + venc, 2 * venc) - venc


def fourier_downsample(field):
    """Keep frequencies -n/4 .. n/4-1 on every axis using unshifted indices.

    Works on the leading three axes; amplitudes are preserved for band-limited input.
    """
    f = np.fft.fftn(field, axes=(0, 1, 2))
    idx = []
    for n in field.shape[:3]:
        q = n // 4
        idx.append(np.r_[0:q, n - q : n])
    sub = f[np.ix_(*idx)]
    return np.real(np.fft.ifftn(sub, axes=(0, 1, 2))) / 8.0


def smooth_field(n, nt, amplitude, rng):
    """Band-limited (n/32-cycle) velocities, shape (nt, n, n, n, 3).

    Each component is a sum of low-frequency cosines whose phase encoding stays
    effectively band-limited when amplitude*pi/venc <= 1.
    """
    c = np.arange(n) * 2 * np.pi / n
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    out = np.zeros((nt, n, n, n, 3))
    for t in range(nt):
        scale = 0.5 + 0.5 * math.cos(2 * math.pi * t / nt)
        for comp in range(3):
            a, b, p = rng.uniform(-1, 1, 3)
            field = a * np.cos(x + p) + b * np.sin(y - p) + 0.5 * np.cos(z + 2 * p)
            out[t, ..., comp] = amplitude * scale * field / 2.5
    return out


def metrics_loop(sr, hr, eps=1e-6):
    """Scalar-loop version of the velocity error metrics on (N, 3) arrays."""
    n = len(sr)
    mre = mae = se = de = 0.0
    peak = 0.0
    for i in range(n):
        d = math.sqrt(sum((sr[i][c] - hr[i][c]) ** 2 for c in range(3)))
        h = math.sqrt(sum(hr[i][c] ** 2 for c in range(3)))
        s = math.sqrt(sum(sr[i][c] ** 2 for c in range(3)))
        dot = abs(sum(sr[i][c] * hr[i][c] for c in range(3)))
        mre += math.tanh(d / (h + eps))
        mae += d
        se += d * d
        de += 1 - dot / (s * h + eps)
        peak = max(peak, h)
    return {
        "mre": 100 * mre / n,
        "mae": mae / n,
        "vnrmse": math.sqrt(se / n) / peak,
        "de": 100 * de / n,
    }


def ols_loop(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    slope = sxy / sxx
    icpt = my - slope * mx
    ss_res = sum((b - (icpt + slope * a)) ** 2 for a, b in zip(x, y))
    ss_tot = sum((b - my) ** 2 for b in y)
    return slope, 1 - ss_res / ss_tot


def central_difference(f, params, keys=None, h=1e-3, max_per_tensor=None, rng=None, h_min=1e-7):
    """Central finite differences of scalar ``f(params)`` for selected parameter entries.

    Starting from step ``h``, the step is halved until two successive estimates
    agree. Leaky-rectifier networks are piecewise smooth, and a step that crosses
    an activation kink gives a wrong quotient; the agreement test rejects those.
    Returns ``{key: (flat_indices, derivatives)}``. Tensors are perturbed in place
    and restored.
    """
    import torch

    def quotient(flat, i, old, step):
        with torch.no_grad():
            flat[i] = old + step
        fp = float(f(params).detach())
        with torch.no_grad():
            flat[i] = old - step
        fm = float(f(params).detach())
        with torch.no_grad():
            flat[i] = old
        return (fp - fm) / (2 * step)

    out = {}
    for k in keys or list(params):
        flat = params[k].detach().view(-1)
        idx = np.arange(flat.numel())
        if max_per_tensor is not None and len(idx) > max_per_tensor:
            idx = (rng or np.random.default_rng(0)).choice(len(idx), max_per_tensor, replace=False)
        ders = []
        for i in idx:
            old = float(flat[i])
            step = h
            d = quotient(flat, i, old, step)
            while step > h_min:
                step /= 2
                d_half = quotient(flat, i, old, step)
                agree = abs(d_half - d) <= 1e-9 * max(abs(d), abs(d_half)) + 1e-12
                d = d_half
                if agree:
                    break
            ders.append(d)
        out[k] = (idx, np.array(ders))
    return out


def grid_points(shape):
    return itertools.product(*[range(n) for n in shape])
