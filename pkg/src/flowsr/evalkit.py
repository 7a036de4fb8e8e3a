"""Velocity-field error metrics, SNR/region/time stratification and PCA of generator features."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import torch

from .errors import DimensionError, ValidationError
from .nets import generator_features
from .volume import Region

__all__ = [
    "EPS",
    "StratumMetrics",
    "MetricsReport",
    "FeatureSample",
    "vector_metrics",
    "regression",
    "snr_stratum",
    "compute_metrics",
    "export_report",
    "read_report",
    "pca_fit",
    "pca_project",
    "extract_features",
    "write_projections",
    "peak_frame",
]

EPS = 1e-6
REGIONS = ("Boundary", "Core")
SNR_STRATA = ("All", "High", "Low")
TIME_SCOPES = ("FullCycle", "PeakSystole")
HIGH_TSNR = (10.0, 12.0)
LOW_TSNR = (2.0, 4.0)
ABSENT = "NA"

_REGION_CODE = {"Boundary": Region.BOUNDARY, "Core": Region.CORE}


@dataclass(frozen=True)
class StratumMetrics:
    """MRE and DE are percentages; MAE in m/s; vNRMSE dimensionless."""

    n_voxels: int
    mre: float
    mae: float
    vnrmse: float
    de: float
    k: tuple
    r2: tuple


@dataclass
class MetricsReport:
    model: str = "model"
    entries: dict = field(default_factory=dict)

    def get(self, region, snr="All", time="FullCycle"):
        return self.entries.get((region, snr, time))


def regression(hr, sr):
    """OLS of ``sr`` on ``hr`` with an intercept; returns ``(slope, r2)``.

    Undefined (NaN) when ``hr`` has no variance.
    """
    hr = np.asarray(hr, dtype=np.float64)
    sr = np.asarray(sr, dtype=np.float64)
    if hr.size < 2:
        return math.nan, math.nan
    dx = hr - hr.mean()
    dy = sr - sr.mean()
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        return math.nan, math.nan
    slope = float(np.dot(dx, dy)) / sxx
    resid = dy - slope * dx
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.dot(dy, dy))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return slope, r2


def vector_metrics(sr, hr):
    """Metrics over ``(N, 3)`` arrays of SR and HR velocity vectors."""
    sr = np.asarray(sr, dtype=np.float64).reshape(-1, 3)
    hr = np.asarray(hr, dtype=np.float64).reshape(-1, 3)
    if sr.shape != hr.shape:
        raise DimensionError("SR and HR voxel sets differ in size")
    if len(sr) == 0:
        return None
    err = np.linalg.norm(sr - hr, axis=1)
    hr_norm = np.linalg.norm(hr, axis=1)
    sr_norm = np.linalg.norm(sr, axis=1)
    mre = 100.0 * float(np.mean(np.tanh(err / (hr_norm + EPS))))
    mae = float(np.mean(err))
    peak = float(hr_norm.max())
    vnrmse = math.sqrt(float(np.mean(err**2))) / peak if peak > 0 else math.nan
    dots = np.abs(np.einsum("ij,ij->i", sr, hr))
    de = 100.0 * float(np.mean(1.0 - dots / (sr_norm * hr_norm + EPS)))
    fits = [regression(hr[:, c], sr[:, c]) for c in range(3)]
    return StratumMetrics(
        n_voxels=len(sr),
        mre=mre,
        mae=mae,
        vnrmse=vnrmse,
        de=de,
        k=tuple(f[0] for f in fits),
        r2=tuple(f[1] for f in fits),
    )


def snr_stratum(tsnr):
    """'High', 'Low' or None for a logged TSNR value."""
    if HIGH_TSNR[0] <= tsnr <= HIGH_TSNR[1]:
        return "High"
    if LOW_TSNR[0] <= tsnr <= LOW_TSNR[1]:
        return "Low"
    return None


def _frames(v):
    data = np.asarray(getattr(v, "data", v), dtype=np.float64)
    if data.ndim == 4:
        data = data[None]
    return data


def compute_metrics(v_sr, v_hr, labels, snr_log=None, peak_index=None, model="model"):
    """Evaluate every region x SNR stratum x time scope combination.

    ``snr_log`` is a sequence of records with ``timestep`` and ``tsnr``
    attributes (or ``(timestep, stratum, tsnr)`` tuples); without it only the
    'All' stratum is populated. Strata with no voxels are stored as ``None``.
    """
    sr, hr = _frames(v_sr), _frames(v_hr)
    labels = np.asarray(labels)
    if sr.shape != hr.shape:
        raise DimensionError(f"SR {sr.shape} and HR {hr.shape} shapes differ")
    if labels.shape != hr.shape[1:4]:
        raise DimensionError("labels do not match the velocity grid")
    nt = hr.shape[0]
    frame_stratum = {}
    for rec in snr_log or ():
        t, tsnr = (rec.timestep, rec.tsnr) if hasattr(rec, "tsnr") else (int(rec[0]), float(rec[2]))
        frame_stratum[t] = snr_stratum(tsnr)

    report = MetricsReport(model)
    for region, snr, scope in product(REGIONS, SNR_STRATA, TIME_SCOPES):
        frames = list(range(nt))
        if snr != "All":
            frames = [t for t in frames if frame_stratum.get(t) == snr]
        if scope == "PeakSystole":
            frames = [t for t in frames if t == peak_index]
        sel = labels == _REGION_CODE[region]
        if not frames or not sel.any():
            report.entries[(region, snr, scope)] = None
            continue
        report.entries[(region, snr, scope)] = vector_metrics(sr[frames][:, sel], hr[frames][:, sel])
    return report


def peak_frame(v_hr, mask):
    """Frame with the largest mean fluid speed (first on ties)."""
    hr = _frames(v_hr)
    mask = np.asarray(mask, dtype=bool)
    speeds = [float(np.linalg.norm(hr[t][mask], axis=-1).mean()) if mask.any() else 0.0 for t in range(len(hr))]
    return int(np.argmax(speeds))


# ----------------------------------------------------------------------------
# CSV export

COLUMNS = ["model", "region", "snr", "time", "n_voxels", "mre", "mae", "vnrmse", "de",
           "k_x", "k_y", "k_z", "r2_x", "r2_y", "r2_z"]


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ABSENT
    return repr(float(x)) if isinstance(x, float) else str(x)


def export_report(reports, path):
    """Write one row per (model, region, snr, time); absent values are written as NA."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COLUMNS)
        for rep in reports:
            for (region, snr, scope), m in rep.entries.items():
                if m is None:
                    vals = [ABSENT] * (len(COLUMNS) - 4)
                else:
                    vals = [str(m.n_voxels)] + [_fmt(v) for v in (m.mre, m.mae, m.vnrmse, m.de, *m.k, *m.r2)]
                w.writerow([rep.model, region, snr, scope] + vals)


def read_report(path):
    """Parse a metrics CSV back into ``{model: MetricsReport}``."""
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rep = out.setdefault(row["model"], MetricsReport(row["model"]))
            key = (row["region"], row["snr"], row["time"])
            if row["n_voxels"] == ABSENT:
                rep.entries[key] = None
                continue
            num = lambda c: math.nan if row[c] == ABSENT else float(row[c])  # noqa: E731
            rep.entries[key] = StratumMetrics(
                int(row["n_voxels"]), num("mre"), num("mae"), num("vnrmse"), num("de"),
                tuple(num(f"k_{a}") for a in "xyz"), tuple(num(f"r2_{a}") for a in "xyz"),
            )
    return out


# ----------------------------------------------------------------------------
# feature distribution analysis


@dataclass(frozen=True)
class FeatureSample:
    tap: str
    vector: np.ndarray
    patch_id: int


@dataclass(frozen=True)
class PCAFit:
    projections: np.ndarray
    fractions: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def _sample_matrix(samples):
    if len(samples) and isinstance(samples[0], FeatureSample):
        dims = {s.vector.size for s in samples}
        if len(dims) != 1:
            raise DimensionError(f"inconsistent feature dimensionality {sorted(dims)}")
        return np.stack([s.vector.ravel() for s in samples]).astype(np.float64)
    return np.asarray(samples, dtype=np.float64)


def pca_fit(samples, n_components=2):
    """Principal components of mean-centred samples via SVD.

    Component signs are fixed so the largest-magnitude loading is positive.
    Zero-variance input gives zero projections and zero fractions.
    """
    x = _sample_matrix(samples)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValidationError("PCA needs at least 3 samples of equal dimensionality")
    n, d = x.shape
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2
    total = float(var.sum())
    k = n_components
    comps = np.zeros((k, d))
    fracs = np.zeros(k)
    if total > 0:
        m = min(k, len(s))
        comps[:m] = vt[:m]
        fracs[:m] = var[:m] / total
        for i in range(m):
            if comps[i, np.argmax(np.abs(comps[i]))] < 0:
                comps[i] = -comps[i]
    return PCAFit(xc @ comps.T, fracs, comps, mean)


def pca_project(samples, n_components=2):
    """``(projections (n, k), explained-variance fractions (k,))``."""
    fit = pca_fit(samples, n_components)
    return fit.projections, fit.fractions


def extract_features(params, patches, tap, count=10000, rng=None, batch_size=16):
    """Activation vectors at ``tap`` for ``count`` randomly chosen patches.

    ``patches`` is a sequence of :class:`PatchPair` or an array of LR patches.
    Patches are drawn without replacement when ``count`` allows it.
    """
    if tap not in ("middle", "end"):
        raise ValidationError(f"tap must be 'middle' or 'end', got {tap!r}")
    lr = np.stack([p.x_lr for p in patches]) if hasattr(patches[0], "x_lr") else np.asarray(patches)
    rng = np.random.default_rng(0) if rng is None else rng
    ids = rng.choice(len(lr), size=count, replace=count > len(lr))
    dtype = next(iter(params.values())).dtype
    out = []
    with torch.no_grad():
        for start in range(0, count, batch_size):
            chunk = ids[start : start + batch_size]
            feats = generator_features(params, torch.as_tensor(lr[chunk], dtype=dtype), tap)
            for pid, vec in zip(chunk, feats.numpy()):
                out.append(FeatureSample(tap, vec.copy(), int(pid)))
    return out


def write_projections(path, rows):
    """``rows``: iterable of ``(model, tap, patch_id, pc1, pc2)``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "tap", "patch_id", "pc1", "pc2"])
        for model, tap, pid, a, b in rows:
            w.writerow([model, tap, pid, repr(float(a)), repr(float(b))])
