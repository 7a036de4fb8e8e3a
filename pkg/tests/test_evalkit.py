import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsr import evalkit
from flowsr.errors import DimensionError, ValidationError
from flowsr.evalkit import EPS, compute_metrics, regression, snr_stratum, vector_metrics
from flowsr.nets import GeneratorSpec, init_generator
from flowsr.volume import Region

from oracles import metrics_loop, ols_loop


def test_vector_metrics_against_loop(rng):
    for _ in range(20):
        hr = rng.normal(size=(60, 3))
        sr = hr + rng.normal(scale=0.3, size=(60, 3))
        m = vector_metrics(sr, hr)
        ref = metrics_loop(sr.tolist(), hr.tolist())
        for key in ("mre", "mae", "vnrmse", "de"):
            assert abs(getattr(m, key) - ref[key]) <= 1e-12 * max(1.0, abs(ref[key]))
        for c in range(3):
            k, r2 = ols_loop(hr[:, c].tolist(), sr[:, c].tolist())
            assert m.k[c] == pytest.approx(k, rel=1e-12)
            assert m.r2[c] == pytest.approx(r2, rel=1e-10)


def test_identity_field(rng):
    hr = rng.normal(size=(50, 3))
    m = vector_metrics(hr, hr)
    assert m.mre == 0 and m.mae == 0 and m.vnrmse == 0
    assert m.k == (1.0, 1.0, 1.0) and m.r2 == (1.0, 1.0, 1.0)
    # the stabilising epsilon leaves a tiny residual in the direction error
    h2 = np.sum(hr**2, axis=1)
    assert m.de == pytest.approx(100 * np.mean(EPS / (h2 + EPS)), rel=1e-9)
    assert 0 < m.de < 1e-3


def test_reversed_vector_has_no_direction_error():
    hr = np.array([[1.0, 2.0, 2.0]])
    m = vector_metrics(-hr, hr)
    assert m.de == pytest.approx(100 * EPS / (9 + EPS))
    assert m.mre == pytest.approx(100 * math.tanh(6 / (3 + EPS)))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 3) | st.floats(-3, -0.1), st.floats(-2, 2), st.integers(0, 2**31))
def test_regression_recovers_line(slope, icpt, seed):
    x = np.random.default_rng(seed).normal(size=30)
    k, r2 = regression(x, slope * x + icpt)
    assert k == pytest.approx(slope, abs=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)


def test_regression_degenerate():
    assert all(math.isnan(v) for v in regression(np.ones(5), np.arange(5.0)))
    assert all(math.isnan(v) for v in regression([1.0], [2.0]))
    m = vector_metrics(np.ones((4, 3)), np.ones((4, 3)))
    assert all(math.isnan(k) for k in m.k)
    assert vector_metrics(np.zeros((0, 3)), np.zeros((0, 3))) is None
    with pytest.raises(DimensionError):
        vector_metrics(np.zeros((2, 3)), np.zeros((3, 3)))


@pytest.mark.parametrize("tsnr,expected", [(10, "High"), (12, "High"), (11.5, "High"), (2, "Low"), (4, "Low"),
                                           (3.3, "Low"), (7, None), (4.01, None), (12.5, None), (math.inf, None)])
def test_snr_stratum(tsnr, expected):
    assert snr_stratum(tsnr) == expected


def _fields(rng, nt=4, n=6):
    hr = rng.normal(size=(nt, n, n, n, 3))
    sr = hr + rng.normal(scale=0.2, size=hr.shape)
    labels = np.zeros((n, n, n), np.uint8)
    labels[1:5, 1:5, 1:5] = Region.BOUNDARY
    labels[2:4, 2:4, 2:4] = Region.CORE
    return sr, hr, labels


def test_compute_metrics_strata(rng):
    sr, hr, labels = _fields(rng)
    log = [(0, "High", 11.0), (1, "Low", 3.0), (2, "High", 10.0), (3, "Mid", 7.0)]
    rep = compute_metrics(sr, hr, labels, log, peak_index=2, model="m")
    assert len(rep.entries) == 12
    core = labels == Region.CORE
    ref = vector_metrics(sr[[0, 2]][:, core], hr[[0, 2]][:, core])
    assert rep.get("Core", "High") == ref
    assert rep.get("Core", "High", "PeakSystole") == vector_metrics(sr[2][core], hr[2][core])
    assert rep.get("Boundary", "Low", "PeakSystole") is None
    assert rep.get("Boundary", "All").n_voxels == 4 * int((labels == Region.BOUNDARY).sum())
    no_log = compute_metrics(sr, hr, labels)
    assert no_log.get("Core", "High") is None and no_log.get("Core", "All", "PeakSystole") is None
    with pytest.raises(DimensionError):
        compute_metrics(sr, hr[:2], labels)


def test_report_roundtrip(tmp_path, rng):
    sr, hr, labels = _fields(rng)
    hr[:, 2:4, 2:4, 2:4] = 1.0  # constant core: regression undefined
    reps = [compute_metrics(sr, hr, labels, [(t, "", 11.0) for t in range(4)], 1, model=name) for name in ("a", "b")]
    path = tmp_path / "metrics.csv"
    evalkit.export_report(reps, path)
    text = path.read_text()
    assert text.splitlines()[0].startswith("model,region,snr,time,n_voxels")
    assert "NA" in text
    back = evalkit.read_report(path)
    for rep in reps:
        for key, m in rep.entries.items():
            b = back[rep.model].entries[key]
            if m is None:
                assert b is None
                continue
            assert (b.n_voxels, b.mre, b.mae, b.vnrmse, b.de) == (m.n_voxels, m.mre, m.mae, m.vnrmse, m.de)
            assert np.array_equal(b.k, m.k, equal_nan=True)


def test_peak_frame():
    hr = np.zeros((3, 2, 2, 2, 3))
    hr[1, ..., 0] = 2.0
    hr[2, ..., 0] = 2.0
    assert evalkit.peak_frame(hr, np.ones((2, 2, 2), bool)) == 1


def test_pca_known_structure(rng):
    t = rng.normal(size=200)
    t -= t.mean()
    u = rng.normal(size=200)
    u -= u.mean()
    u -= t * (t @ u) / (t @ t)
    x = np.outer(3 * t, [1, 0, 0, 0]) + np.outer(u, [0, 0, 1, 0]) + 5
    fit = evalkit.pca_fit(x)
    assert np.allclose(np.abs(fit.components), [[1, 0, 0, 0], [0, 0, 1, 0]], atol=1e-12)
    # sign convention: largest loading positive
    assert fit.components[0, 0] > 0 and fit.components[1, 2] > 0
    assert np.allclose(fit.projections[:, 0], 3 * t - 3 * t.mean())
    var = np.array([np.var(3 * t), np.var(u)])
    assert np.allclose(fit.fractions, var / var.sum())
    flipped = evalkit.pca_fit(-x)
    assert np.allclose(flipped.components, fit.components)


def test_pca_degenerate_and_errors():
    proj, frac = evalkit.pca_project(np.ones((5, 3)))
    assert not proj.any() and not frac.any()
    with pytest.raises(ValidationError):
        evalkit.pca_project(np.ones((2, 3)))
    bad = [evalkit.FeatureSample("end", np.zeros(n), i) for i, n in enumerate((3, 3, 4))]
    with pytest.raises(DimensionError):
        evalkit.pca_project(bad)


def test_extract_features(rng):
    params = init_generator(GeneratorSpec(width=4, n_rrdb=1, n_hr_blocks=0, growth=2, branch_width=2),
                            np.random.default_rng(0), dtype=torch.float64)
    lr = rng.normal(size=(5, 12, 12, 12, 3))
    feats = evalkit.extract_features(params, lr, "middle", count=4, rng=np.random.default_rng(1))
    assert len(feats) == 4 and len({f.patch_id for f in feats}) == 4
    assert feats[0].vector.shape == (4 * 12**3,)
    more = evalkit.extract_features(params, lr, "end", count=7, rng=np.random.default_rng(1))
    assert len(more) == 7
    with pytest.raises(ValidationError):
        evalkit.extract_features(params, lr, "start", count=1)
