import json

import numpy as np
import pytest

from otrect.core import CostSpec
from otrect.ivs import (
    ChainFormatError,
    KernelSurfaceRegressor,
    OptionChain,
    OptionQuote,
    SurfaceGrid,
    featurize,
    fit_2sks,
    fit_ks,
    fit_robust,
    generate_chain,
    kernel,
    kernel_matrix,
    mape,
    read_chain_csv,
    surface_gradient,
    u,
    write_chain_csv,
    write_surface_json,
)

H = (0.35, 0.10, 0.50)


def chain_from(iv, tau=30.0, delta=0.5, vega=1.0):
    iv = np.asarray(iv, dtype=float)
    n = iv.shape[0]
    return OptionChain(np.full(n, tau), np.full(n, delta), np.full(n, delta > 0), iv,
                       np.full(n, vega))


def test_featurize_examples():
    np.testing.assert_allclose(featurize(OptionQuote(1, 0.5, True, 0.2)), [0, 0.5, 1])
    assert featurize(OptionQuote(10, -0.25, False, 0.2))[1] == pytest.approx(0.75)
    np.testing.assert_allclose(featurize(OptionQuote(np.e**2, -1, False, 0.2)), [2, 0, 0])
    with pytest.raises(ValueError):
        OptionQuote(0, 0.5, True, 0.2)
    assert np.all((u(np.linspace(-1, 1, 101)) >= 0) & (u(np.linspace(-1, 1, 101)) <= 1))


def test_kernel_examples():
    h = np.array(H)
    a = np.array([0.3, 0.2, 1.0])
    assert kernel(a, a, h) == 1.0
    assert kernel(a, a + [2 * h[0], 0, 0], h) == pytest.approx(np.exp(-1))
    assert kernel(a, a + [2 * h[0], 2 * h[1], 0], h) == pytest.approx(np.exp(-2))
    with pytest.raises(ValueError):
        kernel(a, a, (0.1, 0.0, 0.1))
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    K = kernel_matrix(A, B, h)
    assert np.all(K > 0) and np.all(K <= 1)
    np.testing.assert_allclose(K, kernel_matrix(B, A, h).T)
    assert K[2, 1] == pytest.approx(kernel(A[2], B[1], h))


def test_fit_ks_examples():
    one = fit_ks(chain_from([0.3]), H)
    assert one.predict(SurfaceGrid().features()) == pytest.approx(0.3)
    two = fit_ks(chain_from([0.2, 0.4]), H)
    assert two.predict_chain(chain_from([1.0]))[0] == pytest.approx(0.3)
    c = OptionChain(np.array([30.0, 60.0]), np.array([0.5, 0.5]), np.array([True, True]),
                    np.array([0.2, 0.4]), np.array([1.0, 1.0]))
    sharp = fit_ks(c, (1e-3, 1e-3, 1e-3))
    assert sharp.predict_chain(c) == pytest.approx([0.2, 0.4])
    with pytest.warns(RuntimeWarning):
        m = fit_ks(chain_from([0.2, 0.4], vega=0.0), H)
    assert m.meta["zero_vega_fallback"]


def test_fit_2sks_examples():
    m = fit_2sks(chain_from([0.2] * 49 + [5.0]), H)
    assert m.meta["removed"] == [49]
    assert fit_2sks(chain_from([0.3] * 8), H).meta["removed"] == []
    m = fit_2sks(chain_from([0.1, 0.2, 0.3, 0.4]), H)
    assert m.meta["removed"] == []
    assert m.meta["fence"] == pytest.approx([-0.05, 0.55])
    assert fit_2sks(chain_from([0.1, 0.2, 5.0]), H).meta["passthrough"]


def test_2sks_survivors_inside_fence():
    g = generate_chain(3, 80, 0.1, 5.0)
    m = fit_2sks(g.chain, H)
    lo, hi = m.meta["fence"]
    kept = np.setdiff1d(np.arange(80), m.meta["removed"])
    assert np.all((g.chain.iv[kept] >= lo) & (g.chain.iv[kept] <= hi))


def test_mape_examples():
    c = chain_from([0.99])
    m = fit_ks(chain_from([1.99]), H)
    assert mape(m, c) == pytest.approx(1.0)
    assert mape(fit_ks(c, H), c) == pytest.approx(0.0)


def test_surface_gradient_examples():
    grid = SurfaceGrid()
    assert len(grid.taus) == 11 and len(grid.deltas) == 40 and 0.0 not in grid.deltas
    assert surface_gradient(np.ones(grid.shape)) == 0.0
    a = 0.7
    S = np.repeat((a * np.log(grid.taus))[:, None], 40, axis=1)
    expected = 39 * np.sum((a * np.diff(np.log(grid.taus))) ** 2) / 2
    assert surface_gradient(S) == pytest.approx(expected)


def test_generate_chain_properties():
    a = generate_chain(5, 80, 0.1, 5.0)
    b = generate_chain(5, 80, 0.1, 5.0)
    np.testing.assert_array_equal(a.chain.iv, b.chain.iv)
    assert len(a.outliers) == 8
    assert np.all(a.chain.iv[a.outliers] >= 5 * a.truth[a.outliers] - 1e-12)
    assert np.all((a.chain.tau_days >= 7) & (a.chain.tau_days <= 730))
    clean = generate_chain(1, 80, 0.0)
    truth = OptionChain(clean.chain.tau_days, clean.chain.delta, clean.chain.is_call,
                        clean.truth, clean.chain.vega)
    assert mape(fit_ks(clean.chain, H), truth) < 0.05


def test_fit_robust_constant_surface():
    c = generate_chain(2, 40, 0.0).chain
    c.iv[:] = 0.25
    m = fit_robust(c, H, delta=0.01)
    assert mape(m, c) == pytest.approx(0.0, abs=1e-12)


def test_fit_robust_clean_close_to_ks():
    g = generate_chain(4, 80, 0.0)
    ks = fit_ks(g.chain, H)
    rb = fit_robust(g.chain, H, delta=0.0)
    assert mape(rb, g.chain) <= 1.05 * mape(ks, g.chain)


def test_fit_robust_detects_injected_outliers():
    g = generate_chain(6, 60, 0.0)
    c = g.chain
    idx = np.array([5, 17, 29, 41, 53])
    c.iv[idx] *= 5
    rb = fit_robust(c, H, delta=0.05)
    assert set(idx.tolist()) <= set(rb.fit_result.detected_outlier_indices.tolist())


def test_fit_robust_beats_unrectified():
    g = generate_chain(8, 60, 0.1, 5.0)
    truth = OptionChain(g.chain.tau_days, g.chain.delta, g.chain.is_call, g.truth,
                        g.chain.vega)
    assert mape(fit_robust(g.chain, H, delta=0.01), truth) < mape(
        fit_robust(g.chain, H, delta=0.0), truth)


def test_vega_scale_invariance():
    g = generate_chain(9, 50, 0.1, 5.0)
    a = fit_robust(g.chain, H, delta=0.01)
    c = g.chain.subset(np.arange(50))
    c.vega = c.vega * 7.0
    b = fit_robust(c, H, delta=0.01)
    np.testing.assert_allclose(a.theta, b.theta, rtol=1e-10, atol=1e-12)


def test_raw_basis_and_adaptive_modes():
    g = generate_chain(10, 40, 0.1, 5.0)
    raw = fit_robust(g.chain, H, delta=0.01, basis="raw")
    assert raw.basis == "raw" and np.all(np.isfinite(raw.predict_chain(g.chain)))
    ad = fit_robust(g.chain, H, CostSpec(0.5), adaptive=True)
    assert ad.meta["adaptive"]


def test_csv_roundtrip_and_errors(tmp_path):
    g = generate_chain(11, 12, 0.0)
    p = tmp_path / "chain.csv"
    write_chain_csv(g.chain, p)
    back = read_chain_csv(p)
    np.testing.assert_array_equal(back.iv, g.chain.iv)
    np.testing.assert_array_equal(back.is_call, g.chain.is_call)
    bad = tmp_path / "bad.csv"
    bad.write_text("tau_days,delta,is_call,iv,vega\n30,0.5,1,0.2,1\n30,0.5,2,0.2,1\n")
    with pytest.raises(ChainFormatError, match="row 3"):
        read_chain_csv(bad)
    bad.write_text("tau,delta\n")
    with pytest.raises(ChainFormatError, match="row 1"):
        read_chain_csv(bad)
    bad.write_text("tau_days,delta,is_call,iv,vega\n-1,0.5,1,0.2,1\n")
    with pytest.raises(ChainFormatError, match="row 2"):
        read_chain_csv(bad)


def test_surface_json(tmp_path):
    m = fit_ks(generate_chain(12, 30, 0.0).chain, H)
    p = tmp_path / "s.json"
    write_surface_json(m, p, metrics={"mape": 0.1}, seed=3)
    rec = json.loads(p.read_text())
    assert rec["format_version"] == 1
    assert len(rec["values"]) == 11 * 40
    assert rec["h"] == list(H)


def test_sklearn_regressor():
    g = generate_chain(13, 60, 0.0)
    c = g.chain
    X = np.column_stack([c.tau_days, c.delta, c.is_call])
    for method in ("ks", "2sks", "robust"):
        reg = KernelSurfaceRegressor(method=method).fit(X, c.iv, sample_weight=c.vega)
        assert reg.predict(X).shape == (60,)
