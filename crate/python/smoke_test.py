"""Smoke test for the kernel_flows extension module."""

import tempfile
from pathlib import Path

import numpy as np
import pytest

import kernel_flows as kf


def one_hot(n, c):
    y = np.zeros((n, c))
    y[np.arange(n), np.arange(n) % c] = 1.0
    return y


def test_water_filling_matches_formula():
    sigma = [4.0, 1.0, 0.05]
    lam, mu = 1.0, 0.1
    tau = lam * mu
    expected = [lam * max(np.sqrt(s / tau) - 1.0, 0.0) for s in sigma]
    assert np.allclose(kf.water_filling_spectrum(sigma, lam, mu), expected)


def test_kernel_flow_reaches_predicted_fixed_point():
    y = one_hot(8, 2)
    res = kf.integrate_kernel_flow(0.1 * np.eye(8), y, 1.0, 0.1, dt=0.05, max_steps=50_000)
    assert res.converged
    k = np.asarray(res.terminal)
    assert np.allclose(k, np.asarray(kf.predict_k_infinity(y, 1.0, 0.1)), atol=1e-6)
    assert kf.effective_rank(k) <= 2
    assert np.all(np.diff(res.values) <= 1e-8 * (1 + np.abs(res.values[:-1])))


def test_noise_rank_and_full_batch():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((10, 10))
    k = g @ g.T / 10
    y = rng.standard_normal((10, 2))
    z = np.asarray(kf.kernel_noise_matrix(k, y, 0.5, [0, 3, 7]))
    assert np.allclose(z, z.T)
    assert np.linalg.matrix_rank(z, tol=1e-10 * np.abs(z).max()) <= 4
    assert np.abs(kf.kernel_noise_matrix(k, y, 0.5, list(range(10)))).max() < 1e-10


def test_risk_single_mode():
    r = kf.risk_decomposition([1.0], [1.0], 1.0, 100.0, 1.0)
    assert r["bias"] == pytest.approx(0.25)
    assert r["variance"] == pytest.approx(1.0 / 400.0)


def test_invalid_input_raises_value_error():
    with pytest.raises(ValueError):
        kf.water_filling_spectrum([1.0], -1.0, 0.1)
    with pytest.raises(ValueError):
        kf.effective_rank([[1.0, 2.0], [0.0, 1.0]])


def test_run_experiment_writes_artifacts():
    with tempfile.TemporaryDirectory() as d:
        prefix = str(Path(d) / "sup")
        report = kf.run("supervised", prefix, seed=1, overrides={"n": 8, "c": 2})
        assert report["passed"]
        assert report["config"]["n"] == 8
        assert Path(prefix + "_trajectory.csv").exists()


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
