import math

import numpy as np
import pytest

from diffractlab.autocorr import AutocorrelationTable, decompose, eta_weighted
from diffractlab.diffraction import (DiffractionSpectrum, KGrid, ProfileMeasure, ball_window_profile,
                                     classify_spectrum, constant_spectrum, default_step, dual_lattice,
                                     fourier_series_density, periodicity_check, periodogram, poisson_pp,
                                     predicted_spectrum, profile_modulation, shell_partial_sums, uniform_grid)
from diffractlab.gibbs import Configuration, sample_bernoulli
from diffractlab.pointset import fibonacci_scheme, generate_lattice_patch, generate_model_set_patch


def geometric_table(lam: float, zmax: int) -> AutocorrelationTable:
    z = np.arange(-zmax, zmax + 1, dtype=float)
    return AutocorrelationTable(z[:, None], lam ** np.abs(z), "covariance", 1e4, cutoff=zmax)


def closed_form(lam: float, k):
    return (1 - lam**2) / (1 - 2 * lam * np.cos(2 * np.pi * np.asarray(k)) + lam**2)


def test_dual_lattice_examples():
    assert dual_lattice([1]).tolist() == [[1.0]]
    assert dual_lattice([2]).tolist() == [[0.5]]
    assert np.array_equal(dual_lattice(np.eye(2)), np.eye(2))
    b = np.array([[1.0, 0.5], [0.0, 2.0]])
    assert np.allclose(dual_lattice(b).T @ b, np.eye(2))
    with pytest.raises(ValueError):
        dual_lattice([[1, 1], [1, 1]])


def test_poisson_pp_examples():
    pos, w = poisson_pp([1], 1.0, 3.5)
    assert pos[:, 0].tolist() == [-3, -2, -1, 0, 1, 2, 3] and np.all(w == 1)
    pos, w = poisson_pp([2], 0.5, 1.2)
    assert np.allclose(pos[:, 0], [-1, -0.5, 0, 0.5, 1]) and np.all(w == 0.25)
    pos, w = poisson_pp(np.eye(2), 1.0, 1.1)
    assert {tuple(p) for p in pos} == {(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)}
    with pytest.raises(ValueError):
        poisson_pp([1], 0.0, 1)


def test_profile_modulation_examples():
    grid = uniform_grid(-2, 2, 0.25)
    pos, w = poisson_pp([1], 1.0, 2.0)
    spec = DiffractionSpectrum(pos, w, grid, np.full(grid.size, 0.5), "predicted", 10)
    unit = profile_modulation(spec, ProfileMeasure([[0.0]], [1.0]))
    assert np.array_equal(unit.peak_weights, spec.peak_weights) and np.array_equal(unit.density, spec.density)
    two = profile_modulation(spec, ProfileMeasure([[0.0], [0.5]], [1.0, 1.0]))
    expected = np.where(pos[:, 0] % 2 == 0, 4.0, 0.0)
    assert np.allclose(two.peak_weights, expected, atol=1e-12)
    scaled = profile_modulation(spec, ProfileMeasure([[0.0]], [3j]))
    assert np.allclose(scaled.peak_weights, 9 * w) and np.allclose(scaled.density, 9 * 0.5)
    empirical = DiffractionSpectrum(pos, w, grid, np.zeros(grid.size), "empirical", 10)
    with pytest.raises(ValueError):
        profile_modulation(empirical, ProfileMeasure([[0.0]], [1.0]))


def test_fourier_series_geometric_closed_form():
    lam = math.tanh(0.1)
    grid = uniform_grid(-1, 1, 1 / 64)
    res = fourier_series_density(geometric_table(lam, 60), grid)
    assert np.max(np.abs(res.values - closed_form(lam, grid.axes[0]))) < 1e-6
    at0 = fourier_series_density(geometric_table(lam, 60), KGrid(([0.0],))).values[0]
    assert at0 == pytest.approx((1 + lam) / (1 - lam), abs=1e-6)
    assert (1 + lam) / (1 - lam) == pytest.approx(math.exp(0.2), rel=1e-14)
    assert res.imag_residue <= 1e-12


def test_fourier_series_delta_and_even():
    grid = uniform_grid(-1, 1, 1 / 16)
    z = np.arange(-3, 4, dtype=float)[:, None]
    delta = AutocorrelationTable(z, 0.7 * (z[:, 0] == 0), "covariance", 100, cutoff=3)
    assert np.allclose(fourier_series_density(delta, grid).values, 0.7, atol=1e-15)
    sym = AutocorrelationTable(z, [0.1, 0.4, -0.2, 1.0, -0.2, 0.4, 0.1], "covariance", 100, cutoff=3)
    vals = fourier_series_density(sym, grid).values
    assert np.allclose(vals, vals[::-1], atol=1e-14)


def test_fourier_series_rejects_asymmetric_table():
    z = np.array([[-1.0], [0.0], [1.0]])
    bad = AutocorrelationTable(z, [0.3, 1.0, 0.1], "covariance", 100, cutoff=1)
    with pytest.raises(ValueError, match="asymmetric table"):
        fourier_series_density(bad, uniform_grid(0, 1, 0.1))


def test_periodogram_dirichlet_values():
    patch = generate_lattice_patch([1], 10)
    spec = periodogram(patch, KGrid(([0.0, 0.5],)), method="direct")
    assert spec.density[0] == pytest.approx(22.05, rel=1e-12)
    assert spec.density[1] == pytest.approx(1 / 20, rel=1e-9)


def test_periodogram_single_point_flat():
    patch = generate_lattice_patch([1], 0.5)
    spec = periodogram(patch, uniform_grid(-1, 1, 0.1), np.array([[2j]]))
    assert np.allclose(spec.density, 4 / patch.volume, rtol=1e-12)


def test_fft_path_matches_direct():
    patch = generate_lattice_patch([1], 64)
    grid = uniform_grid(-1, 1, default_step(64))
    h = sample_bernoulli(patch, [0.5, 0.5], 3, seed=1)
    a = periodogram(patch, grid, h, values=[0, 1 + 1j], method="fft")
    b = periodogram(patch, grid, h, values=[0, 1 + 1j], method="direct")
    assert np.max(np.abs(a.density - b.density)) < 1e-9
    sq = generate_lattice_patch(np.eye(2) * 2, 12)
    g2 = uniform_grid(-0.6, 0.6, 1 / 48, 2)
    a2, b2 = periodogram(sq, g2, method="fft"), periodogram(sq, g2, method="direct")
    assert np.max(np.abs(a2.density - b2.density)) < 1e-9
    with pytest.raises(ValueError):
        periodogram(generate_model_set_patch(fibonacci_scheme(), 20), grid, method="fft")


def test_parseval_consistency(bernoulli_samples, z_patch):
    # M = 1/step grid points of one period average |sum h e|^2 / vol to sum |h|^2 / vol exactly
    grid = uniform_grid(0, 1 - 1 / 8192, 1 / 8192)
    spec = periodogram(z_patch, grid, bernoulli_samples[:16], values=[0, 1])
    eta0 = eta_weighted(z_patch, bernoulli_samples[:16], 0, values=[0, 1])[[0]].real
    assert spec.density.mean() == pytest.approx(eta0, rel=1e-12)


def test_predicted_bernoulli(bernoulli_samples, z_patch):
    grid = uniform_grid(-1.5, 1.5, default_step(z_patch.radius))
    dec = decompose(z_patch, bernoulli_samples, 6, values=[0, 1], periodic=True)
    spec, certified = predicted_spectrum(z_patch, dec, grid)
    assert certified
    assert spec.peak_positions[:, 0].tolist() == [-1, 0, 1]
    assert np.allclose(spec.peak_weights, 0.25, rtol=0.02)
    assert np.allclose(spec.density, 0.25, rtol=0.05)


def test_predicted_deterministic_is_poisson_comb(z_patch):
    ones = [Configuration(z_patch, np.zeros(len(z_patch), dtype=int))] * 2
    grid = uniform_grid(-2, 2, 1 / 64)
    spec, _ = predicted_spectrum(z_patch, decompose(z_patch, ones, 4, values=[1, 0]), grid)
    pos, w = poisson_pp([1], 1.0, 2.0)
    assert np.array_equal(spec.peak_positions, pos)
    assert np.allclose(spec.peak_weights, w, rtol=1e-12)
    assert np.all(spec.density == 0)


def test_predicted_rejects_model_set():
    patch = generate_model_set_patch(fibonacci_scheme(), 20)
    with pytest.raises(ValueError):
        predicted_spectrum(patch, None, uniform_grid(0, 1, 0.1))


def test_classify_self_is_zero(bernoulli_samples, z_patch):
    grid = uniform_grid(-1.5, 1.5, default_step(z_patch.radius))
    spec, _ = predicted_spectrum(z_patch, decompose(z_patch, bernoulli_samples, 4, values=[0, 1]), grid)
    res = classify_spectrum(spec, spec)
    assert res.residual_sup == 0 and res.residual_l1 == 0
    assert len(res.matched) == 3 and not res.unmatched_predicted and not res.extra_empirical
    assert res.max_relative_weight_error == 0


def test_classify_bernoulli_end_to_end(bernoulli_samples, z_patch):
    grid = uniform_grid(-1.5, 1.5, default_step(z_patch.radius))
    emp = periodogram(z_patch, grid, bernoulli_samples, values=[0, 1])
    pred, _ = predicted_spectrum(z_patch, decompose(z_patch, bernoulli_samples, 6, values=[0, 1], periodic=True),
                                 grid)
    res = classify_spectrum(emp, pred)
    assert len(res.matched) == 3
    assert res.max_relative_weight_error < 0.10
    assert res.background == pytest.approx(0.25, rel=0.05)
    # off-peak residual is a mean of |noise| with per-point error ~ 0.25 / sqrt(S)
    assert res.relative_l1 < 3 / math.sqrt(len(bernoulli_samples))


def test_classify_grid_mismatch():
    a = constant_spectrum(uniform_grid(0, 1, 0.1), 1.0)
    b = constant_spectrum(uniform_grid(0, 1, 0.05), 1.0)
    with pytest.raises(ValueError, match="grid mismatch"):
        classify_spectrum(a, b)


def test_classify_fibonacci_residual_shrinks():
    runs = []
    for r in (500, 1000):
        patch = generate_model_set_patch(fibonacci_scheme(), r)
        grid = uniform_grid(0, 2, default_step(r))
        runs.append((periodogram(patch, grid), constant_spectrum(grid, 0.0, r)))
    res = classify_spectrum(*runs[0], refinement=runs[1])
    assert res.refined_residual_l1 < res.residual_l1
    assert res.residual_ratio < 0.7


def test_periodicity_checks(bernoulli_samples, z_patch):
    grid = uniform_grid(-1, 1, 1 / 64)
    lam = math.tanh(0.1)
    dens = fourier_series_density(geometric_table(lam, 40), grid).values
    pred = DiffractionSpectrum(np.zeros((0, 1)), [], grid, dens, "predicted", 1e4)
    assert periodicity_check(pred, [1]) < 1e-9
    assert periodicity_check(constant_spectrum(grid, 3.0), [1]) == 0
    egrid = uniform_grid(-1, 1, default_step(z_patch.radius))
    emp = periodogram(z_patch, egrid, bernoulli_samples, values=[0, 1])
    shift = int(round(1 / egrid.steps[0]))
    n = egrid.size - shift
    diff = emp.density[shift:] - emp.density[:n]
    sigma = np.sqrt(emp.stderr[shift:] ** 2 + emp.stderr[:n] ** 2)
    # translates by the dual lattice coincide to rounding (periodogram of a lattice is periodic)
    assert periodicity_check(emp, [1]) <= np.max(3 * sigma)
    assert np.max(np.abs(diff)) == periodicity_check(emp, [1])
    with pytest.raises(ValueError, match="grid too small"):
        periodicity_check(constant_spectrum(uniform_grid(0, 1.5, 1 / 8), 1.0), [1])


def test_shell_partial_sums_cauchy():
    table = geometric_table(0.6, 30)
    grid = uniform_grid(-0.5, 0.5, 1 / 32)
    shells = [2, 5, 9, 15, 30]
    sums = shell_partial_sums(table, grid, shells)
    mags = np.abs(table.values)
    norms = table.norms
    for a in range(len(shells)):
        for b in range(a + 1, len(shells)):
            bound = mags[(norms > shells[a]) & (norms <= shells[b])].sum()
            assert np.max(np.abs(sums[b] - sums[a])) <= bound + 1e-12


def test_ball_window_profile():
    assert ball_window_profile(np.zeros(1), 5, 1)[0] == pytest.approx(10.0)
    assert ball_window_profile(np.zeros((1, 2)), 5, 2)[0] == pytest.approx(25 * math.pi)
    k = np.array([0.1, 0.37])
    assert np.allclose(ball_window_profile(k, 7, 1), np.sin(2 * np.pi * k * 7) ** 2 / (np.pi * k) ** 2 / 14)


def test_spectrum_csv_roundtrip(tmp_path, bernoulli_samples, z_patch):
    grid = uniform_grid(-1.2, 1.2, 1 / 128)
    emp = periodogram(z_patch, grid, bernoulli_samples[:8], values=[0, 1])
    emp.write_csv(tmp_path / "s.csv")
    back = DiffractionSpectrum.read_csv(tmp_path / "s.csv")
    assert back.grid.same_as(grid) and back.kind == "empirical"
    assert np.array_equal(back.density, emp.density) and np.array_equal(back.peak_weights, emp.peak_weights)
    assert np.allclose(back.peak_positions, emp.peak_positions)
