"""Acceptance criteria 1-8, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also collected into the terminal summary.
"""

import contextlib
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from diffractlab.autocorr import AutocorrelationTable, conditional_covariance_sum, covariance_estimate, decompose
from diffractlab.diffraction import (classify_spectrum, constant_spectrum, default_step,
                                     fourier_series_density, model_set_spectrum, peak_removed_density,
                                     periodicity_check, periodogram, poisson_pp, predicted_spectrum, uniform_grid)
from diffractlab.gibbs import (Kernel, MetricSpec, dobrushin_check, high_temperature_threshold, ising_potential,
                               sample_bernoulli, sample_gibbs)
from diffractlab.pointset import fibonacci_scheme, generate_lattice_patch, generate_model_set_patch

from conftest import ACCEPTANCE_LINES

BETA = 0.1
LAM = math.tanh(BETA)
ONE = MetricSpec("scaled_euclidean", 1.0)


def closed_form(k):
    return (1 - LAM**2) / (1 - 2 * LAM * np.cos(2 * np.pi * np.asarray(k)) + LAM**2)


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Collect ``(ok, detail)`` parts; print and record one line, then assert."""
    parts: list[tuple[bool, str]] = []
    try:
        yield parts
    except Exception as exc:
        parts.append((False, f"error: {type(exc).__name__}: {exc}"))
    ok = bool(parts) and all(p for p, _ in parts)
    line = f"criterion {number} {'PASS' if ok else 'FAIL'} [{title}] " + "; ".join(d for _, d in parts)
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line


def check(parts, ok, detail):
    parts.append((bool(ok), f"{'ok' if ok else 'FAILED'} {detail}"))


@pytest.fixture(scope="module")
def z4097():
    return generate_lattice_patch([1], 2048)


@pytest.fixture(scope="module")
def ising200(z4097):
    samples = sample_gibbs(z4097, ising_potential(BETA), sweeps=2000, burn_in=1000, thinning=10, seed=11)
    assert len(samples) == 200
    return samples


def test_criterion_1_bernoulli_closed_form(z4097):
    with criterion(1, "Bernoulli closed form") as parts:
        start = time.perf_counter()
        samples = sample_bernoulli(z4097, [0.5, 0.5], 256, seed=1)
        grid = uniform_grid(-1.5, 1.5, default_step(z4097.radius))
        emp = periodogram(z4097, grid, samples, values=[0, 1])
        pred, _ = predicted_spectrum(z4097, decompose(z4097, samples, 8, values=[0, 1], periodic=True), grid)
        res = classify_spectrum(emp, pred)
        elapsed = time.perf_counter() - start
        k = grid.axes[0]
        background = float(np.median(emp.density[np.abs(k - np.round(k)) > 0.05]))
        check(parts, abs(background - 0.25) <= 0.02, f"background {background:.5f} (0.25 +- 0.02)")
        weights = {round(float(p[0]), 6): float(w) for p, w in zip(emp.peak_positions, emp.peak_weights)}
        errs = [abs(weights.get(float(m), math.nan) - 0.25) / 0.25 for m in (-1, 0, 1)]
        check(parts, all(e <= 0.10 for e in errs), "peak weights at -1, 0, 1: "
              + ", ".join(f"{weights.get(float(m), math.nan):.4f}" for m in (-1, 0, 1)) + " (0.25 +- 10%)")
        check(parts, len(res.matched) == 3 and not res.extra_empirical, f"{len(res.matched)} peaks matched")
        check(parts, elapsed < 60, f"runtime {elapsed:.1f} s (< 60 s)")


def test_criterion_2_ising_oracle(z4097, ising200):
    with criterion(2, "1D Ising oracle") as parts:
        cov = covariance_estimate(z4097, ising200, 8, mode="translation_average", values=[1, -1], periodic=True)
        zs = np.arange(-8, 9)
        dev = np.array([abs(cov[[z]].real - LAM ** abs(z)) / cov.stderr_at([z]) for z in zs])
        check(parts, np.all(dev <= 3), f"(a) max |cov - tanh^|z||/sigma = {dev.max():.2f} over |z| <= 8 (<= 3)")

        grid = uniform_grid(0, 1 - default_step(z4097.radius), default_step(z4097.radius))
        zz = np.arange(-200, 201, dtype=float)
        exact = AutocorrelationTable(zz[:, None], LAM ** np.abs(zz), "covariance", 1e6, cutoff=200)
        err = float(np.max(np.abs(fourier_series_density(exact, grid).values - closed_form(grid.axes[0]))))
        check(parts, err <= 1e-6, f"(b) exact geometric table max error {err:.2e} (<= 1e-6)")
        dens = 1.0  # points per unit length of Z
        mc = fourier_series_density(AutocorrelationTable(cov.z, dens * cov.values, "covariance", cov.patch_radius,
                                                         cov.sample_count, cov.cutoff, cov.stderr,
                                                         None if cov.per_sample is None else dens * cov.per_sample),
                                    grid)
        tail = 2 * LAM**9 / (1 - LAM)
        z_score = float(np.max((np.abs(mc.values - closed_form(grid.axes[0])) - tail) / mc.stderr))
        check(parts, z_score <= 3, f"(b) Monte Carlo table max deviation {z_score:.2f} sigma (<= 3)")

        emp = periodogram(z4097, grid, ising200, values=[1, -1])
        target = closed_form(grid.axes[0])
        rel = float(np.abs(peak_removed_density(emp) - target).sum() / target.sum())
        floor = math.sqrt(2 / math.pi) / math.sqrt(len(ising200))
        check(parts, rel <= 0.05, f"(c) peak-removed periodogram L1 {100 * rel:.2f}% over one period (<= 5%; "
              f"noise floor of a {len(ising200)}-sample periodogram is {100 * floor:.2f}%)")


def test_criterion_3_dobrushin_threshold():
    with criterion(3, "Dobrushin threshold") as parts:
        pot = ising_potential(1.0)
        star = high_temperature_threshold(pot, ONE)
        check(parts, abs(star - 1 / (2 * math.e)) <= 1e-12, f"threshold {star!r} vs 1/(2e) (|diff| <= 1e-12)")
        patch = generate_lattice_patch([1], 64)
        betas = sorted({0.05, 0.1, 0.15, 0.2, 0.25, 0.3} | {star * (1 + s * e) for s in (-1, 1)
                                                            for e in (1e-2, 1e-4, 1e-6, 1e-9)})
        wrong = [b for b in betas if dobrushin_check(ising_potential(b), patch, ONE).satisfied != (b < star)]
        check(parts, not wrong, f"satisfied == (beta < 1/(2e)) on {len(betas)} betas straddling it"
              + (f", wrong at {wrong}" if wrong else ""))


def test_criterion_4_poisson_summation():
    with criterion(4, "Poisson summation") as parts:
        cases = [([1], 2048, uniform_grid(-1.5, 1.5, 1 / 16384)),
                 ([2], 4096, uniform_grid(-1.2, 1.2, 1 / 32768)),
                 (np.eye(2), 36.2, uniform_grid(-1.3, 1.3, 1 / 512, 2))]
        for basis, r, grid in cases:
            patch = generate_lattice_patch(basis, r)
            b = np.atleast_2d(np.asarray(basis, dtype=float))
            dens = 1 / abs(np.linalg.det(b))
            edge = float(grid.axes[0][-1])
            pred, w = poisson_pp(b, dens, edge * math.sqrt(patch.dim))
            # keep peaks whose extraction window lies inside the grid
            inside = np.all(np.abs(pred) <= edge - 10 / r, axis=1)
            pred, w = pred[inside], w[inside]
            emp = periodogram(patch, grid)
            step = float(grid.steps.max())
            worst_pos, worst_w = 0.0, 0.0
            for p in pred:
                d = np.max(np.abs(emp.peak_positions - p), axis=1)
                n = int(np.argmin(d))
                worst_pos = max(worst_pos, float(d[n]) / step)
                worst_w = max(worst_w, abs(emp.peak_weights[n] - dens**2) / dens**2)
            label = "identity (d=2)" if patch.dim == 2 else f"[{b[0, 0]:g}]"
            check(parts, worst_pos <= 1 and worst_w <= 0.05 and len(emp.peak_positions) >= len(pred),
                  f"{label}: N={len(patch)}, {len(pred)} peaks, max offset {worst_pos:.2f} steps, "
                  f"max weight error {100 * worst_w:.2f}%")


def test_criterion_5_covariance_sum_bound(z4097, ising200):
    with criterion(5, "covariance-sum bound") as parts:
        rep = dobrushin_check(ising_potential(BETA), z4097, ONE)
        cov = covariance_estimate(z4097, ising200, 8, mode="translation_average", values=[1, -1], periodic=True)
        total = float(np.abs(cov.values).sum())
        sigma = float(np.sqrt(np.sum(cov.stderr**2)))
        check(parts, rep.satisfied and total <= rep.covariance_sum_bound + 3 * sigma,
              f"MC sum {total:.4f} +- {sigma:.4f} <= bound {rep.covariance_sum_bound:.4f}")
        exact = (1 + LAM) / (1 - LAM)
        check(parts, exact <= rep.covariance_sum_bound, f"exact (1+l)/(1-l) = {exact:.6f} <= bound")


def test_criterion_6_periodicity(z4097, ising200):
    with criterion(6, "Z-periodicity") as parts:
        grid = uniform_grid(-1, 1, default_step(z4097.radius))
        bern = sample_bernoulli(z4097, [0.5, 0.5], 64, seed=2)
        for name, samples, values in [("Bernoulli", bern, [0, 1]), ("Ising", ising200, [1, -1])]:
            pred, _ = predicted_spectrum(z4097, decompose(z4097, samples, 8, values=values, periodic=True), grid)
            dev = periodicity_check(pred, [1])
            check(parts, dev < 1e-9, f"{name} predicted deviation {dev:.1e} (< 1e-9)")
            emp = periodogram(z4097, grid, samples, values=values)
            shift = int(round(1 / grid.steps[0]))
            n = grid.size - shift
            sigma = np.sqrt(emp.stderr[shift:] ** 2 + emp.stderr[:n] ** 2)
            diff = np.abs(emp.density[shift:] - emp.density[:n])
            check(parts, np.all(diff <= 3 * sigma), f"{name} empirical max deviation {diff.max():.1e} within 3 sigma")


def test_criterion_7_model_set_pipeline():
    with criterion(7, "model-set pipeline") as parts:
        patch = generate_model_set_patch(fibonacci_scheme(), 500)
        dens = len(patch) / patch.volume
        grid = uniform_grid(0, 2, default_step(patch.radius))
        samples = sample_bernoulli(patch, [0.5, 0.5], 1024, seed=5)
        emp = periodogram(patch, grid, samples, values=[0, 1])
        z0 = np.zeros((1, 1))
        flat = AutocorrelationTable(z0, np.array([dens * 0.25 + 0j]), "covariance", patch.radius, cutoff=0)
        pred = model_set_spectrum(patch, 0.25, flat, grid)
        res = classify_spectrum(emp, pred)
        check(parts, res.relative_l1 <= 0.05,
              f"weighted spectrum off-peak L1 {100 * res.relative_l1:.2f}% vs |E|^2 unweighted + dens Var (<= 5%)")

        pot = ising_potential(0.05, Kernel("finite_range", range=1.7))
        star = high_temperature_threshold(pot, ONE, patch)
        rep = dobrushin_check(pot, patch, ONE)
        gibbs = sample_gibbs(patch, pot, sweeps=2000, burn_in=500, thinning=10, seed=1)
        total, se = conditional_covariance_sum(patch, gibbs, 1.2, 10, values=[1, -1])
        check(parts, 0.05 < star and rep.satisfied and total <= rep.covariance_sum_bound + 3 * se,
              f"finite-range Ising beta 0.05 < {star:.4f}: cluster-conditioned sum {total:.4f} +- {se:.4f} "
              f"<= bound {rep.covariance_sum_bound:.4f}")

        runs = []
        for r in (500, 1000):
            p = generate_model_set_patch(fibonacci_scheme(), r)
            g = uniform_grid(0, 2, default_step(r))
            runs.append((periodogram(p, g), constant_spectrum(g, 0.0, r)))
        ratio = classify_spectrum(*runs[0], refinement=runs[1]).residual_ratio
        check(parts, ratio < 0.7, f"residual(2r)/residual(r) = {ratio:.3f} (< 0.7)")


def test_criterion_8_property_suites():
    with criterion(8, "property suites") as parts:
        suite = Path(__file__).with_name("test_properties.py")
        proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(suite)],
                              capture_output=True, text=True, cwd=suite.parent)
        summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()
        check(parts, proc.returncode == 0, f"standalone run of {suite.name}: {summary}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
