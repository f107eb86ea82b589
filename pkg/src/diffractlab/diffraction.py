"""Predicted and empirical diffraction spectra on uniform wave-vector grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage, special
from scipy.spatial import cKDTree

from .autocorr import AutocorrelationTable, summability_check, weights_matrix
from .pointset import PointSetPatch, ball_volume, generate_lattice_patch

DEFAULT_THRESHOLD = 50.0
DEFAULT_PEAK_HALFWIDTH = 10.0  # in units of 1/r
_CHUNK = 1 << 22
_LEAK_FACTOR = 4.0  # slack on the side-lobe envelope


@dataclass(frozen=True, eq=False)
class KGrid:
    """Tensor-product grid ``k = index * step`` along each axis."""

    axes: tuple

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(np.asarray(a, dtype=float) for a in self.axes))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def steps(self) -> np.ndarray:
        return np.array([a[1] - a[0] if a.size > 1 else 1.0 for a in self.axes])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.steps))

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def same_as(self, other: "KGrid") -> bool:
        return self.shape == other.shape and all(np.allclose(a, b, atol=1e-12) for a, b in zip(self.axes, other.axes))


def uniform_grid(lo: float, hi: float, step: float, dim: int = 1) -> KGrid:
    """Grid points ``j * step`` in ``[lo, hi]`` on every axis."""
    j = np.arange(math.ceil(lo / step - 1e-9), math.floor(hi / step + 1e-9) + 1)
    return KGrid(tuple(j * step for _ in range(dim)))


def default_step(radius: float) -> float:
    return 1.0 / (8.0 * radius)


@dataclass(frozen=True, eq=False)
class DiffractionSpectrum:
    """Pure-point peaks plus a density sampled on ``grid`` (per unit volume)."""

    peak_positions: np.ndarray
    peak_weights: np.ndarray
    grid: KGrid
    density: np.ndarray
    kind: str = "predicted"
    patch_radius: float = math.nan
    stderr: np.ndarray | None = None
    peak_windows: np.ndarray | None = field(default=None, repr=False)
    normalization: str = "per unit volume"

    def __post_init__(self):
        pos = np.asarray(self.peak_positions, dtype=float).reshape(-1, self.grid.dim)
        object.__setattr__(self, "peak_positions", pos)
        object.__setattr__(self, "peak_weights", np.asarray(self.peak_weights, dtype=float).ravel())
        object.__setattr__(self, "density", np.asarray(self.density, dtype=float).ravel())
        if self.stderr is not None:
            object.__setattr__(self, "stderr", np.asarray(self.stderr, dtype=float).ravel())
        if self.density.size != self.grid.size:
            raise ValueError("density does not match grid")

    def write_csv(self, path) -> None:
        d = self.grid.dim
        knames = ["k1", "k2"][:d]
        lines = [f"# kind={self.kind}; patch_radius={self.patch_radius!r}; normalization={self.normalization}",
                 "[peaks]", ",".join(knames + ["weight"])]
        for k, w in zip(self.peak_positions, self.peak_weights):
            lines.append(",".join([f"{c:.12g}" for c in k] + [repr(float(w))]))
        lines += ["[density]", ",".join(knames + ["value", "stderr"])]
        se = self.stderr if self.stderr is not None else np.zeros(self.density.size)
        for k, v, s in zip(self.grid.points(), self.density, se):
            lines.append(",".join([f"{c:.12g}" for c in k] + [repr(float(v)), repr(float(s))]))
        Path(path).write_text("\n".join(lines) + "\n", newline="\n")

    @classmethod
    def read_csv(cls, path) -> "DiffractionSpectrum":
        text = Path(path).read_text().splitlines()
        meta = dict(part.strip().split("=", 1) for part in text[0][1:].split(";"))
        split = text.index("[density]")
        d = len(text[2].split(",")) - 1
        peaks = np.array([list(map(float, l.split(","))) for l in text[3:split] if l.strip()]).reshape(-1, d + 1)
        dens = np.array([list(map(float, l.split(","))) for l in text[split + 2:] if l.strip()]).reshape(-1, d + 2)
        axes = tuple(np.unique(np.round(dens[:, a], 12)) for a in range(d))
        grid = KGrid(axes)
        order = np.lexsort(dens[:, :d].T[::-1])
        dens = dens[order]
        return cls(peaks[:, :d], peaks[:, d], grid, dens[:, d], meta["kind"], float(meta["patch_radius"]),
                   dens[:, d + 1], None, meta.get("normalization", "per unit volume"))


@dataclass(frozen=True)
class ProfileMeasure:
    """Finite atomic measure: ``sum_a w_a delta_{pos_a}``."""

    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        object.__setattr__(self, "positions", pos.reshape(len(pos), -1) if pos.ndim else pos.reshape(1, 1))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=complex).ravel())

    def transform(self, k: np.ndarray) -> np.ndarray:
        """``rho_hat(k) = sum_a w_a exp(-2 pi i k . pos_a)``."""
        k = np.asarray(k, dtype=float).reshape(-1, self.positions.shape[1])
        return np.exp(-2j * np.pi * k @ self.positions.T) @ self.weights


def dual_lattice(basis) -> np.ndarray:
    """Inverse transpose; its columns generate the dual lattice."""
    b = np.atleast_2d(np.asarray(basis, dtype=float))
    if abs(np.linalg.det(b)) < 1e-12:
        raise ValueError("degenerate lattice")
    return np.linalg.inv(b).T


def poisson_pp(basis, dens: float, k_window: float):
    """Bragg peaks ``dens^2`` at dual-lattice points with ``|k| <= k_window``."""
    if dens <= 0:
        raise ValueError("density must be positive")
    dual = dual_lattice(basis)
    peaks = generate_lattice_patch(dual, k_window).points
    return peaks, np.full(len(peaks), dens**2)


def profile_modulation(spectrum: DiffractionSpectrum, rho: ProfileMeasure) -> DiffractionSpectrum:
    if spectrum.kind != "predicted":
        raise ValueError("profile modulation applies to predicted spectra")
    at_peaks = np.abs(rho.transform(spectrum.peak_positions)) ** 2
    on_grid = np.abs(rho.transform(spectrum.grid.points())) ** 2
    return DiffractionSpectrum(spectrum.peak_positions, spectrum.peak_weights * at_peaks, spectrum.grid,
                               spectrum.density * on_grid, "predicted", spectrum.patch_radius)


class SeriesDensity(NamedTuple):
    values: np.ndarray
    tail_bound: float
    imag_residue: float
    stderr: np.ndarray | None


def _exp_sum(coeffs: np.ndarray, z: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``sum_z coeffs[..., z] exp(-2 pi i k . z)`` for every row of ``k``."""
    coeffs = np.atleast_2d(coeffs)
    out = np.empty((coeffs.shape[0], len(k)), dtype=complex)
    rows = max(1, _CHUNK // max(len(z), 1))
    for start in range(0, len(k), rows):
        phase = np.exp(-2j * np.pi * (k[start:start + rows] @ z.T))
        out[:, start:start + rows] = coeffs @ phase.T
    return out


def _fit_tail(table: AutocorrelationTable, d: int) -> float:
    flag, slope, _ = summability_check(table, d)
    if slope == -math.inf:
        return 0.0
    if not flag or not math.isfinite(slope):
        return math.inf
    norms = table.norms
    outer = (norms >= table.cutoff / 2) & (norms > 0) & (np.abs(table.values) > 0)
    # log-space: amp * cutoff^slope underflows/overflows separately for steep fits
    log_amp = float(np.mean(np.log(np.abs(table.values[outer])) - slope * np.log(norms[outer])))
    point_density = len(table) / ball_volume(max(table.cutoff, 1e-300), d)
    surface = 2.0 if d == 1 else 2 * math.pi
    log_tail = log_amp + (slope + d) * math.log(table.cutoff)
    return point_density * surface * math.exp(min(log_tail, 700.0)) / (-slope - d)


def fourier_series_density(table: AutocorrelationTable, k_grid: KGrid) -> SeriesDensity:
    """``sum_z g(z) exp(-2 pi i k z)`` on the grid, real by Hermitian symmetry."""
    total = float(np.abs(table.values).sum())
    if table.hermitian_defect() > 1e-12 * max(total, 1e-300):
        raise ValueError("asymmetric table")
    k = k_grid.points()
    s = _exp_sum(table.values, table.z, k)[0]
    imag = float(np.abs(s.imag).max(initial=0.0))
    if imag > 1e-9 * max(total, 1e-300):
        raise ValueError(f"imaginary residue {imag:g} exceeds tolerance")
    se = None
    if table.per_sample is not None and table.per_sample.shape[0] > 1:
        per = _exp_sum(table.per_sample, table.z, k).real
        se = per.std(axis=0, ddof=1) / math.sqrt(per.shape[0])
    return SeriesDensity(s.real, _fit_tail(table, table.dim), imag, se)


def shell_partial_sums(table: AutocorrelationTable, k_grid: KGrid, shells):
    """Partial Fourier sums over ``|z| <= shell`` for each shell radius."""
    k = k_grid.points()
    out = []
    for radius in shells:
        keep = table.norms <= radius + 1e-9
        out.append(_exp_sum(table.values[keep], table.z[keep], k)[0])
    return out


# -- periodogram -----------------------------------------------------------

def _fft_plan(patch: PointSetPatch, grid: KGrid):
    """Index data for evaluating the exponential sum by zero-padded FFT, or None."""
    if not patch.is_lattice or not np.allclose(patch.basis, np.diag(np.diag(patch.basis))):
        return None
    if patch.lattice_coords is None or len(patch) == 0:
        return None
    b = np.diag(patch.basis)
    steps = grid.steps
    sizes, idx = [], []
    n = patch.lattice_coords
    lo = n.min(axis=0)
    for a, axis in enumerate(grid.axes):
        m_real = 1.0 / (abs(b[a]) * steps[a])
        m = int(round(m_real))
        extent = int(n[:, a].max() - lo[a] + 1)
        if abs(m_real - m) > 1e-9 * m or m < extent:
            return None
        j = axis / steps[a]
        if np.max(np.abs(j - np.round(j))) > 1e-6:
            return None
        sign = 1 if b[a] > 0 else -1
        sizes.append(m)
        idx.append((sign * np.round(j).astype(np.int64)) % m)
    return lo, sizes, idx


def _periodogram_values(patch: PointSetPatch, h: np.ndarray, grid: KGrid, method: str) -> np.ndarray:
    """``(S, G)`` array ``|sum_x H_x e^{-2 pi i k x}|^2 / vol`` per sample."""
    plan = _fft_plan(patch, grid) if method in ("auto", "fft") else None
    if method == "fft" and plan is None:
        raise ValueError("FFT path needs a diagonal lattice patch and an aligned grid")
    vol = patch.volume
    if plan is not None:
        lo, sizes, idx = plan
        s = h.shape[0]
        arr = np.zeros((s, *sizes), dtype=complex)
        rel = patch.lattice_coords - lo
        arr[(slice(None), *rel.T)] = h
        spec = np.fft.fftn(arr, axes=tuple(range(1, 1 + len(sizes))))
        mesh = np.meshgrid(*idx, indexing="ij")
        vals = spec[(slice(None), *[m.ravel() for m in mesh])]
        return (vals.real**2 + vals.imag**2) / vol
    k = grid.points()
    amp = _exp_sum(h, patch.points, k)
    return (amp.real**2 + amp.imag**2) / vol


def _window_cells(grid: KGrid, centre: np.ndarray, radius: float):
    """Flat indices of grid cells within ``radius`` of ``centre``."""
    steps = grid.steps
    ranges = []
    for a, axis in enumerate(grid.axes):
        lo = np.searchsorted(axis, centre[a] - radius - 1e-12, side="left")
        hi = np.searchsorted(axis, centre[a] + radius + 1e-12, side="right")
        ranges.append(np.arange(lo, hi))
    if any(r.size == 0 for r in ranges):
        return np.zeros(0, dtype=np.int64)
    mesh = np.meshgrid(*ranges, indexing="ij")
    coords = np.stack([grid.axes[a][m.ravel()] for a, m in enumerate(mesh)], axis=1)
    inside = np.linalg.norm(coords - centre, axis=1) <= radius + 1e-12
    flat = np.ravel_multi_index(tuple(m.ravel() for m in mesh), grid.shape)
    return flat[inside]


def _peak_windows(grid: KGrid, positions: np.ndarray, halfwidth: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-peak window radii and the union mask of all windows on the grid."""
    radii = np.full(len(positions), halfwidth)
    if len(positions) > 1:
        tree = cKDTree(positions)
        gaps, _ = tree.query(positions, k=2)
        radii = np.minimum(radii, 0.5 * gaps[:, 1])
    mask = np.zeros(grid.size, dtype=bool)
    for p, rad in zip(positions, radii):
        mask[_window_cells(grid, p, rad)] = True
    return radii, mask


def extract_peaks(grid: KGrid, values: np.ndarray, radius: float, threshold: float = DEFAULT_THRESHOLD,
                  halfwidth: float | None = None):
    """Candidate Bragg peaks of a sampled intensity.

    Connected cells above ``threshold * median`` form a candidate located at
    its maximum; candidates within ``halfwidth`` (default ``10 / r``) of a
    stronger one, or below the side-lobe envelope of the stronger peaks, are
    finite-size leakage and are dropped.  The weight is
    the background-subtracted intensity integrated over a window of radius
    ``halfwidth`` (capped at half the distance to the nearest peak); the
    background is the median over cells outside every window.
    """
    halfwidth = DEFAULT_PEAK_HALFWIDTH / radius if halfwidth is None else halfwidth
    field_ = values.reshape(grid.shape)
    level = threshold * float(np.median(values))
    labels, count = ndimage.label(field_ > level)
    if count == 0:
        return np.zeros((0, grid.dim)), np.zeros(0), np.zeros(0), float(np.median(values))
    maxima = ndimage.maximum_position(field_, labels, index=np.arange(1, count + 1))
    heights = np.array([field_[i] for i in maxima])
    cand = np.array([[grid.axes[a][i[a]] for a in range(grid.dim)] for i in maxima])
    floor = float(np.median(values))
    keep = []
    for n in np.argsort(-heights, kind="stable"):
        if not keep:
            keep.append(n)
            continue
        gaps = np.linalg.norm(cand[keep] - cand[n], axis=1)
        if np.any(gaps <= halfwidth):
            continue
        # leakage of the stronger peaks: |window transform|^2 <= 1 / (pi k L)^2
        leak = np.sum((heights[keep] - floor) * _LEAK_FACTOR / (np.pi * gaps * 2.0 * radius) ** 2)
        if heights[n] - floor > leak:
            keep.append(n)
    positions = cand[keep]
    positions = positions[np.lexsort(positions.T[::-1])]
    radii, mask = _peak_windows(grid, positions, halfwidth)
    background = float(np.median(values[~mask])) if np.any(~mask) else 0.0
    weights = np.array([float(np.sum(values[_window_cells(grid, p, rad)] - background)) * grid.cell_volume
                        for p, rad in zip(positions, radii)])
    return positions, weights, radii, background


def periodogram(patch: PointSetPatch, k_grid: KGrid, samples=None, values=None,
                threshold: float = DEFAULT_THRESHOLD, halfwidth: float | None = None,
                method: str = "auto") -> DiffractionSpectrum:
    """Empirical spectrum ``|sum_x H_x e^{-2 pi i k x}|^2 / vol(B_r)`` averaged over samples.

    ``samples=None`` means unit weights.  ``method`` is ``auto``, ``direct``
    or ``fft`` (lattice patches with diagonal basis and aligned grids).
    """
    if len(patch) == 0:
        raise ValueError("empty patch")
    h = np.ones((1, len(patch)), dtype=complex) if samples is None else weights_matrix(samples, values)
    per = _periodogram_values(patch, h, k_grid, method)
    mean = per.mean(axis=0)
    se = per.std(axis=0, ddof=1) / math.sqrt(per.shape[0]) if per.shape[0] > 1 else np.zeros(per.shape[1])
    pos, weights, radii, _ = extract_peaks(k_grid, mean, patch.radius, threshold, halfwidth)
    return DiffractionSpectrum(pos, weights, k_grid, mean, "empirical", patch.radius, se, radii)


def predicted_spectrum(patch: PointSetPatch, decomposition, k_grid: KGrid, k_window: float | None = None,
                       report=None) -> tuple[DiffractionSpectrum, bool]:
    """Lattice-gas prediction: ``|E H|^2`` times the Poisson comb plus the covariance density.

    ``decomposition`` is the triple from :func:`autocorr.decompose`.  Returns
    ``(spectrum, certified)`` where ``certified`` reflects the Dobrushin
    report (True when none is given).
    """
    if not patch.is_lattice:
        raise ValueError("predicted spectrum needs a lattice patch")
    pp, cov_part, _ = decomposition
    eta0 = len(patch) / patch.volume
    mean_sq = pp[np.zeros(patch.dim)].real / eta0
    if k_window is None:
        k_window = float(np.max(np.abs(k_grid.points())))
    dens = 1.0 / abs(np.linalg.det(patch.basis))
    pos, w = poisson_pp(patch.basis, dens, k_window)
    ac = fourier_series_density(cov_part, k_grid)
    spec = DiffractionSpectrum(pos, w * mean_sq, k_grid, ac.values, "predicted", patch.radius, ac.stderr)
    certified = True if report is None else bool(report.satisfied)
    return spec, certified


def model_set_spectrum(patch: PointSetPatch, mean_sq: float, cov_part: AutocorrelationTable, k_grid: KGrid,
                       threshold: float = DEFAULT_THRESHOLD, halfwidth: float | None = None) -> DiffractionSpectrum:
    """Prediction for weighted model sets: ``|E H|^2`` times the unweighted peaks plus the covariance density.

    No closed-form comb is available off the lattice, so the pure-point part
    is the peak list of the unit-weight periodogram of the same patch.
    """
    unit = periodogram(patch, k_grid, threshold=threshold, halfwidth=halfwidth)
    ac = fourier_series_density(cov_part, k_grid)
    return DiffractionSpectrum(unit.peak_positions, unit.peak_weights * mean_sq, k_grid, ac.values,
                               "predicted", patch.radius, ac.stderr)


# -- classification ----------------------------------------------------------

@dataclass
class Classification:
    matched: list  # (k_pred, w_pred, k_emp, w_emp, rel_error)
    unmatched_predicted: list
    extra_empirical: list
    background: float
    residual_sup: float
    residual_l1: float
    relative_l1: float
    predicted_background: float = math.nan
    refined_residual_l1: float | None = None
    residual_ratio: float | None = None

    @property
    def max_relative_weight_error(self) -> float:
        return max((abs(m[4]) for m in self.matched), default=0.0)

    def to_text(self) -> str:
        def num(x):
            return repr(None if x is None else float(x))

        def vec(k):
            return ",".join(f"{c:.12g}" for c in k)

        lines = [
            f"matched_peaks={len(self.matched)}",
            f"unmatched_predicted_peaks={len(self.unmatched_predicted)}",
            f"extra_empirical_peaks={len(self.extra_empirical)}",
            f"max_relative_weight_error={num(self.max_relative_weight_error)}",
            f"background={num(self.background)}",
            f"predicted_background={num(self.predicted_background)}",
            f"residual_sup={num(self.residual_sup)}",
            f"residual_l1={num(self.residual_l1)}",
            f"relative_l1={num(self.relative_l1)}",
        ]
        if self.refined_residual_l1 is not None:
            lines += [f"refined_residual_l1={num(self.refined_residual_l1)}",
                      f"residual_ratio={num(self.residual_ratio)}"]
        for n, (kp, wp, ke, we, err) in enumerate(self.matched):
            lines += [f"peak.{n}.k={vec(kp)}", f"peak.{n}.predicted_weight={num(wp)}",
                      f"peak.{n}.empirical_weight={num(we)}", f"peak.{n}.relative_error={num(err)}"]
        for n, (k, w) in enumerate(self.unmatched_predicted):
            lines += [f"unmatched.{n}.k={vec(k)}", f"unmatched.{n}.weight={num(w)}"]
        for n, (k, w) in enumerate(self.extra_empirical):
            lines += [f"extra.{n}.k={vec(k)}", f"extra.{n}.weight={num(w)}"]
        return "\n".join(lines) + "\n"


def ball_window_profile(k: np.ndarray, radius: float, dim: int) -> np.ndarray:
    """``|FT of 1_{B_r}|^2 / vol(B_r)`` at the rows of ``k``: the finite-size shape of a unit peak."""
    k = np.asarray(k, dtype=float).reshape(-1, dim)
    q = np.linalg.norm(k, axis=1)
    vol = ball_volume(radius, dim)
    amp = np.full(q.shape, vol)
    nz = q * radius > 1e-12
    nu = dim / 2.0
    amp[nz] = (radius / q[nz]) ** nu * special.jv(nu, 2.0 * np.pi * radius * q[nz])
    return amp**2 / vol


def peak_removed_density(spectrum: DiffractionSpectrum) -> np.ndarray:
    """Density with the finite-size leakage of every empirical peak subtracted.

    Predicted spectra are returned unchanged: their peaks are exact Dirac
    masses and carry no side lobes.
    """
    dens = spectrum.density.copy()
    if spectrum.kind != "empirical" or not math.isfinite(spectrum.patch_radius):
        return dens
    k = spectrum.grid.points()
    for pos, w in zip(spectrum.peak_positions, spectrum.peak_weights):
        dens -= w * ball_window_profile(k - pos, spectrum.patch_radius, spectrum.grid.dim)
    return dens


def _residual(empirical: DiffractionSpectrum, predicted: DiffractionSpectrum):
    grid = empirical.grid
    positions = [p for p in empirical.peak_positions]
    positions += [p for p, w in zip(predicted.peak_positions, predicted.peak_weights) if w > 0]
    halfwidth = DEFAULT_PEAK_HALFWIDTH / empirical.patch_radius
    mask = np.zeros(grid.size, dtype=bool)
    if positions:
        _, mask = _peak_windows(grid, np.unique(np.round(np.array(positions), 12), axis=0), halfwidth)
    off = ~mask
    res = peak_removed_density(empirical)[off] - peak_removed_density(predicted)[off]
    sup = float(np.abs(res).max(initial=0.0))
    l1 = float(np.abs(res).sum() * grid.cell_volume)
    ref = float(np.abs(predicted.density[off]).sum() * grid.cell_volume)
    background = float(np.median(empirical.density[off])) if off.any() else 0.0
    expected = float(np.median(predicted.density[off])) if off.any() else 0.0
    return sup, l1, (l1 / ref if ref > 0 else math.inf), background, expected


def classify_spectrum(empirical: DiffractionSpectrum, predicted: DiffractionSpectrum,
                      refinement: tuple[DiffractionSpectrum, DiffractionSpectrum] | None = None) -> Classification:
    """Match peaks, then measure the off-peak residual against the predicted density.

    ``refinement`` is an ``(empirical, predicted)`` pair from a run at twice
    the radius; the ratio of off-peak L1 residuals is reported.  Empirical
    densities have the side lobes of their extracted peaks subtracted first.  A residual
    that neither concentrates into peaks nor flattens as ``r`` doubles is the
    finite-size signature of a singular continuous part.
    """
    if not empirical.grid.same_as(predicted.grid):
        raise ValueError("grid mismatch")
    step = float(empirical.grid.steps.max())
    matched, missing = [], []
    used = set()
    for kp, wp in zip(predicted.peak_positions, predicted.peak_weights):
        if len(empirical.peak_positions):
            dist = np.max(np.abs(empirical.peak_positions - kp), axis=1)
            n = int(np.argmin(dist))
            if dist[n] <= step * (1 + 1e-9):
                we = float(empirical.peak_weights[n])
                err = (we - wp) / wp if wp > 0 else (math.inf if we != 0 else 0.0)
                matched.append((kp, float(wp), empirical.peak_positions[n], we, err))
                used.add(n)
                continue
        if wp > 0:
            missing.append((kp, float(wp)))
    extra = [(k, float(w)) for n, (k, w) in enumerate(zip(empirical.peak_positions, empirical.peak_weights))
             if n not in used]
    sup, l1, rel, background, expected = _residual(empirical, predicted)
    out = Classification(matched, missing, extra, background, sup, l1, rel, expected)
    if refinement is not None:
        emp2, pred2 = refinement
        if not emp2.grid.same_as(pred2.grid):
            raise ValueError("grid mismatch")
        l1_2 = _residual(emp2, pred2)[1]
        out.refined_residual_l1 = l1_2
        out.residual_ratio = l1_2 / l1 if l1 > 0 else (0.0 if l1_2 == 0 else math.inf)
    return out


def periodicity_check(spectrum: DiffractionSpectrum, basis) -> float:
    """Max ``|density(k) - density(k + m)|`` over dual-lattice translates on the grid."""
    grid = spectrum.grid
    dual = dual_lattice(basis)
    if not np.allclose(dual, np.diag(np.diag(dual))) or dual.shape[0] != grid.dim:
        raise ValueError("periodicity check needs a diagonal lattice basis of the grid dimension")
    values = spectrum.density.reshape(grid.shape)
    worst = 0.0
    for a in range(grid.dim):
        shift_real = abs(dual[a, a]) / grid.steps[a]
        shift = int(round(shift_real))
        if abs(shift_real - shift) > 1e-6 * max(shift, 1):
            raise ValueError("dual translate does not fall on the grid")
        if grid.shape[a] < 2 * shift + 1:
            raise ValueError("grid too small")
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        lo[a] = slice(0, grid.shape[a] - shift)
        hi[a] = slice(shift, None)
        worst = max(worst, float(np.abs(values[tuple(hi)] - values[tuple(lo)]).max()))
    return worst


def constant_spectrum(grid: KGrid, value: float, radius: float = math.nan) -> DiffractionSpectrum:
    return DiffractionSpectrum(np.zeros((0, grid.dim)), np.zeros(0), grid, np.full(grid.size, value),
                               "predicted", radius)
