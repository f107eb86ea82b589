"""Autocorrelation coefficients, covariances and their decomposition.

Every table is computed on the canonical half of the difference set
(``z = 0`` and ``z`` lexicographically positive) and mirrored, so
``entry(-z) == conj(entry(z))`` holds bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .gibbs import Configuration, _check_probabilities
from .pointset import PointSetPatch, QUANTUM, cluster_frequencies, difference_set, quantize, ClusterTable


@dataclass(frozen=True, eq=False)
class AutocorrelationTable:
    """Coefficients on difference vectors ``z`` (rows of ``z``, lexicographic)."""

    z: np.ndarray
    values: np.ndarray
    kind: str
    patch_radius: float
    sample_count: int = 1
    cutoff: float = 0.0
    stderr: np.ndarray | None = None
    per_sample: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=complex))
        se = np.zeros(len(z)) if self.stderr is None else np.asarray(self.stderr, dtype=float)
        object.__setattr__(self, "stderr", se)
        object.__setattr__(self, "_index", {tuple(k): n for n, k in enumerate(quantize(z).tolist())})

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def __getitem__(self, z) -> complex:
        """Coefficient at ``z``; 0 outside the table."""
        n = self._index.get(tuple(quantize(np.atleast_1d(z)).tolist()))
        return 0j if n is None else complex(self.values[n])

    def __contains__(self, z) -> bool:
        return tuple(quantize(np.atleast_1d(z)).tolist()) in self._index

    def stderr_at(self, z) -> float:
        n = self._index.get(tuple(quantize(np.atleast_1d(z)).tolist()))
        return 0.0 if n is None else float(self.stderr[n])

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.z, axis=1)

    def hermitian_defect(self) -> float:
        """``max |entry(-z) - conj(entry(z))|`` (inf if some ``-z`` is missing)."""
        worst = 0.0
        for n, key in enumerate(quantize(self.z).tolist()):
            m = self._index.get(tuple(-k for k in key))
            if m is None:
                return math.inf
            worst = max(worst, abs(self.values[m] - np.conj(self.values[n])))
        return worst

    def scaled(self, factor: float, kind: str | None = None) -> "AutocorrelationTable":
        ps = None if self.per_sample is None else self.per_sample * factor
        return AutocorrelationTable(self.z, self.values * factor, kind or self.kind, self.patch_radius,
                                    self.sample_count, self.cutoff, self.stderr * abs(factor), ps)

    def write_csv(self, path) -> None:
        names = ["z1", "z2"][: self.dim]
        lines = [f"# kind={self.kind}; patch_radius={self.patch_radius!r}; "
                 f"sample_count={self.sample_count}; cutoff={self.cutoff!r}",
                 ",".join(names + ["re", "im", "stderr"])]
        for zrow, v, se in zip(self.z, self.values, self.stderr):
            lines.append(",".join([f"{c:.12g}" for c in zrow] + [repr(float(v.real)), repr(float(v.imag)),
                                                                   repr(float(se))]))
        Path(path).write_text("\n".join(lines) + "\n", newline="\n")

    @classmethod
    def read_csv(cls, path) -> "AutocorrelationTable":
        text = Path(path).read_text().splitlines()
        meta = dict(part.strip().split("=", 1) for part in text[0][1:].split(";"))
        dim = len(text[1].split(",")) - 3
        rows = np.array([list(map(float, line.split(","))) for line in text[2:] if line.strip()]).reshape(-1, dim + 3)
        return cls(rows[:, :dim], rows[:, dim] + 1j * rows[:, dim + 1], meta["kind"],
                   float(meta["patch_radius"]), int(meta["sample_count"]), float(meta["cutoff"]),
                   rows[:, dim + 2])


def merge_tables(tables: list[AutocorrelationTable]) -> AutocorrelationTable:
    """Combine tables from independent workers by sample-count weighted mean."""
    first = tables[0]
    for t in tables[1:]:
        if t.kind != first.kind or not np.array_equal(quantize(t.z), quantize(first.z)):
            raise ValueError("tables are not on the same difference set")
    counts = np.array([t.sample_count for t in tables], dtype=float)
    vals = sum(c * t.values for c, t in zip(counts, tables)) / counts.sum()
    se = np.sqrt(sum((c * t.stderr) ** 2 for c, t in zip(counts, tables))) / counts.sum()
    return AutocorrelationTable(first.z, vals, first.kind, first.patch_radius, int(counts.sum()), first.cutoff, se)


# -- pair bookkeeping ------------------------------------------------------

def _is_positive_half(keys: np.ndarray) -> np.ndarray:
    """First nonzero component > 0, or the zero vector."""
    out = np.ones(len(keys), dtype=bool)
    decided = np.zeros(len(keys), dtype=bool)
    for c in range(keys.shape[1]):
        col = keys[:, c]
        out = np.where(~decided & (col != 0), col > 0, out)
        decided |= col != 0
    return out


@dataclass
class _HalfPairs:
    """Ordered pairs ``(x=i, x-z=j)`` grouped by half-plane key ``z``."""

    i: np.ndarray
    j: np.ndarray
    group: np.ndarray
    keys: np.ndarray  # (K, d) int, lexicographic

    def indicator(self) -> sparse.csr_matrix:
        p = len(self.i)
        return sparse.csr_matrix((np.ones(p), (np.arange(p), self.group)), shape=(p, len(self.keys)))

    def pair_counts(self) -> np.ndarray:
        return np.bincount(self.group, minlength=len(self.keys))


def _half_pairs(patch: PointSetPatch, cutoff: float, margin: float = 0.0, periodic: bool = False) -> _HalfPairs:
    if periodic:
        if not patch.is_lattice or patch.dim != 1:
            raise ValueError("periodic wrap is only available for 1D lattice patches")
        b = float(patch.basis[0, 0])
        n = len(patch)
        steps = np.arange(0, min(int(math.floor(cutoff / abs(b) + 1e-9)), n - 1) + 1)
        i = np.tile(np.arange(n), steps.size)
        j = (i - np.repeat(steps, n)) % n
        keys = quantize((steps * abs(b))[:, None])
        return _HalfPairs(i, j, np.repeat(np.arange(steps.size), n), keys)
    pairs = patch.tree().query_pairs(cutoff * (1 + 1e-12) + QUANTUM, output_type="ndarray")
    diag = np.arange(len(patch))
    i = np.concatenate([diag, pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([diag, pairs[:, 1], pairs[:, 0]])
    raw = quantize(patch.points[i]) - quantize(patch.points[j])
    keep = _is_positive_half(raw)
    if margin > 0:
        inner = np.zeros(len(patch), dtype=bool)
        inner[patch.interior(margin)] = True
        keep &= inner[i]
    i, j, raw = i[keep], j[keep], raw[keep]
    if len(raw) == 0:
        return _HalfPairs(i, j, np.zeros(0, dtype=np.int64), np.zeros((0, patch.dim), dtype=np.int64))
    keys, group = np.unique(raw, axis=0, return_inverse=True)
    order = np.lexsort((j, i))
    return _HalfPairs(i[order], j[order], group.ravel()[order], keys)


def _mirror(keys: np.ndarray, values: np.ndarray, stderr: np.ndarray | None, per_sample: np.ndarray | None):
    """Extend half-plane data to the full symmetric table."""
    nonzero = np.any(keys != 0, axis=1)
    # the z = 0 entry is real in exact arithmetic; drop rounding in its imaginary part
    values = np.where(nonzero, values, np.asarray(values).real + 0j)
    if per_sample is not None:
        per_sample = np.where(nonzero, per_sample, np.asarray(per_sample).real + 0j)
    full_keys = np.concatenate([keys, -keys[nonzero]])
    full_vals = np.concatenate([values, np.conj(values[nonzero])])
    order = np.lexsort(full_keys.T[::-1])
    se = None if stderr is None else np.concatenate([stderr, stderr[nonzero]])[order]
    ps = None
    if per_sample is not None:
        ps = np.concatenate([per_sample, np.conj(per_sample[:, nonzero])], axis=1)[:, order]
    return full_keys[order] * QUANTUM, full_vals[order], se, ps


def _cdiv(a, x):
    """Divide complex ``a`` by real ``x`` componentwise (no complex-division rounding)."""
    a = np.asarray(a)
    return (a.real / x) + 1j * (a.imag / x)


def weights_matrix(samples, values=None) -> np.ndarray:
    """``(S, N)`` complex array of scattering strengths for the samples."""
    if isinstance(samples, np.ndarray):
        h = np.asarray(samples, dtype=complex)
        return h[None, :] if h.ndim == 1 else h
    if values is None:
        raise ValueError("species values are required for Configuration samples")
    values = np.asarray(values, dtype=complex)
    return np.array([values[s.species] for s in samples], dtype=complex).reshape(len(samples), -1)


def _check_samples(patch: PointSetPatch, samples, h: np.ndarray) -> None:
    if h.shape[0] == 0:
        raise ValueError("need at least one sample")
    if h.shape[1] != len(patch):
        raise ValueError("sample/patch mismatch")
    if not isinstance(samples, np.ndarray) and any(s.patch is not patch for s in samples):
        if any(len(s.patch) != len(patch) or not np.array_equal(s.patch.points, patch.points) for s in samples):
            raise ValueError("sample/patch mismatch")


def _sem(per_sample: np.ndarray) -> np.ndarray:
    s = per_sample.shape[0]
    if s < 2:
        return np.zeros(per_sample.shape[1])
    var = np.var(per_sample.real, axis=0, ddof=1) + np.var(per_sample.imag, axis=0, ddof=1)
    return np.sqrt(var / s)


def _ensemble_jackknife(h: np.ndarray, hp: "_HalfPairs", ind, npairs: np.ndarray) -> np.ndarray:
    """Leave-one-sample-out standard error of the ensemble covariance per group."""
    s = h.shape[0]
    if s < 3:
        return np.zeros(len(npairs))
    x, y = h[:, hp.i], np.conj(h[:, hp.j])
    a = x * y
    big_x, big_y = x.sum(axis=0), y.sum(axis=0)
    const = np.asarray((a.sum(axis=0) - big_x * big_y / (s - 1)) @ ind).ravel()
    varying = np.asarray((a * (1 + 1 / (s - 1)) - (x * big_y + y * big_x) / (s - 1)) @ ind)
    loo = (const[None, :] - varying) / ((s - 2) * npairs)
    dev = loo - loo.mean(axis=0)
    return np.sqrt((s - 1) / s * np.sum(dev.real**2 + dev.imag**2, axis=0))


# -- estimators ------------------------------------------------------------

def eta_unweighted(patch: PointSetPatch, cutoff: float, periodic: bool = False) -> AutocorrelationTable:
    """``card{x : x, x - z in patch} / vol(B_r)`` on the difference set."""
    if cutoff > patch.radius + QUANTUM:
        raise ValueError("cutoff exceeds patch radius")
    if periodic:
        hp = _half_pairs(patch, cutoff, periodic=True)
        z, vals, _, _ = _mirror(hp.keys, hp.pair_counts() / patch.volume + 0j, None, None)
    else:
        z, counts = difference_set(patch, cutoff)
        vals = counts / patch.volume + 0j
    return AutocorrelationTable(z, vals, "unweighted_eta", patch.radius, 1, cutoff)


def eta_weighted(patch: PointSetPatch, samples, cutoff: float, values=None,
                 periodic: bool = False) -> AutocorrelationTable:
    """Sample mean of ``vol(B_r)^-1 sum_x H_x conj(H_{x-z})``."""
    h = weights_matrix(samples, values)
    _check_samples(patch, samples, h)
    hp = _half_pairs(patch, cutoff, periodic=periodic)
    prod = h[:, hp.i] * np.conj(h[:, hp.j])
    per = _cdiv(np.asarray(prod @ hp.indicator()), patch.volume)
    z, vals, se, ps = _mirror(hp.keys, _cdiv(per.sum(axis=0), per.shape[0]), _sem(per), per)
    return AutocorrelationTable(z, vals, "weighted_eta", patch.radius, h.shape[0], cutoff, se, ps)


def covariance_estimate(patch: PointSetPatch, samples, cutoff: float, mode: str = "ensemble",
                        values=None, margin: float = 0.0, periodic: bool = False) -> AutocorrelationTable:
    """Covariance ``E(H_x conj(H_{x-z})) - E(H_x) E(conj(H_{x-z}))`` per ``z``.

    ``ensemble`` uses site-wise sample means and averages over the pairs of
    each ``z``; ``translation_average`` pools samples and pairs (lattice
    patches only).  ``margin`` restricts ``x`` to points that far inside.
    """
    h = weights_matrix(samples, values)
    _check_samples(patch, samples, h)
    hp = _half_pairs(patch, cutoff, margin=margin, periodic=periodic)
    ind = hp.indicator()
    npairs = hp.pair_counts().astype(float)
    if npairs.size and npairs.min() == 0:
        raise ValueError("empty pair group")
    s = h.shape[0]
    if mode == "ensemble":
        if s < 2:
            raise ValueError("ensemble covariance needs at least two samples")
        site_mean = h.mean(axis=0)
        centre = site_mean[hp.i] * np.conj(site_mean[hp.j])
        # S / (S - 1): site means from the same samples shrink the covariance
        per = _cdiv(np.asarray((h[:, hp.i] * np.conj(h[:, hp.j]) - centre) @ ind), npairs) * (s / (s - 1))
        se = _ensemble_jackknife(h, hp, ind, npairs)
    elif mode == "translation_average":
        if not patch.is_lattice:
            raise ValueError("translation_average needs a lattice patch (translation-invariant measure)")
        mixed = _cdiv(np.asarray((h[:, hp.i] * np.conj(h[:, hp.j])) @ ind), npairs)
        xs = _cdiv(np.asarray(h[:, hp.i] @ ind), npairs)
        ys = _cdiv(np.asarray(np.conj(h[:, hp.j]) @ ind), npairs)
        mean_x = _cdiv(np.asarray(h[:, hp.i] @ ind).sum(axis=0), npairs * s)
        mean_y = _cdiv(np.asarray(np.conj(h[:, hp.j]) @ ind).sum(axis=0), npairs * s)
        per = mixed - mean_x * mean_y
        # linearised error of the product of means, plus its second-order term
        se = np.sqrt(_sem(mixed - mean_y * xs - mean_x * ys) ** 2 + (_sem(xs) * _sem(ys)) ** 2)
    else:
        raise ValueError(f"unknown covariance mode {mode!r}")
    z, vals, se, ps = _mirror(hp.keys, _cdiv(per.sum(axis=0), per.shape[0]), se, per)
    return AutocorrelationTable(z, vals, "covariance", patch.radius, s, cutoff, se, ps)


def decompose(patch: PointSetPatch, samples, cutoff: float, values=None, periodic: bool = False):
    """Split the weighted autocorrelation into ``|E H|^2 eta`` and ``dens * cov``.

    Returns ``(pp, cov_part, residual)`` with
    ``residual = max_z |eta_H(z) - pp(z) - cov_part(z)|``.
    """
    if not patch.is_lattice:
        raise ValueError("decomposition needs a lattice patch")
    h = weights_matrix(samples, values)
    weighted = eta_weighted(patch, h, cutoff, periodic=periodic)
    eta = eta_unweighted(patch, cutoff, periodic=periodic)
    cov = covariance_estimate(patch, h, cutoff, mode="translation_average", periodic=periodic)
    mean = h.mean()
    dens = len(patch) / patch.volume
    pp = eta.scaled(abs(mean) ** 2, kind="weighted_eta")
    pp = AutocorrelationTable(pp.z, pp.values, "weighted_eta", patch.radius, h.shape[0], cutoff)
    cov_part = cov.scaled(dens)
    resid = weighted.values - pp.values - cov_part.values
    return pp, cov_part, float(np.max(np.abs(resid))) if len(resid) else 0.0


def bernoulli_exact(dens: float, eta: AutocorrelationTable, p, c) -> AutocorrelationTable:
    """``|E H|^2 eta(z) + dens (E|H|^2 - |E H|^2) delta_{z,0}`` for i.i.d. weights."""
    p = _check_probabilities(p)
    c = np.asarray(c, dtype=complex).ravel()
    if c.size != p.size:
        raise ValueError("probabilities and values differ in length")
    mean = np.sum(p * c)
    second = np.sum(p * np.abs(c) ** 2)
    vals = abs(mean) ** 2 * eta.values
    zero = np.all(quantize(eta.z) == 0, axis=1)
    vals = vals + dens * (second - abs(mean) ** 2) * zero
    return AutocorrelationTable(eta.z, vals, "weighted_eta", eta.patch_radius, 0, eta.cutoff)


@dataclass(frozen=True)
class ClusterConditional:
    """Per-cluster conditional moments of ``H_x conj(H_{x-z})`` and their aggregate."""

    z: np.ndarray
    radius: float
    per_cluster: dict  # key -> dict(frequency, sites, mixed, mean_x, mean_xz, cov)
    aggregate: complex
    stderr: float
    abs_aggregate: float


def conditional_by_cluster(patch: PointSetPatch, samples, z, R: float, values=None,
                           clusters: ClusterTable | None = None) -> ClusterConditional:
    """Condition on the cluster of radius ``|z| + R`` around each interior ``x``.

    ``aggregate = sum_y f_y (E[H_x H_{x-z}^* | y] - E[H_x | y] E[H_{x-z}^* | y])``;
    clusters not containing ``x - z`` contribute zero.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    radius = float(np.linalg.norm(z)) + R
    if clusters is None:
        try:
            clusters = cluster_frequencies(patch, radius)
        except ValueError as exc:
            raise ValueError("no interior sites for the required cluster radius") from exc
    elif abs(clusters.radius - radius) > QUANTUM:
        raise ValueError("cluster table radius must equal |z| + R")
    h = weights_matrix(samples, values)
    _check_samples(patch, samples, h)
    s = h.shape[0]
    lookup = {tuple(k): n for n, k in enumerate(quantize(patch.points).tolist())}
    zq = quantize(z)
    q = quantize(patch.points)
    partner = np.array([lookup.get(tuple((q[x] - zq).tolist()), -1) for x in clusters.site_index])
    per_cluster = {}
    aggregate = 0j
    abs_aggregate = 0.0
    per_sample = np.zeros(s, dtype=complex)
    for label, key in enumerate(clusters.keys):
        freq = clusters.entries[key][0]
        mask = (clusters.site_label == label) & (partner >= 0)
        entry = {"frequency": freq, "sites": int(mask.sum()), "mixed": 0j, "mean_x": 0j,
                 "mean_xz": 0j, "cov": 0j}
        if mask.any():
            xs = clusters.site_index[mask]
            ys = partner[mask]
            hx, hy = h[:, xs], np.conj(h[:, ys])
            mixed_s = (hx * hy).mean(axis=1)
            mean_x, mean_y = hx.mean(), hy.mean()
            cov = mixed_s.mean() - mean_x * mean_y
            entry.update(mixed=complex(mixed_s.mean()), mean_x=complex(mean_x), mean_xz=complex(mean_y),
                         cov=complex(cov))
            aggregate += freq * cov
            abs_aggregate += freq * abs(cov)
            per_sample += freq * (mixed_s - mean_x * mean_y)
        per_cluster[key] = entry
    se = float(np.sqrt(np.var(per_sample.real, ddof=1) + np.var(per_sample.imag, ddof=1)) / math.sqrt(s)) \
        if s > 1 else 0.0
    return ClusterConditional(z, radius, per_cluster, complex(aggregate), se, abs_aggregate)


def conditional_covariance_sum(patch: PointSetPatch, samples, R: float, cutoff: float, values=None):
    """``sum_{|z| <= cutoff} sum_y f_y |cov(. | y)|`` with a combined standard error."""
    h = weights_matrix(samples, values)
    zs, _ = difference_set(patch, cutoff)
    total, var = 0.0, 0.0
    cache: dict = {}
    for z in zs:
        radius = float(np.linalg.norm(z)) + R
        key = round(radius / QUANTUM)
        if key not in cache:
            cache[key] = cluster_frequencies(patch, radius)
        res = conditional_by_cluster(patch, h, z, R, clusters=cache[key])
        total += res.abs_aggregate
        var += res.stderr**2
    return total, math.sqrt(var)


def summability_check(table: AutocorrelationTable, d: int):
    """Decay evidence for ``sum_z |g(z)| < inf``.

    Returns ``(flag, exponent, partial_sums)``: the least-squares slope of
    ``log|g|`` against ``log|z|`` over the outer half of the table, and the
    cumulative sums of ``|g|`` over shells of equal ``|z|``.  The flag needs
    ``exponent < -d`` and nonincreasing shell increments on the outer half.
    This is evidence, not proof.
    """
    norms = np.round(table.norms / QUANTUM) * QUANTUM
    shells, inverse = np.unique(norms, return_inverse=True)
    mags = np.bincount(inverse.ravel(), weights=np.abs(table.values), minlength=shells.size)
    peak = np.zeros(shells.size)
    np.maximum.at(peak, inverse.ravel(), np.abs(table.values))
    partial = np.cumsum(mags).tolist()
    cutoff = table.cutoff if table.cutoff > 0 else float(shells.max(initial=0.0))
    outer = (shells >= cutoff / 2) & (shells > 0)
    live = outer & (peak > 0)
    if not np.any(peak[outer] > 0):
        return True, -math.inf, partial
    if live.sum() < 2:
        return False, math.nan, partial
    slope = float(np.polyfit(np.log(shells[live]), np.log(peak[live]), 1)[0])
    inc = mags[outer]
    cauchy = bool(np.all(np.diff(inc) <= 1e-12 * max(inc.max(), 1e-300)))
    return bool(slope < -d and cauchy), slope, partial
