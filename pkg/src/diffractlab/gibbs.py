"""Pair potentials, finite-volume Gibbs distributions and the Dobrushin check.

Species are stored as 0-based indices into ``PotentialSpec.species_values``.
Every interaction term is ``beta * Re(phi[s, t]) * J(x - y)`` for a pair
``{x, y}``; higher-order terms are not representable.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np
from scipy import integrate

from .pointset import PointSetPatch, generate_lattice_patch

MAX_EXACT_SITES = 12
DEFAULT_TAIL_TOL = 1e-10


@dataclass(frozen=True)
class Kernel:
    """Radial coupling ``J``: finite range, exponential or algebraic decay.

    ``truncation`` optionally caps the radius used when building energies
    and sampler neighbour lists for the decaying kernels.
    """

    kind: str = "finite_range"
    J0: float = 1.0
    range: float = 1.0
    kappa: float = 1.0
    q: float = 3.0
    truncation: float | None = None

    def __post_init__(self):
        if self.kind not in ("finite_range", "exponential", "algebraic"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "finite_range" and self.range <= 0:
            raise ValueError("finite range must be positive")
        if self.kind == "exponential" and self.kappa <= 0:
            raise ValueError("non-summable kernel")
        if self.kind == "algebraic" and self.q <= 2:
            raise ValueError("non-summable kernel")

    def __call__(self, dist):
        dist = np.asarray(dist, dtype=float)
        if self.kind == "finite_range":
            return np.where(dist <= self.range * (1 + 1e-12), self.J0, 0.0)
        if self.kind == "exponential":
            return self.J0 * np.exp(-self.kappa * dist)
        with np.errstate(divide="ignore"):
            return np.where(dist > 0, self.J0 * np.abs(dist) ** -self.q, 0.0)

    @property
    def is_zero(self) -> bool:
        return self.J0 == 0

    def interaction_radius(self) -> float:
        """Radius beyond which pair terms are dropped in energies and sampling."""
        if self.kind == "finite_range":
            return self.range
        if self.truncation is not None:
            return self.truncation
        if self.kind == "exponential":
            return math.log(1e12) / self.kappa
        return 1e12 ** (1.0 / self.q)


@dataclass(frozen=True, eq=False)
class PotentialSpec:
    species_values: np.ndarray
    pair_function: np.ndarray
    beta: float = 1.0
    kernel: Kernel = field(default_factory=Kernel)

    def __post_init__(self):
        c = np.asarray(self.species_values, dtype=complex).ravel()
        phi = np.asarray(self.pair_function)
        n = c.size
        if n < 2:
            raise ValueError("need at least two species")
        if phi.shape != (n, n):
            raise ValueError("pair_function must be n x n")
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ValueError("beta must be finite and non-negative")
        if not np.allclose(phi.real, phi.real.T, atol=1e-14):
            raise ValueError("real part of pair_function must be symmetric")
        object.__setattr__(self, "species_values", c)
        object.__setattr__(self, "pair_function", phi)

    @property
    def n_species(self) -> int:
        return self.species_values.size

    @property
    def phi_real(self) -> np.ndarray:
        return np.ascontiguousarray(self.pair_function.real, dtype=float)

    @property
    def phi_spread(self) -> float:
        """sup - inf of the real pair energy over all species pairs."""
        return float(self.phi_real.max() - self.phi_real.min())

    @property
    def value_spread(self) -> float:
        """``max_{i,j} |c_i - c_j|``."""
        c = self.species_values
        return float(np.abs(c[:, None] - c[None, :]).max())


def ising_potential(beta: float, kernel: Kernel | None = None, values=(1.0, -1.0)) -> PotentialSpec:
    """Ising pair energy ``-s t`` with scattering strengths ``values``."""
    sigma = np.array([1.0, -1.0])
    return PotentialSpec(
        species_values=np.asarray(values, dtype=complex),
        pair_function=-np.outer(sigma, sigma),
        beta=beta,
        kernel=kernel or Kernel("finite_range", J0=1.0, range=1.0),
    )


@dataclass(frozen=True)
class MetricSpec:
    """``scaled_euclidean``: ``t |x-y|``; ``capped``: ``min(t |x-y|, floor(p) log(1+|x-y|))``."""

    kind: str = "scaled_euclidean"
    t: float = 1.0
    p: float = 2.0

    def __post_init__(self):
        if self.kind not in ("scaled_euclidean", "capped"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.t <= 0:
            raise ValueError("t must be positive")
        if self.kind == "capped" and self.p <= 1:
            raise ValueError("p must exceed 1")

    def of_distance(self, rho):
        rho = np.asarray(rho, dtype=float)
        lin = self.t * rho
        if self.kind == "scaled_euclidean":
            return lin
        return np.minimum(lin, math.floor(self.p) * np.log1p(rho))

    def __call__(self, x, y):
        return self.of_distance(np.linalg.norm(np.asarray(x, float) - np.asarray(y, float), axis=-1))


@dataclass(frozen=True, eq=False)
class Configuration:
    patch: PointSetPatch
    species: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.species, dtype=np.int64).ravel()
        if s.size != len(self.patch):
            raise ValueError("configuration length does not match patch")
        s.setflags(write=False)
        object.__setattr__(self, "species", s)

    def values(self, pot: PotentialSpec) -> np.ndarray:
        """Scattering strengths ``H_x``."""
        return pot.species_values[self.species]


def oscillation(pot: PotentialSpec, x, y) -> float:
    """sup - inf of the pair term on ``{x, y}`` over all species pairs."""
    dist = float(np.linalg.norm(np.atleast_1d(np.asarray(x, float) - np.asarray(y, float))))
    if dist == 0:
        raise ValueError("pair needs two distinct points")
    energies = pot.beta * pot.phi_real * float(pot.kernel(dist))
    return float(energies.max() - energies.min())


def _bonds(patch: PointSetPatch, pot: PotentialSpec, radius: float | None = None):
    """Unordered pairs ``i < j`` within the interaction radius and ``beta * J``."""
    radius = pot.kernel.interaction_radius() if radius is None else radius
    pairs = patch.tree().query_pairs(radius * (1 + 1e-12), output_type="ndarray")
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    dist = np.linalg.norm(patch.points[pairs[:, 0]] - patch.points[pairs[:, 1]], axis=1)
    w = pot.beta * pot.kernel(dist)
    keep = w != 0
    return pairs[keep], w[keep]


def _neighbour_csr(n_sites: int, pairs: np.ndarray, w: np.ndarray):
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    ww = np.concatenate([w, w])
    order = np.lexsort((dst, src))
    src, dst, ww = src[order], dst[order], ww[order]
    indptr = np.zeros(n_sites + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    return np.cumsum(indptr), dst.astype(np.int64), ww.astype(float)


def total_energy(config: Configuration, F, pot: PotentialSpec) -> float:
    """Sum of pair terms touching ``F`` (pairs inside ``F`` counted once)."""
    F = np.unique(np.asarray(list(F), dtype=np.int64))
    if F.size == 0:
        raise ValueError("F must be nonempty")
    pairs, w = _bonds(config.patch, pot)
    if pairs.size == 0:
        return 0.0
    inF = np.zeros(len(config.patch), dtype=bool)
    inF[F] = True
    touch = inF[pairs[:, 0]] | inF[pairs[:, 1]]
    s = config.species
    phi = pot.phi_real
    terms = w[touch] * phi[s[pairs[touch, 0]], s[pairs[touch, 1]]]
    return float(terms.sum())


def energy_tail_bound(pot: PotentialSpec, radius: float, dim: int, spacing: float) -> float:
    """Bound on ``sum_{|x|>radius} |beta J(x)| * phi_spread`` over any ``spacing``-separated set."""
    return pot.beta * pot.phi_spread * _weighted_tail(lambda rho: np.abs(pot.kernel(rho)), radius, dim, spacing)


def gibbs_conditional(F, boundary: Configuration, pot: PotentialSpec):
    """Exact Gibbs distribution on ``F`` given the rest of ``boundary``.

    Returns ``(states, probs)`` where ``states`` has one row per assignment
    of species to the sites of ``F`` (in sorted site order).
    """
    F = np.unique(np.asarray(list(F), dtype=np.int64))
    if F.size == 0:
        raise ValueError("F must be nonempty")
    if F.size > MAX_EXACT_SITES:
        raise ValueError("use sampler")
    n = pot.n_species
    states = np.array(list(itertools.product(range(n), repeat=F.size)), dtype=np.int64)
    pairs, w = _bonds(boundary.patch, pot)
    pos = -np.ones(len(boundary.patch), dtype=np.int64)
    pos[F] = np.arange(F.size)
    phi = pot.phi_real
    energy = np.zeros(len(states))
    s = boundary.species
    for (a, b), wab in zip(pairs, w):
        pa, pb = pos[a], pos[b]
        if pa < 0 and pb < 0:
            continue
        sa = states[:, pa] if pa >= 0 else s[a]
        sb = states[:, pb] if pb >= 0 else s[b]
        energy += wab * phi[sa, sb]
    logw = -(energy - energy.min())
    probs = np.exp(logw)
    probs /= probs.sum()
    return states, probs


@numba.njit(cache=True)
def _heat_bath_sweep(species, indptr, indices, coupling, phi, uniforms, frozen):
    n = phi.shape[0]
    e = np.empty(n)
    cdf = np.empty(n)
    for u in range(species.size):
        if frozen[u]:
            continue
        for a in range(n):
            e[a] = 0.0
        for k in range(indptr[u], indptr[u + 1]):
            t = species[indices[k]]
            w = coupling[k]
            for a in range(n):
                e[a] += w * phi[a, t]
        emin = e[0]
        for a in range(1, n):
            if e[a] < emin:
                emin = e[a]
        acc = 0.0
        for a in range(n):
            acc += math.exp(-(e[a] - emin))
            cdf[a] = acc
        target = uniforms[u] * acc
        choice = n - 1
        for a in range(n):
            if target < cdf[a]:
                choice = a
                break
        species[u] = choice


@dataclass(frozen=True)
class FixedBoundary:
    """Freeze sites within ``width`` of the patch boundary at ``configuration``."""

    configuration: Configuration
    width: float | None = None


def sample_gibbs(
    patch: PointSetPatch,
    pot: PotentialSpec,
    sweeps: int,
    burn_in: int = 1000,
    thinning: int = 10,
    seed: int = 0,
    boundary: str | FixedBoundary = "free",
) -> list[Configuration]:
    """Systematic-scan heat bath in canonical site order.

    After ``burn_in`` sweeps, ``sweeps`` further sweeps are run and the state
    is recorded after every ``thinning``-th one.  Each single-site update
    draws from the exact conditional ``gibbs_conditional({u}, ...)``.
    """
    if sweeps < 0 or burn_in < 0:
        raise ValueError("sweeps and burn_in must be non-negative")
    if thinning < 1:
        raise ValueError("thinning must be at least 1")
    rng = np.random.default_rng(seed)
    n_sites = len(patch)
    frozen = np.zeros(n_sites, dtype=np.bool_)
    species = rng.integers(0, pot.n_species, size=n_sites).astype(np.int64)
    if isinstance(boundary, FixedBoundary):
        width = boundary.width if boundary.width is not None else pot.kernel.interaction_radius()
        frozen = patch.norms > patch.radius - width
        species[frozen] = boundary.configuration.species[frozen]
    elif boundary != "free":
        raise ValueError(f"unknown boundary {boundary!r}")
    pairs, w = _bonds(patch, pot)
    indptr, indices, coupling = _neighbour_csr(n_sites, pairs, w)
    phi = pot.phi_real
    out = []
    for sweep in range(burn_in + sweeps):
        _heat_bath_sweep(species, indptr, indices, coupling, phi, rng.random(n_sites), frozen)
        if sweep >= burn_in and (sweep - burn_in + 1) % thinning == 0:
            out.append(Configuration(patch, species.copy()))
    return out


def sample_bernoulli(patch: PointSetPatch, probabilities, n_samples: int, seed: int = 0) -> list[Configuration]:
    """I.i.d. species with the given probability vector."""
    p = _check_probabilities(probabilities)
    rng = np.random.default_rng(seed)
    draws = rng.choice(p.size, size=(n_samples, len(patch)), p=p)
    return [Configuration(patch, row) for row in draws]


def _check_probabilities(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).ravel()
    if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
        raise ValueError("invalid probability vector")
    return p


def write_samples_csv(samples: list[Configuration], path) -> None:
    """One row per sample: species indices in canonical point order."""
    lines = [f"# samples={len(samples)}; sites={len(samples[0].patch) if samples else 0}"]
    lines += [",".join(map(str, s.species.tolist())) for s in samples]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def read_samples_csv(path, patch: PointSetPatch) -> list[Configuration]:
    rows = [line for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    return [Configuration(patch, np.array(line.split(","), dtype=np.int64)) for line in rows]


# -- Dobrushin condition ---------------------------------------------------

def _packing_count(rho, dim: int, spacing: float):
    """Upper bound on the number of ``spacing``-separated points in a closed ``rho``-ball."""
    return ((2 * rho + spacing) / spacing) ** dim


def _weighted_tail(g, radius: float, dim: int, spacing: float) -> float:
    """Certified bound on ``sum_{|x| > radius} g(|x|)`` for nonincreasing ``g``.

    Abel summation against the packing count ``N(rho)``:
    ``sum <= N(R) g(R) + int_R^inf N'(rho) g(rho) d rho``.
    """
    def integrand(rho):
        return dim * 2 / spacing * ((2 * rho + spacing) / spacing) ** (dim - 1) * float(g(rho))

    head = _packing_count(radius, dim, spacing) * float(g(radius))
    val, err = integrate.quad(integrand, radius, np.inf, limit=400, epsabs=0.0, epsrel=1e-10)
    return head + val + abs(err)


def _check_summable(pot: PotentialSpec, metric: MetricSpec, dim: int) -> None:
    k = pot.kernel
    if k.kind == "finite_range" or k.is_zero:
        return
    if k.kind == "exponential":
        if k.kappa <= 0 or (metric.kind == "scaled_euclidean" and metric.t >= k.kappa):
            raise ValueError("non-summable kernel")
        return
    if k.q <= dim + 1 or metric.kind == "scaled_euclidean" or k.q - math.floor(metric.p) <= dim:
        raise ValueError("non-summable kernel")


def _weight_function(pot: PotentialSpec, metric: MetricSpec):
    """``rho -> e^{d(rho)} |J(rho)|`` (per unit ``beta * spread``)."""
    return lambda rho: np.exp(metric.of_distance(rho)) * np.abs(pot.kernel(rho))


def _decreasing_from(g, start: float = 1.0) -> float:
    """A radius past the maximum of the unimodal envelope ``g``."""
    rho = np.linspace(0.0, 200.0, 20001)[1:]
    vals = g(rho)
    return max(start, float(rho[int(np.argmax(vals))]) + 1.0)


def truncation_radius(pot: PotentialSpec, metric: MetricSpec, dim: int, spacing: float,
                      tail_tol: float = DEFAULT_TAIL_TOL) -> tuple[float, float]:
    """``(R, tail)``: radius with weighted tail below ``tail_tol`` of the head.

    ``tail`` is in units of ``beta * phi_spread``.
    """
    k = pot.kernel
    if k.kind == "finite_range":
        return k.range, 0.0
    g = _weight_function(pot, metric)
    radius = _decreasing_from(g)
    head_lower = float(g(spacing))  # at least one neighbour at the minimal spacing
    while True:
        tail = _weighted_tail(g, radius, dim, spacing)
        if tail <= tail_tol * head_lower:
            return radius, tail
        radius *= 1.25


@dataclass(frozen=True)
class DobrushinReport:
    criterion_value: float
    alpha_bound: float
    satisfied: bool
    covariance_sum_bound: float
    truncation_radius: float
    truncation_error_bound: float
    beta: float = math.nan
    interior_sites: int = 0

    def to_text(self) -> str:
        items = {
            "beta": self.beta,
            "criterion_value": self.criterion_value,
            "alpha_bound": self.alpha_bound,
            "satisfied": str(self.satisfied).lower(),
            "covariance_sum_bound": self.covariance_sum_bound,
            "truncation_radius": self.truncation_radius,
            "truncation_error_bound": self.truncation_error_bound,
            "interior_sites": self.interior_sites,
        }
        return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in items.items())


def dobrushin_check(pot: PotentialSpec, patch: PointSetPatch, metric: MetricSpec,
                    tail_tol: float = DEFAULT_TAIL_TOL) -> DobrushinReport:
    """Evaluate ``sup_u sum_{v != u} e^{d(u,v)} D(Phi_{uv})`` over interior sites.

    For decaying kernels the reported value includes the certified tail bound
    beyond the truncation radius, so it is an upper bound on the infinite sum.
    """
    if len(patch) == 0:
        raise ValueError("empty patch")
    _check_summable(pot, metric, patch.dim)
    scale = pot.beta * pot.phi_spread * 1.0
    if pot.kernel.is_zero or scale == 0:
        crit, radius, tail, n_int = 0.0, 0.0, 0.0, len(patch)
    else:
        spacing = patch.min_distance()
        if not math.isfinite(spacing):
            spacing = 1.0
        radius, tail_unit = truncation_radius(pot, metric, patch.dim, spacing, tail_tol)
        interior = patch.interior(radius)
        if interior.size == 0:
            raise ValueError("patch too small for truncation radius")
        tree = patch.tree()
        g = _weight_function(pot, metric)
        best = 0.0
        for u, nb in zip(interior, tree.query_ball_point(patch.points[interior], radius * (1 + 1e-12))):
            nb = np.asarray([v for v in nb if v != u], dtype=np.int64)
            if nb.size == 0:
                continue
            rho = np.linalg.norm(patch.points[nb] - patch.points[u], axis=1)
            best = max(best, float(np.sum(g(rho))))
        tail = scale * tail_unit
        crit = scale * best + tail
        n_int = int(interior.size)
    alpha = crit / 2
    satisfied = crit < 2
    bound = pot.value_spread**2 / (4 * (1 - alpha)) if satisfied else math.inf
    return DobrushinReport(
        criterion_value=crit,
        alpha_bound=alpha,
        satisfied=satisfied,
        covariance_sum_bound=bound,
        truncation_radius=radius,
        truncation_error_bound=tail,
        beta=pot.beta,
        interior_sites=n_int,
    )


def high_temperature_threshold(pot: PotentialSpec, metric: MetricSpec,
                               patch: PointSetPatch | None = None, dim: int = 1) -> float:
    """``beta*`` below which the condition holds; the criterion is linear in beta.

    Without a patch the integer lattice ``Z^dim`` is used.
    """
    probe = replace(pot, beta=1.0)
    if pot.kernel.is_zero or probe.phi_spread == 0:
        return math.inf
    if patch is None:
        radius, _ = truncation_radius(probe, metric, dim, 1.0)
        patch = generate_lattice_patch(np.eye(dim), 2 * radius + 2)
    crit = dobrushin_check(probe, patch, metric).criterion_value
    return math.inf if crit == 0 else 2.0 / crit
