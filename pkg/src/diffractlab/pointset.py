"""Finite patches of FLC point sets: integer lattices and cut-and-project sets.

A patch is ``Gamma ∩ B_r(0)`` stored in lexicographic order.  Equality of
difference vectors and cluster shapes is decided on a 1e-9 integer grid
(see :func:`quantize`).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

QUANTUM = 1e-9
GENERIC_TOL = 1e-9
GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


def quantize(z: np.ndarray) -> np.ndarray:
    """Map real vectors to int64 keys on the 1e-9 grid."""
    return np.rint(np.asarray(z, dtype=float) / QUANTUM).astype(np.int64)


def ball_volume(r: float, dim: int) -> float:
    if dim == 1:
        return 2.0 * r
    if dim == 2:
        return math.pi * r * r
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) * r**dim


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Indices sorting ``points`` lexicographically (first coordinate major)."""
    keys = quantize(points)
    return np.lexsort(keys.T[::-1])


@dataclass(frozen=True, eq=False)
class PointSetPatch:
    """Finite realization ``Gamma ∩ B_r(0)``.

    ``basis`` is set for lattice patches (columns generate the lattice) and
    ``lattice_coords`` holds the integer coordinates of each point in the
    generating (or embedding) lattice when known.
    """

    points: np.ndarray
    radius: float
    generator: str
    basis: np.ndarray | None = None
    lattice_coords: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.basis is not None:
            b = np.array(self.basis, dtype=float).reshape(pts.shape[1], pts.shape[1])
            b.setflags(write=False)
            object.__setattr__(self, "basis", b)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def volume(self) -> float:
        return ball_volume(self.radius, self.dim)

    @property
    def is_lattice(self) -> bool:
        return self.basis is not None

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)

    def interior(self, margin: float) -> np.ndarray:
        """Indices of points at distance >= ``margin`` from the patch boundary."""
        return np.flatnonzero(self.norms <= self.radius - margin + QUANTUM)

    def index_of(self, x) -> int:
        """Index of the point at position ``x`` (KeyError if absent)."""
        key = tuple(quantize(np.atleast_1d(x)))
        hits = np.flatnonzero((quantize(self.points) == key).all(axis=1))
        if hits.size == 0:
            raise KeyError(f"{x} not in patch")
        return int(hits[0])

    def tree(self) -> cKDTree:
        return cKDTree(self.points)

    def min_distance(self) -> float:
        """Minimum pairwise distance (``inf`` for fewer than two points)."""
        if len(self) < 2:
            return math.inf
        d, _ = self.tree().query(self.points, k=2)
        return float(d[:, 1].min())


def _make_patch(points, radius, generator, basis=None, coords=None) -> PointSetPatch:
    points = np.asarray(points, dtype=float)
    order = canonical_order(points) if len(points) else np.arange(0)
    return PointSetPatch(
        points=points[order],
        radius=float(radius),
        generator=generator,
        basis=basis,
        lattice_coords=None if coords is None else np.asarray(coords)[order],
    )


def _format_matrix(m: np.ndarray) -> str:
    return ";".join(",".join(repr(float(v)) for v in row) for row in np.atleast_2d(m))


def _parse_matrix(s: str) -> np.ndarray:
    return np.array([[float(v) for v in row.split(",")] for row in s.split(";")])


def _integer_box_points(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    axes = [np.arange(math.ceil(a), math.floor(b) + 1) for a, b in zip(lo, hi)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1).astype(np.int64)


def generate_lattice_patch(basis, r: float) -> PointSetPatch:
    """All lattice points ``B n`` with ``|B n| <= r``, in canonical order."""
    b = np.atleast_2d(np.asarray(basis, dtype=float))
    d = b.shape[0]
    if b.shape != (d, d):
        raise ValueError("basis must be square")
    if d > 2:
        raise ValueError("dimension must be 1 or 2")
    if r <= 0:
        raise ValueError("radius must be positive")
    if abs(np.linalg.det(b)) < 1e-12:
        raise ValueError("degenerate lattice")
    # |n_i| <= r * ||row_i(B^-1)|| bounds every n with |B n| <= r.
    binv = np.linalg.inv(b)
    reach = r * np.linalg.norm(binv, axis=1)
    n = _integer_box_points(-reach, reach)
    x = n @ b.T
    keep = np.linalg.norm(x, axis=1) <= r * (1 + 1e-12)
    return _make_patch(x[keep], r, f"lattice:{_format_matrix(b)}", basis=b, coords=n[keep])


@dataclass(frozen=True, eq=False)
class CutProjectScheme:
    """Cut-and-project data: lattice ``E Z^D`` in ``R^d x R^m``.

    Columns of ``embedding_basis`` generate the lattice.  A lattice vector
    ``y`` is accepted when ``internal_projection @ y`` lies in the half-open
    box ``[window_lower, window_upper)``; its point is
    ``physical_projection @ y``.
    """

    embedding_basis: np.ndarray
    physical_projection: np.ndarray
    internal_projection: np.ndarray
    window_lower: np.ndarray
    window_upper: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        e = np.atleast_2d(np.asarray(self.embedding_basis, dtype=float))
        p = np.atleast_2d(np.asarray(self.physical_projection, dtype=float))
        q = np.atleast_2d(np.asarray(self.internal_projection, dtype=float))
        lo = np.atleast_1d(np.asarray(self.window_lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.window_upper, dtype=float))
        total = e.shape[0]
        if e.shape != (total, total) or p.shape[1] != total or q.shape[1] != total:
            raise ValueError("inconsistent projection shapes")
        if p.shape[0] + q.shape[0] != total:
            raise ValueError("physical + internal dimension must equal total dimension")
        if p.shape[0] > 2 or q.shape[0] > 2:
            raise ValueError("physical and internal dimensions are capped at 2")
        if lo.shape != (q.shape[0],) or hi.shape != lo.shape:
            raise ValueError("window must be a box in internal space")
        if np.any(hi - lo <= GENERIC_TOL):
            raise ValueError("non-generic window")
        stacked = np.vstack([p, q]) @ e
        if abs(np.linalg.det(stacked)) < 1e-12:
            raise ValueError("projections do not separate the embedding lattice")
        # injectivity of the physical projection on small lattice vectors
        pe = p @ e
        span = range(-6, 7)
        for n in itertools.product(span, repeat=total):
            if any(n) and np.linalg.norm(pe @ np.array(n, dtype=float)) < 1e-9:
                raise ValueError("physical projection is not injective on the lattice")
        for name, arr in (("embedding_basis", e), ("physical_projection", p),
                          ("internal_projection", q), ("window_lower", lo), ("window_upper", hi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.physical_projection.shape[0]

    @property
    def internal_dim(self) -> int:
        return self.internal_projection.shape[0]

    @property
    def total_dim(self) -> int:
        return self.embedding_basis.shape[0]

    @property
    def density(self) -> float:
        """Asymptotic density: window volume / embedding covolume."""
        stacked = np.vstack([self.physical_projection, self.internal_projection]) @ self.embedding_basis
        return float(np.prod(self.window_upper - self.window_lower) / abs(np.linalg.det(stacked)))


def fibonacci_scheme(offset: float = 0.1 * math.sqrt(2.0)) -> CutProjectScheme:
    """Fibonacci chain with spacings 1 and tau.

    Z^2 is sent to ``(m + n tau, m - n/tau)``; the window has length tau and
    is centred at an irrational ``offset`` so that no projected lattice point
    sits on its boundary.
    """
    tau = GOLDEN
    return CutProjectScheme(
        embedding_basis=np.eye(2),
        physical_projection=[[1.0, tau]],
        internal_projection=[[1.0, -1.0 / tau]],
        window_lower=[offset - tau / 2],
        window_upper=[offset + tau / 2],
        name="fibonacci",
    )


PRESET_SCHEMES = {"fibonacci": fibonacci_scheme}


def generate_model_set_patch(scheme: CutProjectScheme, r: float) -> PointSetPatch:
    """Model-set points inside ``B_r(0)``.

    The search runs over integer coordinates ``n`` of the embedding lattice.
    Every admissible ``n`` maps into the box ``[-r, r]^d x window`` under the
    invertible map ``M = [P; Q] E``; all coordinates except the first are
    enumerated over the image of that box under ``M^-1`` and the first one is
    solved for exactly from the row constraints, so nothing is missed.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    d, total = scheme.dim, scheme.total_dim
    lo_w, hi_w = scheme.window_lower, scheme.window_upper
    if np.any(hi_w - lo_w <= GENERIC_TOL):
        raise ValueError("non-generic window")
    m = np.vstack([scheme.physical_projection, scheme.internal_projection]) @ scheme.embedding_basis
    pad = 10 * GENERIC_TOL
    box_lo = np.concatenate([np.full(d, -r), lo_w - pad])
    box_hi = np.concatenate([np.full(d, r), hi_w + pad])
    minv = np.linalg.inv(m)
    centre, half = (box_lo + box_hi) / 2, (box_hi - box_lo) / 2
    n_centre = minv @ centre
    n_half = np.abs(minv) @ half
    rest = _integer_box_points(n_centre[1:] - n_half[1:] - 1e-9, n_centre[1:] + n_half[1:] + 1e-9)
    found = []
    chunk = 1 << 16
    for start in range(0, len(rest), chunk):
        tail = rest[start:start + chunk].astype(float)
        offset = tail @ m[:, 1:].T  # contribution of n[1:] to each row
        a = m[:, 0]
        lo_n = np.full(len(tail), -np.inf)
        hi_n = np.full(len(tail), np.inf)
        for i in range(total):
            if abs(a[i]) < 1e-15:
                ok = (offset[:, i] >= box_lo[i]) & (offset[:, i] <= box_hi[i])
                lo_n[~ok], hi_n[~ok] = np.inf, -np.inf
                continue
            b1 = (box_lo[i] - offset[:, i]) / a[i]
            b2 = (box_hi[i] - offset[:, i]) / a[i]
            lo_n = np.maximum(lo_n, np.minimum(b1, b2))
            hi_n = np.minimum(hi_n, np.maximum(b1, b2))
        first = np.ceil(lo_n - 1e-9)
        last = np.floor(hi_n + 1e-9)
        counts = np.maximum(last - first + 1, 0).astype(np.int64)
        if counts.sum() == 0:
            continue
        rows = np.repeat(np.arange(len(tail)), counts)
        steps = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        n0 = first[rows] + steps
        found.append(np.column_stack([n0, tail[rows]]).astype(np.int64))
    n = np.concatenate(found) if found else np.zeros((0, total), dtype=np.int64)
    y = n.astype(float) @ scheme.embedding_basis.T
    phys = y @ scheme.physical_projection.T
    internal = y @ scheme.internal_projection.T
    in_ball = np.linalg.norm(phys, axis=1) <= r * (1 + 1e-12)
    gap = np.minimum(np.abs(internal - lo_w), np.abs(internal - hi_w)).min(axis=1) if len(n) else np.zeros(0)
    if np.any(in_ball & (gap < GENERIC_TOL)):
        raise ValueError("non-generic window")
    inside = in_ball & np.all((internal >= lo_w) & (internal < hi_w), axis=1)
    return _make_patch(phys[inside], r, f"cutproject:{scheme.name}", coords=n[inside])


def _ordered_pairs(patch: PointSetPatch, cutoff: float):
    """Ordered pairs ``(i, j)`` with ``|x_i - x_j| <= cutoff``, diagonal included."""
    tree = patch.tree()
    pairs = tree.query_pairs(cutoff * (1 + 1e-12) + QUANTUM, output_type="ndarray")
    diag = np.arange(len(patch))
    i = np.concatenate([diag, pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([diag, pairs[:, 1], pairs[:, 0]])
    return i, j


def _unique_rows(keys: np.ndarray):
    """Lexicographically sorted unique int rows with inverse map and counts."""
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return uniq, inverse.ravel(), counts


def difference_set(patch: PointSetPatch, cutoff: float):
    """Distinct differences ``z = x - y`` with ``|z| <= cutoff`` and multiplicities.

    Returns ``(vectors, counts)``: a ``(K, d)`` array sorted lexicographically
    and the matching integer multiplicities.  ``z = 0`` carries ``len(patch)``.
    """
    if cutoff > 2 * patch.radius + QUANTUM:
        raise ValueError("cutoff exceeds patch diameter")
    if len(patch) == 0:
        return np.zeros((0, patch.dim)), np.zeros(0, dtype=np.int64)
    i, j = _ordered_pairs(patch, cutoff)
    q = quantize(patch.points)
    keys = q[i] - q[j]
    uniq, _, counts = _unique_rows(keys)
    vectors = uniq * QUANTUM
    return vectors, counts.astype(np.int64)


@dataclass(frozen=True)
class ClusterTable:
    """Tally of radius-``radius`` clusters around interior points.

    ``entries`` maps a cluster key (sorted tuple of quantized relative
    positions) to ``(frequency, count)``; ``site_index``/``site_label`` give
    the interior point indices and the position of their key in ``keys``.
    """

    radius: float
    entries: dict
    keys: tuple
    site_index: np.ndarray
    site_label: np.ndarray

    def __len__(self) -> int:
        return len(self.entries)

    def frequency(self, key) -> float:
        return self.entries[key][0]


def cluster_frequencies(patch: PointSetPatch, R_c: float) -> ClusterTable:
    if R_c >= patch.radius / 2:
        raise ValueError("patch too small for cluster radius")
    interior = patch.interior(R_c)
    if interior.size == 0:
        raise ValueError("patch too small for cluster radius")
    tree = patch.tree()
    neighbours = tree.query_ball_point(patch.points[interior], R_c * (1 + 1e-12) + QUANTUM)
    q = quantize(patch.points)
    label_of: dict = {}
    labels = np.empty(interior.size, dtype=np.int64)
    for s, (x, nb) in enumerate(zip(interior, neighbours)):
        rel = q[nb] - q[x]
        key = tuple(sorted(map(tuple, rel.tolist())))
        labels[s] = label_of.setdefault(key, len(label_of))
    keys = tuple(label_of)
    counts = np.bincount(labels, minlength=len(keys))
    total = interior.size
    entries = {k: (float(counts[n] / total), int(counts[n])) for n, k in enumerate(keys)}
    return ClusterTable(radius=R_c, entries=entries, keys=keys, site_index=interior, site_label=labels)


def density_estimate(patch: PointSetPatch) -> float:
    """``card(patch) / vol(B_r)``; 0 for an empty patch."""
    return len(patch) / patch.volume


def write_patch_csv(patch: PointSetPatch, path) -> None:
    """One point per line to 12 significant digits, after a metadata header."""
    names = ["x", "y"][: patch.dim]
    lines = [
        f"# dim={patch.dim}; radius={patch.radius!r}; generator={patch.generator}",
        ",".join(names),
    ]
    lines += [",".join(f"{v:.12g}" for v in row) for row in patch.points]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def read_patch_csv(path) -> PointSetPatch:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing patch header")
    meta = dict(part.strip().split("=", 1) for part in text[0][1:].split(";", 2))
    dim = int(meta["dim"])
    radius = float(meta["radius"])
    generator = meta["generator"]
    rows = [list(map(float, line.split(","))) for line in text[2:] if line.strip()]
    points = np.array(rows, dtype=float).reshape(-1, dim)
    basis = None
    coords = None
    if generator.startswith("lattice:"):
        basis = _parse_matrix(generator.split(":", 1)[1])
        coords = np.rint(points @ np.linalg.inv(basis).T).astype(np.int64)
        points = coords @ basis.T
    return _make_patch(points, radius, generator, basis=basis, coords=coords)
