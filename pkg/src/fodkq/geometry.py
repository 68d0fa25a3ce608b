"""Antipodally-symmetric direction sets on the unit hemisphere.

Directions index the columns of the response dictionary and the rows of
the recovered FOD coefficients, so their ordering must be stable: every
set is canonicalized to the z >= 0 hemisphere and sorted lexicographically
before use.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError

_COULOMB_ITERS = 2000
_MIN_SEPARATION_RAD = 1e-9


def canonicalize_hemisphere(vectors):
    """Flip vectors into the canonical hemisphere.

    Rule: z >= 0; on the z = 0 ring take y >= 0; on the remaining axis
    take x > 0. Applied rowwise, returns a new array.
    """
    v = np.array(vectors, dtype=float)
    flip = (v[:, 2] < 0)
    on_ring = v[:, 2] == 0
    flip |= on_ring & (v[:, 1] < 0)
    flip |= on_ring & (v[:, 1] == 0) & (v[:, 0] < 0)
    v[flip] *= -1.0
    return v


def _check_unit(vectors, tol=1e-9):
    norms = np.linalg.norm(np.atleast_2d(vectors), axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise DataError("direction not normalized")


@dataclass(frozen=True)
class DirectionSet:
    """A set of unit directions on the canonical hemisphere."""

    vectors: np.ndarray  # (count, 3)

    def __post_init__(self):
        v = np.ascontiguousarray(np.atleast_2d(self.vectors), dtype=float)
        _check_unit(v, tol=1e-12)
        canon = canonicalize_hemisphere(v)
        if not np.array_equal(canon, v):
            raise DataError("directions not hemisphere-canonical")
        if len(v) > 1:
            dots = np.clip(np.abs(v @ v.T), 0.0, 1.0)
            np.fill_diagonal(dots, 0.0)
            if np.arccos(np.max(dots)) < _MIN_SEPARATION_RAD:
                raise DataError("directions closer than minimum separation")
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)

    @property
    def count(self):
        return len(self.vectors)

    def to_text(self, path):
        """One "x y z" line per direction, 17 significant digits, LF."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for x, y, z in self.vectors:
                fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")

    @classmethod
    def from_text(cls, path):
        rows = np.loadtxt(path, ndmin=2)
        if rows.shape[1] != 3:
            raise DataError(f"{path}: expected 3 columns")
        return cls(rows)


@dataclass(frozen=True)
class QScheme:
    """Single-shell q-space design: a b=0 point plus one shell of gradients."""

    bvals: np.ndarray  # (m+1,), s/mm^2, bvals[0] == 0
    directions: np.ndarray  # (m+1, 3) unit vectors

    def __post_init__(self):
        b = np.ascontiguousarray(np.atleast_1d(self.bvals), dtype=float)
        d = np.ascontiguousarray(np.atleast_2d(self.directions), dtype=float)
        if b[0] != 0.0:
            raise DataError("first q-point must have b=0")
        nz = b[1:]
        if nz.size and not np.all(nz == nz[0]):
            raise DataError("nonzero b-values must be equal (single shell)")
        if nz.size and nz[0] <= 0:
            raise DataError("shell b-value must be positive")
        _check_unit(d)
        b.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "bvals", b)
        object.__setattr__(self, "directions", d)

    @property
    def count(self):
        return len(self.bvals)

    @property
    def count_nonzero(self):
        return len(self.bvals) - 1

    @property
    def shell_bval(self):
        return float(self.bvals[1]) if self.count_nonzero else 0.0

    def to_text(self, path):
        """One "b x y z" line per point; the first line is "0 0 0 0"."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("0 0 0 0\n")
            for b, (x, y, z) in zip(self.bvals[1:], self.directions[1:]):
                fh.write(f"{b:.17g} {x:.17g} {y:.17g} {z:.17g}\n")

    @classmethod
    def from_text(cls, path):
        rows = np.loadtxt(path, ndmin=2)
        if rows.shape[1] != 4:
            raise DataError(f"{path}: expected 4 columns")
        return cls(rows[:, 0], rows[:, 1:])


@dataclass(frozen=True)
class AngularNeighborhood:
    """Cone adjacency over a direction set, antipodally identified."""

    cone_half_angle_deg: float
    adjacency: np.ndarray = field(repr=False)  # (n, n) bool, symmetric, reflexive

    def neighbors(self, d):
        return np.flatnonzero(self.adjacency[d])


def _pair_distances(v):
    """(|xi-xj|, |xi+xj|) matrices via the Gram matrix; diagonals -> inf."""
    dots = np.clip(v @ v.T, -1.0, 1.0)
    dn = np.sqrt(np.maximum(2.0 - 2.0 * dots, 0.0))
    sn = np.sqrt(np.maximum(2.0 + 2.0 * dots, 0.0))
    np.fill_diagonal(dn, np.inf)
    np.fill_diagonal(sn, np.inf)
    return dn, sn


def _antipodal_coulomb_energy(v):
    """Sum over pairs of 1/|xi-xj| + 1/|xi+xj|."""
    dn, sn = _pair_distances(v)
    return float((1.0 / dn + 1.0 / sn).sum() / 2.0)


def _antipodal_coulomb_gradient(v):
    dn, sn = _pair_distances(v)
    inv_d3 = dn**-3
    inv_s3 = sn**-3
    # d/dxi of the pair energies collapses to a row scaling plus one matmul
    return (inv_d3 - inv_s3) @ v - v * (inv_d3 + inv_s3).sum(axis=1,
                                                             keepdims=True)


_DIRECTION_CACHE = {}


def generate_directions(n, seed):
    """Spread n directions over the hemisphere by antipodal Coulomb descent.

    Projected gradient descent from a seeded random start; the step is
    halved whenever the energy would increase, with a fixed iteration cap.
    Deterministic for a fixed (n, seed); results are memoized (the sets
    are immutable).

    Parameters
    ----------
    n : int
        Number of directions, >= 1.
    seed : int
        RNG seed for the starting configuration.

    Returns
    -------
    DirectionSet
    """
    if n < 1:
        raise UsageError("n must be >= 1")
    cached = _DIRECTION_CACHE.get((n, seed))
    if cached is not None:
        return cached
    if n == 1:
        return DirectionSet(np.array([[0.0, 0.0, 1.0]]))
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    energy = _antipodal_coulomb_energy(v)
    step = 0.1
    stalled = 0
    for _ in range(_COULOMB_ITERS):
        g = _antipodal_coulomb_gradient(v)
        # project onto the tangent planes so steps stay on the sphere
        g -= v * np.sum(g * v, axis=1, keepdims=True)
        gmax = np.max(np.linalg.norm(g, axis=1))
        if gmax == 0.0:
            break
        cand = v - (step / gmax) * g
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        cand_energy = _antipodal_coulomb_energy(cand)
        if cand_energy < energy:
            stalled = stalled + 1 if energy - cand_energy < 1e-12 * energy \
                else 0
            v, energy = cand, cand_energy
            step *= 1.1
        else:
            step *= 0.5
            stalled += 1
            if step < 1e-12:
                break
        if stalled >= 50:
            break
    v = canonicalize_hemisphere(v)
    order = np.lexsort((v[:, 0], v[:, 1], v[:, 2]))
    result = DirectionSet(v[order])
    _DIRECTION_CACHE[(n, seed)] = result
    return result


def angle_between(d1, d2):
    """Antipodally-identified angle between two unit directions, degrees.

    Computed as (180/pi) * arccos(clamp(|d1.d2|, 0, 1)); range [0, 90].
    """
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    _check_unit(d1[None, :])
    _check_unit(d2[None, :])
    return float(np.degrees(np.arccos(np.clip(abs(float(d1 @ d2)), 0.0, 1.0))))


def pairwise_antipodal_angles(a, b):
    """(len(a), len(b)) matrix of antipodal angles in degrees."""
    dots = np.clip(np.abs(np.atleast_2d(a) @ np.atleast_2d(b).T), 0.0, 1.0)
    return np.degrees(np.arccos(dots))


def min_pairwise_angle(vectors):
    """Smallest antipodal angle between distinct directions, degrees."""
    ang = pairwise_antipodal_angles(vectors, vectors)
    np.fill_diagonal(ang, np.inf)
    return float(ang.min())


def subset_q_points(full, m):
    """Select m nonzero-b points from a scheme by greedy maximin spread.

    Seeds with the point closest to (0,0,1), then repeatedly adds the
    candidate maximizing the minimum antipodal angle to the chosen set.
    The b=0 point is always kept. Deterministic; ties resolve to the
    lowest index. Result preserves the input ordering of the survivors.
    """
    avail = full.count_nonzero
    if not 1 <= m <= avail:
        raise UsageError("insufficient q-points")
    dirs = full.directions[1:]
    if m == avail:
        return full
    angles = pairwise_antipodal_angles(dirs, dirs)
    first = int(np.argmax(np.abs(dirs[:, 2])))
    chosen = [first]
    min_angle = angles[first].copy()
    min_angle[first] = -1.0
    for _ in range(m - 1):
        nxt = int(np.argmax(min_angle))
        chosen.append(nxt)
        min_angle = np.minimum(min_angle, angles[nxt])
        min_angle[chosen] = -1.0
    idx = np.sort(np.asarray(chosen)) + 1  # back to scheme indices (b=0 is 0)
    keep = np.concatenate(([0], idx))
    return QScheme(full.bvals[keep], full.directions[keep])


def build_angular_neighborhood(dirs, half_angle_deg):
    """Adjacency of directions within a cone, boundary inclusive.

    d' is a neighbor of d iff arccos(min(1, |d.d'|)) <= half_angle_deg.
    The relation is symmetric and reflexive by construction.
    """
    if not 0.0 < half_angle_deg < 90.0:
        raise UsageError("half angle must lie in (0, 90) degrees")
    ang = pairwise_antipodal_angles(dirs.vectors, dirs.vectors)
    return AngularNeighborhood(float(half_angle_deg), ang <= half_angle_deg)
