"""Peak extraction from recovered FOD columns and challenge-style scoring.

A voxel is a success when the number of estimated fibers matches the
truth and a one-to-one greedy matching places every estimate within the
tolerance cone of its paired true fiber. Angular errors are tracked per
true fiber against the closest estimate, so partially-correct voxels
still contribute.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import pairwise_antipodal_angles

MAX_PEAKS = 5
PEAK_FLOOR_FRACTION = 0.2
DEFAULT_TOLERANCE_DEG = 20.0
MISS_PENALTY_DEG = 90.0


@dataclass(frozen=True)
class PeakSet:
    """Per-voxel fiber peaks, sorted by descending amplitude."""

    directions: np.ndarray  # (k, 3)
    amplitudes: np.ndarray  # (k,)

    @property
    def count(self):
        return len(self.amplitudes)


def extract_peaks(s1_column, dirs, nbh, max_peaks=MAX_PEAKS,
                  floor_fraction=PEAK_FLOOR_FRACTION, aggregate_cone=False):
    """Local maxima of a FOD column over the angular cone adjacency.

    A direction is a candidate iff its coefficient is positive and not
    smaller than any coefficient in its cone; ties within a cone keep the
    lowest index only. Candidates below `floor_fraction` of the column
    maximum are dropped and at most `max_peaks` survive.

    With aggregate_cone=True the reported amplitude is the coefficient
    mass summed over the candidate's cone instead of the raw value
    (sensitivity studies only; matching and counting are unchanged).
    """
    col = np.asarray(s1_column, dtype=float)
    if np.any(col < 0):
        raise DataError("FOD column must be nonnegative")
    adj = nbh.adjacency
    n = len(col)
    masked = np.where(adj, col[None, :], -np.inf)
    cone_max = masked.max(axis=1)
    is_max = (col > 0) & (col >= cone_max)
    ties = adj & (col[None, :] == col[:, None])
    earlier_tie = np.tril(ties, k=-1).any(axis=1)
    cand = np.flatnonzero(is_max & ~earlier_tie)
    if cand.size == 0:
        return PeakSet(np.empty((0, 3)), np.empty(0))
    keep = col[cand] >= floor_fraction * col.max()
    cand = cand[keep]
    order = np.lexsort((cand, -col[cand]))[:max_peaks]
    cand = cand[order]
    amps = col[cand]
    if aggregate_cone:
        amps = np.array([col[adj[d]].sum() for d in cand])
    return PeakSet(dirs.vectors[cand].copy(), amps)


def _greedy_match(angles):
    """Pair off the globally closest rows/cols; returns list of (i, j)."""
    a = angles.copy()
    pairs = []
    for _ in range(min(a.shape)):
        i, j = np.unravel_index(np.argmin(a), a.shape)
        pairs.append((int(i), int(j)))
        a[i, :] = np.inf
        a[:, j] = np.inf
    return pairs


def _exhaustive_match_ok(angles, tolerance):
    """True iff some one-to-one matching puts every pair within tolerance."""
    from itertools import permutations

    nt, ne = angles.shape
    if nt != ne:
        return False
    return any(all(angles[i, p[i]] <= tolerance for i in range(nt))
               for p in permutations(range(ne)))


@dataclass
class EvaluationReport:
    success_rate: float
    angular_errors: list
    mean_angular_error: float
    per_voxel_detail: list  # (voxel, n_true, n_est, success)

    def to_json(self, path):
        payload = {
            "success_rate": self.success_rate,
            "mean_angular_error": self.mean_angular_error,
            "n_evaluated": len(self.per_voxel_detail),
            "angular_errors": self.angular_errors,
            "per_voxel": [
                {"voxel": int(v), "n_true": int(nt), "n_est": int(ne),
                 "success": bool(s)}
                for v, nt, ne, s in self.per_voxel_detail
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")


def evaluate(peaks_by_voxel, truth, tolerance_deg=DEFAULT_TOLERANCE_DEG,
             matching="greedy"):
    """Score estimated peaks against the ground truth.

    `peaks_by_voxel` maps flat voxel index to PeakSet (missing or empty
    entries count as zero estimates). Voxels with no estimated fiber
    contribute the worst-case 90 degrees per true fiber.
    """
    if matching not in ("greedy", "exhaustive"):
        raise DataError(f"unknown matching rule '{matching}'")
    n_vox = len(truth.fractions)
    errors = []
    detail = []
    successes = 0
    evaluated = 0
    for v in range(n_vox):
        mask = truth.fractions[v] > 0
        n_true = int(mask.sum())
        if n_true == 0:
            continue
        evaluated += 1
        true_dirs = truth.directions[v][mask]
        est = peaks_by_voxel.get(v)
        n_est = est.count if est is not None else 0
        if n_est == 0:
            errors.extend([MISS_PENALTY_DEG] * n_true)
            detail.append((v, n_true, 0, False))
            continue
        angles = pairwise_antipodal_angles(true_dirs, est.directions)
        errors.extend(angles.min(axis=1).tolist())
        if n_est != n_true:
            ok = False
        elif matching == "greedy":
            pairs = _greedy_match(angles)
            ok = all(angles[i, j] <= tolerance_deg for i, j in pairs)
        else:
            ok = _exhaustive_match_ok(angles, tolerance_deg)
        successes += bool(ok)
        detail.append((v, n_true, n_est, bool(ok)))
    if evaluated == 0:
        raise DataError("ground truth contains no fiber voxels")
    return EvaluationReport(
        success_rate=successes / evaluated,
        angular_errors=errors,
        mean_angular_error=float(np.mean(errors)),
        per_voxel_detail=detail,
    )


def extract_all_peaks(s1, layout, dirs, nbh, **kwargs):
    """Peak sets for every white-matter voxel: flat index -> PeakSet."""
    out = {}
    for col, v in enumerate(layout.wm_voxels):
        out[int(v)] = extract_peaks(s1[:, col], dirs, nbh, **kwargs)
    return out


def save_peaks(peaks_by_voxel, volume_shape, path):
    """Text export: "vx vy vz n d1x d1y d1z a1 ..." per voxel line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in sorted(peaks_by_voxel):
            ps = peaks_by_voxel[v]
            i, j, k = np.unravel_index(v, volume_shape)
            parts = [str(i), str(j), str(k), str(ps.count)]
            for d, a in zip(ps.directions, ps.amplitudes):
                parts.extend(f"{c:.17g}" for c in d)
                parts.append(f"{a:.17g}")
            fh.write(" ".join(parts) + "\n")


def report_csv_row(report, keys):
    """Flat CSV row dict for sweep aggregation; `keys` identify the cell."""
    row = dict(keys)
    row["success_rate"] = report.success_rate
    row["mean_angular_error"] = report.mean_angular_error
    return row
