"""Variable-density Cartesian k-space selection masks.

Masks live on the centered (DC at the array center) k-space grid. The
first gradient is the b=0 acquisition and is always fully sampled; every
other (gradient, slice) pair gets its own realization: the central
calibration zone plus a uniform random draw of high frequencies.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError
from . import arrayfile


@dataclass(frozen=True)
class SamplingMask:
    """Per-gradient, per-slice boolean selection grids."""

    selected: np.ndarray  # (n_gradients, n_slices, rows, cols) bool
    acceleration: float
    central_fraction: float
    seed: int

    def __post_init__(self):
        sel = np.ascontiguousarray(self.selected, dtype=bool)
        if sel.ndim != 4:
            raise DataError("mask array must be 4-dimensional")
        sel.flags.writeable = False
        object.__setattr__(self, "selected", sel)

    @property
    def grid_shape(self):
        return self.selected.shape[2:]

    @property
    def n_slices(self):
        return self.selected.shape[1]

    @property
    def n_gradients(self):
        return self.selected.shape[0]

    def samples_per_slice(self, q):
        return int(self.selected[q, 0].sum())

    def flat_indices(self, q):
        """(n_slices, K_q) indices into the flattened (rows*cols) slice grid."""
        rows, cols = self.grid_shape
        out = []
        for s in range(self.n_slices):
            out.append(np.flatnonzero(self.selected[q, s].reshape(rows * cols)))
        return np.stack(out)


def central_zone_bounds(dim, central_fraction):
    """Start/stop of the centered calibration block along one dimension."""
    side = math.ceil(central_fraction * dim)
    start = (dim - side) // 2
    return start, start + side


def generate_masks(grid, n_slices, n_gradients, acceleration, central_fraction,
                   seed):
    """Draw selection masks for every gradient and slice.

    For each gradient past the first, each slice selects the full central
    zone and then uniform random high-frequency points without
    replacement, up to ceil(total/acceleration) points. Deterministic for
    a fixed seed; every (gradient, slice) pair uses its own substream.
    """
    rows, cols = grid
    if acceleration < 1:
        raise UsageError("acceleration must be >= 1")
    if not 0 < central_fraction <= 1:
        raise UsageError("central_fraction must lie in (0, 1]")
    total = rows * cols
    budget = math.ceil(total / acceleration)
    r0, r1 = central_zone_bounds(rows, central_fraction)
    c0, c1 = central_zone_bounds(cols, central_fraction)
    central = np.zeros((rows, cols), dtype=bool)
    central[r0:r1, c0:c1] = True
    n_central = int(central.sum())
    if n_central > budget:
        raise DataError("central zone exceeds sampling budget")
    high = np.flatnonzero(~central.ravel())
    sel = np.zeros((n_gradients, n_slices, rows, cols), dtype=bool)
    sel[0] = True
    for q in range(1, n_gradients):
        for s in range(n_slices):
            rng = np.random.default_rng(np.random.SeedSequence((seed, q, s)))
            mask = central.copy()
            extra = rng.choice(high, size=budget - n_central, replace=False)
            mask.ravel()[extra] = True
            sel[q, s] = mask
    return SamplingMask(sel, float(acceleration), float(central_fraction), seed)


def undersampling_factor(mask, q):
    """Grid size over the number of selected points for gradient q."""
    rows, cols = mask.grid_shape
    k = mask.samples_per_slice(q)
    return rows * cols / k


def image_units(q_count_nonzero_b, acceleration):
    """Acquisition budget in units of one fully-sampled diffusion volume."""
    if q_count_nonzero_b <= 0 or acceleration <= 0:
        raise UsageError("inputs must be positive")
    return q_count_nonzero_b / acceleration


def save_masks(mask, path, sidecar_path):
    arrayfile.write_array(path, mask.selected.astype(np.uint8),
                          semantic="sampling_mask")
    rows, cols = mask.grid_shape
    meta = {
        "grid": [rows, cols],
        "slices": mask.n_slices,
        "gradients": mask.n_gradients,
        "acceleration": mask.acceleration,
        "central_fraction": mask.central_fraction,
        "seed": mask.seed,
    }
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_masks(path, sidecar_path):
    arr, _ = arrayfile.read_array(path)
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return SamplingMask(arr.astype(bool), meta["acceleration"],
                        meta["central_fraction"], meta["seed"])
