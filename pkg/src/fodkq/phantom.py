"""Synthetic crossing-fiber phantom and kq-space acquisition simulator.

The phantom is a procedural stand-in for a public challenge dataset that
is not redistributable: fiber bundles are tubes around parametric
centerlines (straight segments or circular arcs), rasterized onto the
voxel grid. Voxels covered by several bundles become crossings with
equal volume fractions, and the b=0 image is the sum of the bundle
weights.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError
from .geometry import canonicalize_hemisphere
from .dictionary import TensorParams
from . import arrayfile

MAX_FIBERS_PER_VOXEL = 5
_CURVE_SAMPLES = 1024
PHASE_SHIFT_RANGE_PX = 2.0


@dataclass(frozen=True)
class Bundle:
    centerline: dict
    radius: float
    weight: int
    distance: str = "xyz"  # "xyz" tube, or "xy" prism through all slices

    def __post_init__(self):
        if self.weight not in (1, 2, 3, 4, 5):
            raise UsageError("bundle weight must be an integer in 1..5")
        if self.radius <= 0:
            raise UsageError("bundle radius must be positive")
        if self.distance not in ("xyz", "xy"):
            raise UsageError("bundle distance mode must be 'xyz' or 'xy'")


@dataclass(frozen=True)
class PhantomSpec:
    volume_shape: tuple
    bundles: tuple
    snr: float | None = 30.0
    phase_mode: str = "none"
    seed: int = 0

    def __post_init__(self):
        if len(self.volume_shape) != 3:
            raise UsageError("volume_shape must have 3 entries")
        if not self.bundles:
            raise UsageError("phantom needs at least one bundle")
        if self.phase_mode not in ("none", "linear"):
            raise UsageError("phase_mode must be 'none' or 'linear'")

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw):
        try:
            bundles = tuple(
                Bundle(b["centerline"], float(b["radius"]), int(b["weight"]),
                       b.get("distance", "xyz"))
                for b in raw["bundles"]
            )
            return cls(
                volume_shape=tuple(int(v) for v in raw["volume_shape"]),
                bundles=bundles,
                snr=raw.get("snr", 30.0),
                phase_mode=raw.get("phase_mode", "none"),
                seed=int(raw.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"malformed phantom spec: {exc}") from exc


def _sample_centerline(curve, n=_CURVE_SAMPLES):
    """Return (points, tangents) arrays sampled along a centerline."""
    kind = curve.get("type")
    if kind == "line":
        start = np.asarray(curve["start"], dtype=float)
        end = np.asarray(curve["end"], dtype=float)
        t = np.linspace(0.0, 1.0, n)[:, None]
        pts = start + t * (end - start)
        tan = np.tile(end - start, (n, 1))
    elif kind == "arc":
        center = np.asarray(curve["center"], dtype=float)
        radius = float(curve["radius"])
        a0 = math.radians(float(curve["start_angle_deg"]))
        a1 = math.radians(float(curve["end_angle_deg"]))
        theta = np.linspace(a0, a1, n)
        pts = center + radius * np.column_stack(
            [np.cos(theta), np.sin(theta), np.zeros(n)])
        tan = np.column_stack([-np.sin(theta), np.cos(theta), np.zeros(n)])
    else:
        raise UsageError(f"unknown centerline type '{kind}'")
    norms = np.linalg.norm(tan, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise UsageError("degenerate centerline")
    return pts, tan / norms


@dataclass(frozen=True)
class GroundTruth:
    """Padded per-voxel fiber table plus the b=0 image."""

    directions: np.ndarray  # (N, MAX_FIBERS, 3); zero rows are padding
    fractions: np.ndarray  # (N, MAX_FIBERS); rows sum to 1 or 0
    s0: np.ndarray  # (nx, ny, nz)
    volume_shape: tuple

    @property
    def fiber_counts(self):
        return (self.fractions > 0).sum(axis=1)

    def fibers(self, v):
        """List of (direction, fraction) for flat voxel index v."""
        m = self.fractions[v] > 0
        return list(zip(self.directions[v][m], self.fractions[v][m]))


def rasterize_phantom(spec, snap_to=None):
    """Rasterize bundle tubes onto the voxel grid.

    Every voxel whose center lies within a bundle's radius receives that
    bundle's local tangent direction; co-located bundles share the voxel
    with equal volume fractions, and the b=0 intensity is the sum of
    their weights. With `snap_to` given, tangents snap to the nearest
    direction of that set (debugging aid for exact-recovery tests).

    Raises DataError if a centerline leaves the volume or more than
    5 bundles meet in one voxel.
    """
    nx, ny, nz = spec.volume_shape
    lo = np.array([-0.5, -0.5, -0.5])
    hi = np.array([nx - 0.5, ny - 0.5, nz - 0.5])
    centers = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                   indexing="ij"), axis=-1).reshape(-1, 3)
    n_vox = len(centers)
    dirs = np.zeros((n_vox, MAX_FIBERS_PER_VOXEL, 3))
    counts = np.zeros(n_vox, dtype=int)
    weight_sum = np.zeros(n_vox)
    for bundle in spec.bundles:
        pts, tans = _sample_centerline(bundle.centerline)
        if np.any(pts < lo) or np.any(pts > hi):
            raise DataError("bundle out of bounds")
        axes = slice(0, 2) if bundle.distance == "xy" else slice(0, 3)
        diff = centers[:, None, axes] - pts[None, :, axes]
        dist2 = np.einsum("vpk,vpk->vp", diff, diff)
        nearest = np.argmin(dist2, axis=1)
        covered = np.sqrt(dist2[np.arange(n_vox), nearest]) <= bundle.radius
        tangent = canonicalize_hemisphere(tans[nearest])
        for v in np.flatnonzero(covered):
            if counts[v] >= MAX_FIBERS_PER_VOXEL:
                raise DataError("more than 5 bundles meet in one voxel")
            dirs[v, counts[v]] = tangent[v]
            counts[v] += 1
        weight_sum[covered] += bundle.weight
    if snap_to is not None:
        grid = snap_to.vectors
        for v in np.flatnonzero(counts):
            d = dirs[v, :counts[v]]
            best = np.argmax(np.abs(d @ grid.T), axis=1)
            dirs[v, :counts[v]] = grid[best]
    fracs = np.zeros((n_vox, MAX_FIBERS_PER_VOXEL))
    present = counts > 0
    fracs[present] = (np.arange(MAX_FIBERS_PER_VOXEL)[None, :]
                      < counts[present, None]) / counts[present, None]
    return GroundTruth(dirs, fracs, weight_sum.reshape(nx, ny, nz),
                       spec.volume_shape)


def synthesize_q_signal(gt, q, wm=TensorParams()):
    """Clean q-space signal from the tensor mixture model.

    Returns an (M, nx, ny, nz) array; the first gradient (b=0) equals the
    s0 image exactly.
    """
    nx, ny, nz = gt.volume_shape
    s0 = gt.s0.reshape(-1)
    out = np.zeros((q.count, len(s0)))
    delta = wm.lambda1 - wm.lambda2
    for i in range(q.count):
        b = q.bvals[i]
        dots = gt.directions @ q.directions[i]  # (N, MAX_FIBERS)
        atten = np.exp(-b * (wm.lambda2 + delta * dots**2))
        out[i] = s0 * np.sum(gt.fractions * atten, axis=1)
    return out.reshape(q.count, nx, ny, nz)


@dataclass(frozen=True)
class KqMeasurements:
    """Under-sampled complex k-space data, one block per gradient."""

    samples: list  # per gradient: (C, n_slices, K_q) complex
    masks: "object"
    snr: float | None
    noise_sigma: float
    phase_shifts: np.ndarray | None = None  # (M, n_slices, 2) pixels, or None

    @property
    def n_gradients(self):
        return len(self.samples)

    @property
    def n_coils(self):
        return self.samples[0].shape[0]


def draw_phase_shifts(n_gradients, n_slices, seed):
    """Per-(gradient, slice) k-space shifts, uniform in +-2 pixels."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7001)))
    return rng.uniform(-PHASE_SHIFT_RANGE_PX, PHASE_SHIFT_RANGE_PX,
                       size=(n_gradients, n_slices, 2))


def linear_phase_map(shift, grid):
    """Unit-modulus image whose product shifts centered k-space by `shift`."""
    rows, cols = grid
    sx, sy = shift
    x = np.arange(rows)[:, None]
    y = np.arange(cols)[None, :]
    return np.exp(2j * np.pi * (sx * x / rows + sy * y / cols))


def phase_maps_from_shifts(shifts, volume_shape):
    """(M, nx, ny, nz) unit-modulus phase volumes from the shift table."""
    nx, ny, nz = volume_shape
    m = shifts.shape[0]
    maps = np.empty((m, nx, ny, nz), dtype=complex)
    for q in range(m):
        for s in range(nz):
            maps[q, :, :, s] = linear_phase_map(shifts[q, s], (nx, ny))
    return maps


def fft2c(vol):
    """Unitary 2D DFT over the first two axes, DC moved to the center."""
    return np.fft.fftshift(np.fft.fft2(vol, axes=(0, 1), norm="ortho"),
                           axes=(0, 1))


def ifft2c(ksp):
    """Inverse of :func:`fft2c`."""
    return np.fft.ifft2(np.fft.ifftshift(ksp, axes=(0, 1)), axes=(0, 1),
                        norm="ortho")


def noise_sigma_from_snr(s0, snr):
    """Per-component k-space noise std: mean of nonempty s0 over SNR."""
    if snr is None or snr == np.inf:
        return 0.0
    if snr <= 0:
        raise UsageError("snr must be positive")
    nonempty = s0[s0 > 0]
    if nonempty.size == 0:
        raise DataError("s0 image is identically zero")
    return float(nonempty.mean() / snr)


def acquire(signal, masks, snr, phase_mode="none", sens=None, seed=0):
    """Simulate the under-sampled multi-coil kq-space acquisition.

    Per slice and gradient: apply the linear phase map (if any), multiply
    by each coil sensitivity, take the unitary 2D DFT, add i.i.d. complex
    Gaussian noise with per-component std mean(s0)/snr, and keep the
    masked points. Deterministic for a fixed seed; noise and phase use
    per-(gradient, slice) substreams.
    """
    m, nx, ny, nz = signal.shape
    if masks.grid_shape != (nx, ny) or masks.n_slices != nz:
        raise DataError("signal shape does not match masks")
    if masks.n_gradients != m:
        raise DataError("gradient count does not match masks")
    if sens is None:
        sens = np.ones((1, nx, ny, nz), dtype=complex)
    sigma = noise_sigma_from_snr(signal[0], snr)
    shifts = None
    if phase_mode == "linear":
        shifts = draw_phase_shifts(m, nz, seed)
    elif phase_mode != "none":
        raise UsageError("phase_mode must be 'none' or 'linear'")
    n_coils = sens.shape[0]
    samples = []
    for q in range(m):
        vol = signal[q].astype(complex)
        if shifts is not None:
            for s in range(nz):
                vol[:, :, s] *= linear_phase_map(shifts[q, s], (nx, ny))
        coil_ksp = fft2c(vol[None, :, :, :] * sens)  # (C, nx, ny, nz)
        if sigma > 0:
            for s in range(nz):
                rng = np.random.default_rng(
                    np.random.SeedSequence((seed, 9001, q, s)))
                noise = rng.standard_normal((n_coils, nx, ny, 2))
                coil_ksp[:, :, :, s] += sigma * (noise[..., 0]
                                                 + 1j * noise[..., 1])
        idx = masks.flat_indices(q)  # (nz, K_q)
        flat = coil_ksp.reshape(n_coils, nx * ny, nz)
        gathered = np.empty((n_coils, nz, idx.shape[1]), dtype=complex)
        for s in range(nz):
            gathered[:, s, :] = flat[:, idx[s], s]
        samples.append(gathered)
    return KqMeasurements(samples, masks, snr, sigma, shifts)


def save_ground_truth(gt, dirs_path, fracs_path, s0_path):
    arrayfile.write_array(dirs_path, gt.directions, semantic="gt_directions")
    arrayfile.write_array(fracs_path, gt.fractions, semantic="gt_fractions")
    arrayfile.write_array(s0_path, gt.s0, semantic="s0")


def load_ground_truth(dirs_path, fracs_path, s0_path):
    dirs, _ = arrayfile.read_array(dirs_path)
    fracs, _ = arrayfile.read_array(fracs_path)
    s0, _ = arrayfile.read_array(s0_path)
    return GroundTruth(dirs, fracs, s0, tuple(s0.shape))


def save_measurements(meas, path, sidecar_path):
    flat = np.concatenate([blk.ravel() for blk in meas.samples])
    arrayfile.write_array(path, flat, semantic="kq_measurements")
    meta = {
        "per_gradient_k": [int(blk.shape[2]) for blk in meas.samples],
        "coils": meas.n_coils,
        "slices": int(meas.samples[0].shape[1]),
        "snr": meas.snr,
        "noise_sigma": meas.noise_sigma,
        "phase_shifts": (None if meas.phase_shifts is None
                         else meas.phase_shifts.tolist()),
    }
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_measurements(path, sidecar_path, masks):
    flat, _ = arrayfile.read_array(path)
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    coils = meta["coils"]
    slices = meta["slices"]
    samples = []
    pos = 0
    for k in meta["per_gradient_k"]:
        n = coils * slices * k
        samples.append(flat[pos:pos + n].reshape(coils, slices, k))
        pos += n
    if pos != flat.size:
        raise DataError(f"{path}: measurement payload size mismatch")
    shifts = meta.get("phase_shifts")
    return KqMeasurements(samples, masks, meta["snr"], meta["noise_sigma"],
                          None if shifts is None else np.asarray(shifts))
