"""Tissue layout, the kq-space measurement operator and its adjoint.

The operator maps the tissue-wise FOD coefficients S = (s1, s2, s3)
through the dictionary to diffusion images, modulates them by the b=0
image, coil sensitivities and phase maps, takes a unitary slice-wise 2D
DFT and keeps the masked k-space points. Everything uses the unitary
DFT convention so the adjoint of the transform is its inverse.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .phantom import fft2c, ifft2c
from .sampling import central_zone_bounds

TISSUE_THRESHOLD = 0.5


@dataclass(frozen=True)
class TissueLayout:
    """Sorted voxel index lists for white matter, gray matter and CSF."""

    wm_voxels: np.ndarray
    gm_voxels: np.ndarray
    csf_voxels: np.ndarray
    total_voxels: int

    def __post_init__(self):
        for name in ("wm_voxels", "gm_voxels", "csf_voxels"):
            idx = np.ascontiguousarray(getattr(self, name), dtype=np.intp)
            if idx.size and (idx.min() < 0 or idx.max() >= self.total_voxels):
                raise DataError(f"{name} out of range")
            if np.any(np.diff(idx) <= 0):
                raise DataError(f"{name} must be sorted and unique")
            idx.flags.writeable = False
            object.__setattr__(self, name, idx)
        if self.n1 + self.n2 + self.n3 < 1:
            raise DataError("layout has no tissue voxels")

    @property
    def n1(self):
        return len(self.wm_voxels)

    @property
    def n2(self):
        return len(self.gm_voxels)

    @property
    def n3(self):
        return len(self.csf_voxels)

    @classmethod
    def from_probability_maps(cls, maps, threshold=TISSUE_THRESHOLD):
        """Binarize (3, N) probability maps at `threshold`, per tissue."""
        maps = np.asarray(maps, dtype=float).reshape(3, -1)
        wm, gm, csf = (np.flatnonzero(maps[i] >= threshold) for i in range(3))
        return cls(wm, gm, csf, maps.shape[1])

    @classmethod
    def all_white_matter(cls, wm_mask):
        """Layout for the synthetic case: WM voxels only, no GM/CSF."""
        wm = np.flatnonzero(np.asarray(wm_mask).ravel())
        empty = np.empty(0, dtype=np.intp)
        return cls(wm, empty, empty, np.asarray(wm_mask).size)


@dataclass
class FodField:
    """Tissue-wise FOD coefficients: fiber block plus isotropic rows."""

    s1: np.ndarray  # (n, N1)
    s2: np.ndarray  # (1, N2)
    s3: np.ndarray  # (1, N3)
    layout: TissueLayout

    @classmethod
    def zeros(cls, n_fiber, layout):
        return cls(np.zeros((n_fiber, layout.n1)),
                   np.zeros((1, layout.n2)),
                   np.zeros((1, layout.n3)), layout)

    def copy(self):
        return FodField(self.s1.copy(), self.s2.copy(), self.s3.copy(),
                        self.layout)

    def __add__(self, other):
        return FodField(self.s1 + other.s1, self.s2 + other.s2,
                        self.s3 + other.s3, self.layout)

    def __sub__(self, other):
        return FodField(self.s1 - other.s1, self.s2 - other.s2,
                        self.s3 - other.s3, self.layout)

    def __rmul__(self, a):
        return FodField(a * self.s1, a * self.s2, a * self.s3, self.layout)

    def vdot(self, other):
        return (float(np.vdot(self.s1, other.s1))
                + float(np.vdot(self.s2, other.s2))
                + float(np.vdot(self.s3, other.s3)))

    def norm(self):
        return np.sqrt(self.vdot(self))

    def isfinite(self):
        return (np.all(np.isfinite(self.s1)) and np.all(np.isfinite(self.s2))
                and np.all(np.isfinite(self.s3)))


@dataclass(frozen=True)
class CalibrationData:
    """b=0 image, coil sensitivities and per-(gradient, coil) phase maps."""

    s0: np.ndarray  # (nx, ny, nz) real >= 0
    sensitivities: np.ndarray  # (C, nx, ny, nz) complex
    phase_maps: np.ndarray | None = None  # (M, C, nx, ny, nz) unit modulus

    def __post_init__(self):
        if self.phase_maps is not None:
            mod = np.abs(self.phase_maps)
            if np.any(np.abs(mod - 1.0) > 1e-9):
                raise DataError("phase map entries must have unit modulus")

    @classmethod
    def identity(cls, s0, n_coils=1):
        sens = np.ones((n_coils,) + s0.shape, dtype=complex)
        return cls(np.asarray(s0, dtype=float), sens, None)

    @property
    def n_coils(self):
        return self.sensitivities.shape[0]


def expand(field, n_iso=2):
    """Scatter the tissue blocks into the full (n_fiber + n_iso, N) matrix.

    Fiber rows receive s1 at the white-matter voxels, the first isotropic
    row receives s2 at the gray-matter voxels, the second receives s3 at
    the CSF voxels; everything else is zero.
    """
    lay = field.layout
    n = field.s1.shape[0]
    x = np.zeros((n + n_iso, lay.total_voxels))
    x[:n, lay.wm_voxels] = field.s1
    if lay.n2:
        x[n, lay.gm_voxels] = field.s2[0]
    if lay.n3:
        if n_iso < 2:
            raise DataError("CSF voxels present but no CSF atom row")
        x[n + 1, lay.csf_voxels] = field.s3[0]
    return x


def restrict(x, layout, n_fiber):
    """Adjoint of :func:`expand`: gather the tissue blocks out of X."""
    n_iso = x.shape[0] - n_fiber
    s1 = np.array(x[:n_fiber, layout.wm_voxels])
    s2 = (np.array(x[n_fiber, layout.gm_voxels])[None, :]
          if n_iso >= 1 and layout.n2 else np.zeros((1, layout.n2)))
    s3 = (np.array(x[n_fiber + 1, layout.csf_voxels])[None, :]
          if n_iso >= 2 and layout.n3 else np.zeros((1, layout.n3)))
    return FodField(s1, s2, s3, layout)


class KqOperator:
    """The concatenated per-(gradient, coil) measurement operators.

    Precomputes the voxelwise modulation s0 * U^(c) * H^(q,c) and the
    flattened mask gather indices so that one application is a dictionary
    matmul, a batched FFT and a gather.
    """

    def __init__(self, dictionary, layout, calib, masks):
        self.dictionary = dictionary
        self.layout = layout
        self.calib = calib
        self.masks = masks
        nx, ny = masks.grid_shape
        nz = masks.n_slices
        self.volume_shape = (nx, ny, nz)
        if layout.total_voxels != nx * ny * nz:
            raise DataError("layout size does not match mask grid")
        m = dictionary.matrix.shape[0]
        if masks.n_gradients != m:
            raise DataError("mask gradient count does not match dictionary")
        c = calib.n_coils
        mod = (calib.s0[None, None] * calib.sensitivities[None, :]
               * np.ones((m, c, nx, ny, nz)))
        if calib.phase_maps is not None:
            if calib.phase_maps.shape != (m, c, nx, ny, nz):
                raise DataError("phase map shape mismatch")
            mod = mod * calib.phase_maps
        self._mod = mod.astype(complex)
        self._idx = [masks.flat_indices(q) for q in range(m)]
        if layout.n3 > 0 and dictionary.n_iso < 2:
            raise DataError("layout has CSF voxels but dictionary no CSF atom")

    @property
    def n_fiber(self):
        return self.dictionary.n_fiber

    def zeros_field(self):
        return FodField.zeros(self.n_fiber, self.layout)

    def apply(self, field):
        """A(Z(S)): list over gradients of (C, n_slices, K_q) samples."""
        nx, ny, nz = self.volume_shape
        x = expand(field, n_iso=self.dictionary.n_iso)
        imgs = self.dictionary.matrix @ x  # (M, N)
        m, c = imgs.shape[0], self.calib.n_coils
        vols = imgs.reshape(m, 1, nx, ny, nz) * self._mod  # (M, C, nx, ny, nz)
        ksp = np.fft.fftshift(
            np.fft.fft2(vols, axes=(2, 3), norm="ortho"), axes=(2, 3))
        out = []
        for q in range(m):
            idx = self._idx[q]
            flat = ksp[q].reshape(c, nx * ny, nz)
            gathered = np.empty((c, nz, idx.shape[1]), dtype=complex)
            for s in range(nz):
                gathered[:, s, :] = flat[:, idx[s], s]
            out.append(gathered)
        return out

    def adjoint(self, data):
        """Exact adjoint of :func:`apply` composed with the restriction.

        The imaginary part left after back-projection is discarded: that
        is the adjoint of embedding real FOD coefficients into complex
        measurement space.
        """
        nx, ny, nz = self.volume_shape
        m, c = len(data), self.calib.n_coils
        if m != self.dictionary.matrix.shape[0]:
            raise DataError("data gradient count does not match operator")
        ksp = np.zeros((m, c, nx * ny, nz), dtype=complex)
        for q in range(m):
            blk = data[q]
            idx = self._idx[q]
            if blk.shape != (c, nz, idx.shape[1]):
                raise DataError("measurement block shape mismatch")
            for s in range(nz):
                ksp[q, :, idx[s], s] = blk[:, s, :].T
        vols = np.fft.ifft2(
            np.fft.ifftshift(ksp.reshape(m, c, nx, ny, nz), axes=(2, 3)),
            axes=(2, 3), norm="ortho")
        imgs = (vols * np.conj(self._mod)).sum(axis=1).reshape(m, -1)
        x = self.dictionary.matrix.T @ imgs.real
        return restrict(x, self.layout, self.n_fiber)


def meas_zeros_like(data):
    return [np.zeros_like(blk) for blk in data]


def meas_sub(a, b):
    return [x - y for x, y in zip(a, b)]


def meas_norm2(data):
    return float(sum(np.vdot(blk, blk).real for blk in data))


def meas_vdot(a, b):
    return complex(sum(np.vdot(x, y) for x, y in zip(a, b)))


def estimate_phase(kspace, masks):
    """Phase maps from the fully-sampled central k-space zone.

    `kspace` holds centered (M, C, nx, ny, nz) grids; points outside the
    calibration zone are zeroed, the inverse unitary DFT is taken, and
    each pixel contributes its unit-modulus phase. Pixels with magnitude
    below 1e-12 get phase 1.
    """
    m, c, nx, ny, nz = kspace.shape
    r0, r1 = central_zone_bounds(nx, masks.central_fraction)
    c0, c1 = central_zone_bounds(ny, masks.central_fraction)
    lowpass = np.zeros_like(kspace)
    lowpass[:, :, r0:r1, c0:c1, :] = kspace[:, :, r0:r1, c0:c1, :]
    imgs = np.fft.ifft2(np.fft.ifftshift(lowpass, axes=(2, 3)),
                        axes=(2, 3), norm="ortho")
    mag = np.abs(imgs)
    phase = np.where(mag < 1e-12, 1.0 + 0j, imgs / np.where(mag == 0, 1, mag))
    return phase


def embed_full_grids(meas):
    """Zero-filled centered k-space grids from masked measurements."""
    masks = meas.masks
    nx, ny = masks.grid_shape
    nz = masks.n_slices
    m, c = meas.n_gradients, meas.n_coils
    grids = np.zeros((m, c, nx * ny, nz), dtype=complex)
    for q in range(m):
        idx = masks.flat_indices(q)
        for s in range(nz):
            grids[q, :, idx[s], s] = meas.samples[q][:, s, :].T
    return grids.reshape(m, c, nx, ny, nz)


def estimate_sensitivities(coil_s0_images):
    """Sum-of-squares coil sensitivities from per-coil b=0 images."""
    coil_s0_images = np.asarray(coil_s0_images)
    rss = np.sqrt(np.sum(np.abs(coil_s0_images) ** 2, axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        sens = np.where(rss > 0, coil_s0_images / np.where(rss == 0, 1, rss), 0)
    return sens.astype(complex)


@dataclass(frozen=True)
class SpectralNormEstimate:
    value: float
    iterations: int
    converged: bool


def _rand_like(x, rng):
    if isinstance(x, FodField):
        return FodField(rng.standard_normal(x.s1.shape),
                        rng.standard_normal(x.s2.shape),
                        rng.standard_normal(x.s3.shape), x.layout)
    return rng.standard_normal(np.shape(x))


def _dot(a, b):
    if isinstance(a, FodField):
        return a.vdot(b)
    return float(np.vdot(a, b).real)


def spectral_norm(forward_fn, adjoint_fn, template, tol=1e-6, max_iter=200,
                  seed=0):
    """Largest singular value of a linear operator by power iteration.

    `template` fixes the domain shape (an ndarray or FodField). Runs the
    iteration on A^T A from a seeded random start and returns the square
    root of the Rayleigh quotient once its relative change drops below
    `tol`. If the cap is hit first, the current estimate is returned with
    converged=False.
    """
    rng = np.random.default_rng(seed)
    v = _rand_like(template, rng)
    nv = np.sqrt(_dot(v, v))
    if nv == 0:
        raise DataError("degenerate start vector")
    v = (1.0 / nv) * v
    rho_old = None
    it = 0
    for it in range(1, max_iter + 1):
        w = adjoint_fn(forward_fn(v))
        rho = _dot(v, w)  # = ||A v||^2 for unit v
        nw = np.sqrt(_dot(w, w))
        if nw == 0:
            return SpectralNormEstimate(0.0, it, True)
        if rho_old is not None and abs(rho - rho_old) <= tol * abs(rho):
            return SpectralNormEstimate(float(np.sqrt(rho)), it, True)
        rho_old = rho
        v = (1.0 / nw) * w
    return SpectralNormEstimate(float(np.sqrt(rho_old)), it, False)
