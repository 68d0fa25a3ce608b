"""Response dictionary of single-fiber and isotropic diffusion atoms.

Each fiber atom is the tensor-model response of a fiber along one
discretized direction, evaluated at every q-point; isotropic atoms
depend on the b-value only.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError
from . import arrayfile

# Diffusivities in mm^2/s used throughout the synthetic experiments.
WM_LAMBDA1 = 17e-4
WM_LAMBDA23 = 3e-4
GM_DIFFUSIVITY = 17e-4
CSF_DIFFUSIVITY = 30e-4

ATOM_FIBER = "fiber"
ATOM_ISO_GM = "iso_gm"
ATOM_ISO_CSF = "iso_csf"


@dataclass(frozen=True)
class TensorParams:
    """Axial diffusion tensor eigenvalues, mm^2/s, lambda1 >= lambda2 >= lambda3 > 0."""

    lambda1: float = WM_LAMBDA1
    lambda2: float = WM_LAMBDA23
    lambda3: float = WM_LAMBDA23

    def __post_init__(self):
        if not self.lambda1 >= self.lambda2 >= self.lambda3 > 0:
            raise UsageError("need lambda1 >= lambda2 >= lambda3 > 0")


def rotate_tensor(wm, d):
    """Diffusion tensor with principal axis along d.

    Uses the closed form lambda1*ddT + lambda2*(I - ddT) when the two
    transverse eigenvalues coincide; otherwise rotates diag(l2, l3, l1)
    by the rotation taking (0,0,1) to d.
    """
    d = np.asarray(d, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise DataError("direction not normalized")
    if wm.lambda2 == wm.lambda3:
        outer = np.outer(d, d)
        return wm.lambda1 * outer + wm.lambda2 * (np.eye(3) - outer)
    ez = np.array([0.0, 0.0, 1.0])
    c = float(ez @ d)
    if c > 1.0 - 1e-12:
        rot = np.eye(3)
    elif c < -1.0 + 1e-12:
        rot = np.diag([1.0, -1.0, -1.0])
    else:
        k = np.cross(ez, d)
        k /= np.linalg.norm(k)
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        rot = np.eye(3) + np.sin(np.arccos(c)) * kx + (1 - c) * (kx @ kx)
    canon = np.diag([wm.lambda2, wm.lambda3, wm.lambda1])
    return rot @ canon @ rot.T


def fiber_response(bvals, q_dirs, fiber_dir, wm):
    """exp(-b qT D q) for one fiber direction against all q-points."""
    q_dirs = np.asarray(q_dirs, dtype=float)
    if wm.lambda2 == wm.lambda3:
        dots = q_dirs @ np.asarray(fiber_dir, dtype=float)
        adc = wm.lambda2 + (wm.lambda1 - wm.lambda2) * dots**2
    else:
        tensor = rotate_tensor(wm, fiber_dir)
        adc = np.einsum("qi,ij,qj->q", q_dirs, tensor, q_dirs)
    return np.exp(-np.asarray(bvals, dtype=float) * adc)


@dataclass(frozen=True)
class ResponseDictionary:
    """Matrix of atom responses plus the parameters that generated it."""

    matrix: np.ndarray  # (M, n_atoms), entries in (0, 1]
    q_scheme: "object"
    fiber_dirs: "object"
    atom_kinds: tuple
    white_matter_tensor: TensorParams
    iso_diffusivities: tuple

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=float)
        if np.any(m <= 0) or np.any(m > 1):
            raise DataError("dictionary entries must lie in (0, 1]")
        if not np.all(m[0] == 1.0):
            raise DataError("b=0 row must be all ones")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def n_fiber(self):
        return self.fiber_dirs.count

    @property
    def n_atoms(self):
        return self.matrix.shape[1]

    @property
    def n_iso(self):
        return self.n_atoms - self.n_fiber


def build_dictionary(q, dirs, wm=TensorParams(), iso=(GM_DIFFUSIVITY,)):
    """Assemble the response dictionary for a q-scheme and direction set.

    Parameters
    ----------
    q : QScheme
    dirs : DirectionSet
        Fiber atom directions, one column each.
    wm : TensorParams
        White-matter single-fiber tensor.
    iso : sequence of float
        Isotropic diffusivities; length 1 gives the synthetic-phantom
        dictionary (n+1 atoms), length 2 the tissue dictionary with
        gray matter and CSF compartments (n+2 atoms).
    """
    iso = tuple(float(v) for v in iso)
    if len(iso) not in (1, 2):
        raise UsageError("iso must list 1 or 2 diffusivities")
    bvals = q.bvals
    cols = [fiber_response(bvals, q.directions, d, wm) for d in dirs.vectors]
    kinds = [(ATOM_FIBER, i) for i in range(dirs.count)]
    iso_kinds = [ATOM_ISO_GM, ATOM_ISO_CSF]
    for i, lam in enumerate(iso):
        cols.append(np.exp(-bvals * lam))
        kinds.append((iso_kinds[i], None))
    return ResponseDictionary(
        matrix=np.column_stack(cols),
        q_scheme=q,
        fiber_dirs=dirs,
        atom_kinds=tuple(kinds),
        white_matter_tensor=wm,
        iso_diffusivities=iso,
    )


def _sha256(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def save_dictionary(d, path, sidecar_path):
    """Persist the matrix plus a sidecar identifying its inputs."""
    arrayfile.write_array(path, d.matrix, semantic="response_dictionary")
    meta = {
        "q_scheme_sha256": _sha256(np.column_stack([d.q_scheme.bvals, d.q_scheme.directions])),
        "direction_set_sha256": _sha256(d.fiber_dirs.vectors),
        "wm_lambdas": [d.white_matter_tensor.lambda1,
                       d.white_matter_tensor.lambda2,
                       d.white_matter_tensor.lambda3],
        "iso_diffusivities": list(d.iso_diffusivities),
        "n_fiber": d.n_fiber,
    }
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
