"""Mesh datasets, the vertex-trajectory data matrix and left/right vertex pairing."""

import os
import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .io import FormatError, read_obj

VMDS_MAGIC = b"VMDS"
VMDS_VERSION = 1
# Optional trailing block carrying the rest-pose template (M*3 float32).
TEMPLATE_TAG = b"TMPL"


@dataclass
class MeshDataset:
    """N meshes sharing one triangle topology.

    Attributes
    ----------
    vertices : (N, M, 3) float32
        Per-sample vertex positions in millimeters, root-centered.
    faces : (F, 3) int64
    template : (M, 3) float32
        Rest pose; its sagittal plane is ``x = 0`` and ``x > 0`` is the left side.
    joint_regressor : (M, J) float64 or None
        Column-stochastic matrix mapping vertices to skeleton joints.
    """

    vertices: np.ndarray
    faces: np.ndarray
    template: np.ndarray
    joint_regressor: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float32)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.template = np.asarray(self.template, dtype=np.float32)
        if self.joint_regressor is not None:
            self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.validate()

    @property
    def n_samples(self):
        return self.vertices.shape[0]

    @property
    def n_vertices(self):
        return self.vertices.shape[1]

    @property
    def n_joints(self):
        return 0 if self.joint_regressor is None else self.joint_regressor.shape[1]

    @property
    def samples(self):
        return [self.vertices[n] for n in range(self.n_samples)]

    def validate(self):
        v = self.vertices
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError(f"vertices must be (N, M, 3), got {v.shape}")
        n, m, _ = v.shape
        if n < 1:
            raise ValueError("dataset needs at least one sample")
        if not np.all(np.isfinite(v)):
            raise ValueError("vertex coordinates must be finite")
        if self.template.shape != (m, 3):
            raise ValueError(f"template must be ({m}, 3), got {self.template.shape}")
        f = self.faces
        if f.size:
            if f.min() < 0 or f.max() >= m:
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")
        R = self.joint_regressor
        if R is not None:
            if R.ndim != 2 or R.shape[0] != m:
                raise ValueError(f"joint_regressor must be ({m}, J), got {R.shape}")
            if np.any(R < 0) or not np.allclose(R.sum(axis=0), 1.0, atol=1e-9):
                raise ValueError("joint_regressor columns must be non-negative and sum to 1")

    def subset(self, index):
        return MeshDataset(self.vertices[index], self.faces, self.template, self.joint_regressor)


@dataclass
class DataMatrix:
    """``X`` of shape (3N, M); rows ``3n..3n+2`` hold sample n's x, y, z."""

    X: np.ndarray
    n_samples: int
    n_vertices: int

    def to_vertices(self):
        """Inverse reshape back to (N, M, 3)."""
        return self.X.reshape(self.n_samples, 3, self.n_vertices).transpose(0, 2, 1)


def assemble_data_matrix(dataset):
    v = np.asarray(dataset.vertices, dtype=np.float64)
    n, m, _ = v.shape
    X = np.ascontiguousarray(v.transpose(0, 2, 1).reshape(3 * n, m))
    return DataMatrix(X, n, m)


@dataclass
class SymmetricPairing:
    """Left/right vertex correspondence on a template.

    ``partner[i]`` is the mirror vertex of ``i``, or ``i`` itself for midline
    vertices. ``unmatched`` lists off-plane vertices that found no partner
    within the cost bound and were demoted to the midline.
    """

    partner: np.ndarray
    tolerance: float
    unmatched: list = field(default_factory=list)

    @property
    def pairs(self):
        return [(int(i), int(j)) for i, j in enumerate(self.partner) if i < j]

    @property
    def midline(self):
        return [int(i) for i, j in enumerate(self.partner) if i == j]


def compute_symmetric_pairs(template, tolerance=1.0):
    """Match each left vertex to the right vertex minimizing
    ``|x_i + x_j| + |y_i - y_j| + |z_i - z_j|``.

    Left vertices are visited in ascending index order and already-matched
    vertices are excluded, so the result is always an involution. Ties go to
    the smallest index. Vertices within ``tolerance`` of the ``x = 0`` plane
    are midline.
    """
    t = np.asarray(template, dtype=np.float64)
    m = t.shape[0]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    partner = np.arange(m)
    taken = np.abs(x) <= tolerance
    right = x < -tolerance
    unmatched = []
    for i in np.flatnonzero(x > tolerance):
        cost = np.abs(x[i] + x) + np.abs(y[i] - y) + np.abs(z[i] - z)
        cost[~right | taken] = np.inf
        j = int(np.argmin(cost))
        if not cost[j] <= 3 * tolerance:
            unmatched.append(int(i))
            continue
        partner[i], partner[j] = j, i
        taken[i] = taken[j] = True
    unmatched.extend(int(j) for j in np.flatnonzero(right & ~taken))
    if unmatched:
        warnings.warn(f"{len(unmatched)} off-plane vertices have no mirror partner; treated as midline")
    return SymmetricPairing(partner, float(tolerance), sorted(unmatched))


def save_dataset(dataset, path):
    """Write a dataset as VMDS (little-endian), followed by the template block."""
    n, m, _ = dataset.vertices.shape
    f = dataset.faces.shape[0]
    j = dataset.n_joints
    with open(path, "wb") as fh:
        fh.write(VMDS_MAGIC)
        fh.write(struct.pack("<5I", VMDS_VERSION, n, m, f, j))
        fh.write(np.ascontiguousarray(dataset.vertices, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.faces, dtype="<u4").tobytes())
        if j:
            fh.write(np.ascontiguousarray(dataset.joint_regressor, dtype="<f8").tobytes())
        fh.write(TEMPLATE_TAG)
        fh.write(np.ascontiguousarray(dataset.template, dtype="<f4").tobytes())


def _load_vmds(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24:
        raise FormatError(f"{path}: file too short for a VMDS header")
    if blob[:4] != VMDS_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {VMDS_MAGIC!r}")
    version, n, m, f, j = struct.unpack_from("<5I", blob, 4)
    if version != VMDS_VERSION:
        raise FormatError(f"{path}: unsupported VMDS version {version}")
    off = 24
    sizes = [("vertices", 4 * n * m * 3), ("faces", 4 * f * 3), ("regressor", 8 * m * j)]
    need = off + sum(s for _, s in sizes)
    if len(blob) < need:
        raise FormatError(f"{path}: truncated payload ({len(blob)} bytes, header implies {need})")
    verts = np.frombuffer(blob, "<f4", n * m * 3, off).reshape(n, m, 3).astype(np.float32)
    off += sizes[0][1]
    faces = np.frombuffer(blob, "<u4", f * 3, off).reshape(f, 3).astype(np.int64)
    off += sizes[1][1]
    reg = None
    if j:
        reg = np.frombuffer(blob, "<f8", m * j, off).reshape(m, j).astype(np.float64)
        off += sizes[2][1]
    template = verts[0].copy()
    rest = blob[off:]
    if rest:
        if rest[:4] != TEMPLATE_TAG or len(rest) != 4 + 4 * m * 3:
            raise FormatError(f"{path}: {len(rest)} unexpected trailing bytes")
        template = np.frombuffer(rest, "<f4", m * 3, 4).reshape(m, 3).astype(np.float32)
    if n == 0:
        raise FormatError(f"{path}: header declares zero samples")
    if f and faces.max() >= m:
        raise FormatError(f"{path}: face index {faces.max()} out of range for M={m}")
    try:
        return MeshDataset(verts, faces, template, reg)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _load_obj_dir(path):
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".obj"))
    template = None
    if "template.obj" in names:
        names.remove("template.obj")
        template, _ = read_obj(os.path.join(path, "template.obj"))
    if not names:
        raise FormatError(f"{path}: no OBJ files")
    verts, faces = [], None
    for name in names:
        v, f = read_obj(os.path.join(path, name))
        if verts and v.shape[0] != verts[0].shape[0]:
            raise FormatError(
                f"{path}/{name}: topology mismatch, {v.shape[0]} vertices vs {verts[0].shape[0]} in {names[0]}"
            )
        if faces is not None and not np.array_equal(f, faces):
            raise FormatError(f"{path}/{name}: topology mismatch, face list differs from {names[0]}")
        verts.append(v)
        faces = f
    if template is None:
        template = verts[0]
    elif template.shape != verts[0].shape:
        raise FormatError(f"{path}/template.obj: topology mismatch with samples")
    return MeshDataset(np.stack(verts), faces, template)


def load_dataset(path):
    """Load a VMDS file or a directory of same-topology OBJ files.

    In a directory, samples are taken in lexicographic filename order; a file
    named ``template.obj`` is used as the template instead of the first sample.
    """
    if os.path.isdir(path):
        return _load_obj_dir(path)
    return _load_vmds(path)
