"""Fixed-topology triangle meshes and the rigid-invariant feature transform.

A deformed mesh is reduced to a flat displacement field: the deformed
vertices are rigidly aligned (rotation + translation, least squares) onto
the rest pose and the residual per-vertex offsets are flattened into a
vector of length 3*|V|.  The transform factors out any rigid motion of the
input; its inverse adds the displacements back onto the rest pose, so the
pair gives an exact round trip on canonical (alignment-residual-free)
feature vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SCFV"
FORMAT_VERSION = 1


class MeshError(ValueError):
    """Malformed mesh data (bad shapes, out-of-range indices)."""


class MeshIOError(ValueError):
    """Unparseable OBJ or feature file."""


class AlignmentError(ValueError):
    """Rigid alignment is ill-posed (collinear rest pose)."""


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with deformed and rest vertex positions.

    ``triangles`` is shared across every mesh of a dataset; only the
    vertex positions change between poses.
    """

    vertices: np.ndarray       # (V, 3) float64
    triangles: np.ndarray      # (T, 3) int64, indices into vertices
    rest_vertices: np.ndarray  # (V, 3) float64

    def __post_init__(self):
        object.__setattr__(self, "vertices", _as_points(self.vertices, "vertices"))
        object.__setattr__(self, "rest_vertices", _as_points(self.rest_vertices, "rest_vertices"))
        tris = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise MeshError(f"triangles must be (T, 3), got {tris.shape}")
        object.__setattr__(self, "triangles", tris)
        if len(self.vertices) != len(self.rest_vertices):
            raise MeshError(
                f"vertex count mismatch: {len(self.vertices)} deformed vs "
                f"{len(self.rest_vertices)} rest"
            )
        if tris.size and (tris.min() < 0 or tris.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same topology and rest pose, new deformed positions."""
        return Mesh(vertices, self.triangles, self.rest_vertices)

    def bounding_box_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


def _as_points(a, name) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if a.ndim != 2 or a.shape[1] != 3:
        raise MeshError(f"{name} must be (N, 3), got {a.shape}")
    return a


@dataclass
class ValidationReport:
    """Every manifold violation found in a mesh; empty report means valid."""

    degenerate_triangles: list = field(default_factory=list)   # triangle index
    nonmanifold_edges: list = field(default_factory=list)      # (v0, v1, incidence)

    @property
    def is_valid(self) -> bool:
        return not self.degenerate_triangles and not self.nonmanifold_edges


def validate_manifold(mesh: Mesh) -> ValidationReport:
    """Check the manifold assumption: each undirected edge on at most 2 triangles.

    Degenerate triangles (repeated vertex index) are reported separately and
    excluded from the edge count.
    """
    report = ValidationReport()
    tris = mesh.triangles
    degenerate = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
    report.degenerate_triangles = np.nonzero(degenerate)[0].tolist()

    good = tris[~degenerate]
    if len(good):
        edges = good[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        edges = np.sort(edges, axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        for (a, b), c in zip(uniq[counts > 2], counts[counts > 2]):
            report.nonmanifold_edges.append((int(a), int(b), int(c)))
    return report


# -- rigid alignment ---------------------------------------------------------

def _kabsch_rotation(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Rotation R (det +1) minimizing ||R s_i - t_i||^2 for centered point sets.

    Signs of the singular vectors are fixed deterministically (largest-magnitude
    entry of each left singular vector made positive) so degenerate spectra
    still produce a reproducible rotation.
    """
    H = source.T @ target
    U, _, Vt = np.linalg.svd(H)
    for k in range(3):
        j = int(np.argmax(np.abs(U[:, k])))
        if U[j, k] < 0:
            U[:, k] = -U[:, k]
            Vt[k, :] = -Vt[k, :]
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    D = np.diag([1.0, 1.0, d])
    return Vt.T @ D @ U.T


def _check_alignable(rest: np.ndarray):
    centered = rest - rest.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[0] == 0 or s[1] <= 1e-12 * s[0]:
        raise AlignmentError("rest pose is collinear; rigid alignment is undefined")


def feature_transform(mesh: Mesh) -> np.ndarray:
    """Rigid-aligned displacement field, flattened to shape (3*V,).

    The deformed vertices are aligned to the rest pose by the optimal
    rotation + translation before the offsets are taken, so any rigid motion
    of the input leaves the output unchanged.
    """
    if len(mesh.vertices) != len(mesh.rest_vertices):
        raise MeshError("deformed/rest vertex count mismatch")
    _check_alignable(mesh.rest_vertices)
    rest = mesh.rest_vertices
    verts = mesh.vertices
    rest_c = rest.mean(axis=0)
    vert_c = verts.mean(axis=0)
    R = _kabsch_rotation(verts - vert_c, rest - rest_c)
    aligned = (verts - vert_c) @ R.T + rest_c
    return (aligned - rest).ravel()


def feature_inverse(features: np.ndarray, rest: Mesh) -> Mesh:
    """Rebuild a mesh in the rest pose's frame from a displacement field."""
    features = np.asarray(features, dtype=np.float64).ravel()
    if features.size != 3 * rest.n_vertices:
        raise MeshError(
            f"feature length {features.size} != 3*|V| = {3 * rest.n_vertices}"
        )
    verts = rest.rest_vertices + features.reshape(-1, 3)
    return Mesh(verts, rest.triangles, rest.rest_vertices)


def canonicalize_features(features: np.ndarray, rest: Mesh) -> np.ndarray:
    """Project a raw displacement field into the canonical aligned frame.

    feature_transform(feature_inverse(.)) is idempotent; one application maps
    any displacement field onto the subspace where the round trip is exact.
    """
    return feature_transform(feature_inverse(features, rest))


# -- OBJ subset --------------------------------------------------------------

def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an ASCII OBJ restricted to `v` and `f` triangle lines.

    Anything else (comments included) is rejected with the offending line
    number; faces must be plain 1-based vertex indices, three per face.
    """
    vertices = []
    faces = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) != 4:
                    raise MeshIOError(f"{path}:{lineno}: vertex line needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in parts[1:]])
                except ValueError:
                    raise MeshIOError(f"{path}:{lineno}: bad vertex coordinate") from None
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshIOError(f"{path}:{lineno}: only triangles are supported")
                idx = []
                for tok in parts[1:]:
                    if "/" in tok:
                        raise MeshIOError(
                            f"{path}:{lineno}: texture/normal indices are not supported"
                        )
                    try:
                        idx.append(int(tok))
                    except ValueError:
                        raise MeshIOError(f"{path}:{lineno}: bad face index") from None
                if any(i < 1 for i in idx):
                    raise MeshIOError(f"{path}:{lineno}: face indices are 1-based")
                faces.append([i - 1 for i in idx])
            else:
                raise MeshIOError(f"{path}:{lineno}: unsupported OBJ line {parts[0]!r}")
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if tris.size and tris.max() >= len(verts):
        raise MeshIOError(f"{path}: face index exceeds vertex count")
    return verts, tris


def write_obj(path, vertices: np.ndarray, triangles: np.ndarray):
    with open(path, "w", encoding="ascii") as fh:
        for v in np.asarray(vertices, dtype=np.float64):
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in np.asarray(triangles, dtype=np.int64):
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_mesh(deformed_path, rest_path) -> Mesh:
    """Assemble a Mesh from a deformed OBJ and the dataset's rest-pose OBJ."""
    verts, tris = read_obj(deformed_path)
    rest_verts, rest_tris = read_obj(rest_path)
    if not np.array_equal(tris, rest_tris):
        raise MeshIOError("deformed and rest OBJ disagree on connectivity")
    return Mesh(verts, tris, rest_verts)


# -- feature vector binary format --------------------------------------------
# 16-byte header: magic (4s), format version (uint32 LE), length (uint64 LE),
# then `length` little-endian float64 values.

def save_features(path, features: np.ndarray):
    features = np.asarray(features, dtype=np.float64).ravel()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", MAGIC, FORMAT_VERSION, features.size))
        fh.write(features.astype("<f8").tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise MeshIOError(f"{path}: truncated feature header")
        magic, version, length = struct.unpack("<4sIQ", header)
        if magic != MAGIC:
            raise MeshIOError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise MeshIOError(f"{path}: unsupported version {version}")
        data = fh.read(8 * length)
        if len(data) != 8 * length:
            raise MeshIOError(f"{path}: truncated feature payload")
        return np.frombuffer(data, dtype="<f8").astype(np.float64)
