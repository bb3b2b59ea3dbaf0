"""Synthetic deformable-mesh datasets: articulated capsule chains.

A family is a closed capsule tube along the x axis, divided into rigid
links hinged at interior joints.  Poses are joint (bend, azimuth) pairs;
vertices follow their link's accumulated rigid transform with a linear
two-influence blend across each joint.  Bending a joint far enough folds
the tube onto itself, so sampled poses straddle the self-collision
boundary -- which generation verifies with the exact oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom
from .mesh import Mesh, read_obj, validate_manifold, write_obj


class FamilyConfigError(ValueError):
    """Sampled poses never straddle the collision boundary."""


@dataclass
class PoseFamily:
    """Articulated capsule chain with an analytic pose->vertices map."""

    name: str
    rest_vertices: np.ndarray   # (V, 3)
    triangles: np.ndarray       # (T, 3)
    ranges: np.ndarray          # (P, 2) per-parameter sampling interval
    joint_x: np.ndarray         # (J,) joint positions along the rest axis
    blend_halfwidth: float

    @property
    def n_params(self) -> int:
        return len(self.ranges)

    def rest_mesh(self) -> Mesh:
        return Mesh(self.rest_vertices, self.triangles, self.rest_vertices)

    def skin(self, pose: np.ndarray) -> np.ndarray:
        """Pose the rest vertices; pose is (bend, azimuth) per joint, radians."""
        pose = np.asarray(pose, dtype=np.float64).ravel()
        if pose.size != self.n_params:
            raise ValueError(f"pose needs {self.n_params} parameters, got {pose.size}")
        v = self.rest_vertices
        x = v[:, 0]
        n_joints = len(self.joint_x)

        # accumulated rigid transform per link (link j spans joint j-1 .. j)
        rots = [np.eye(3)]
        offs = [np.zeros(3)]
        for j in range(n_joints):
            theta, phi = pose[2 * j], pose[2 * j + 1]
            axis = np.array([0.0, -np.sin(phi), np.cos(phi)])
            r_local = _axis_angle(axis, theta)
            pivot = np.array([self.joint_x[j], 0.0, 0.0])
            r_prev, t_prev = rots[-1], offs[-1]
            r_new = r_prev @ r_local
            t_new = r_prev @ (pivot - r_local @ pivot) + t_prev
            rots.append(r_new)
            offs.append(t_new)

        posed = v @ rots[0].T + offs[0]
        b = self.blend_halfwidth
        for j in range(n_joints):
            lo = self.joint_x[j] - b
            w = np.clip((x - lo) / (2.0 * b), 0.0, 1.0)[:, None]
            nxt = v @ rots[j + 1].T + offs[j + 1]
            posed = (1.0 - w) * posed + w * nxt
        return posed

    def posed_mesh(self, pose: np.ndarray) -> Mesh:
        return Mesh(self.skin(pose), self.triangles, self.rest_vertices)


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _capsule_tube(length: float, radius: float, n_mid: int, ring_verts: int, cap_rings: int):
    """Closed capsule along [0, length]: ring stations + two pole fans."""
    stations = []
    for j in range(1, cap_rings + 1):
        a = 0.5 * np.pi * j / cap_rings
        stations.append((-radius * np.cos(a), radius * np.sin(a)))
    for k in range(1, n_mid + 1):
        stations.append((length * k / (n_mid + 1), radius))
    for j in range(cap_rings, 0, -1):
        a = 0.5 * np.pi * j / cap_rings
        stations.append((length + radius * np.cos(a), radius * np.sin(a)))

    theta = 2.0 * np.pi * np.arange(ring_verts) / ring_verts
    verts = [np.array([-radius, 0.0, 0.0])]
    for sx, sr in stations:
        ring = np.column_stack(
            [np.full(ring_verts, sx), sr * np.cos(theta), sr * np.sin(theta)]
        )
        verts.append(ring)
    verts.append(np.array([length + radius, 0.0, 0.0]))
    vertices = np.vstack([verts[0][None, :]] + verts[1:-1] + [verts[-1][None, :]])

    def ring_idx(s, k):
        return 1 + s * ring_verts + k

    tris = []
    m = ring_verts
    for k in range(m):  # start cap fan
        tris.append((0, ring_idx(0, (k + 1) % m), ring_idx(0, k)))
    for s in range(len(stations) - 1):
        for k in range(m):
            a, b_ = ring_idx(s, k), ring_idx(s, (k + 1) % m)
            c, d = ring_idx(s + 1, k), ring_idx(s + 1, (k + 1) % m)
            tris.append((a, b_, d))
            tris.append((a, d, c))
    last = len(vertices) - 1
    s = len(stations) - 1
    for k in range(m):  # end cap fan
        tris.append((last, ring_idx(s, k), ring_idx(s, (k + 1) % m)))
    return vertices, np.asarray(tris, dtype=np.int64)


def capsule_chain(
    n_links: int = 2,
    link_length: float = 1.0,
    radius: float = 0.22,
    rings_per_link: int = 5,
    ring_verts: int = 10,
    cap_rings: int = 3,
    blend_halfwidth: float = 0.28,
    max_bend: float = 2.9,
    name: str | None = None,
) -> PoseFamily:
    """Chain of ``n_links`` capsule segments; 2 pose parameters per joint."""
    if n_links < 2:
        raise ValueError("a chain needs at least 2 links")
    length = n_links * link_length
    verts, tris = _capsule_tube(
        length, radius, n_mid=n_links * rings_per_link, ring_verts=ring_verts, cap_rings=cap_rings
    )
    joints = link_length * np.arange(1, n_links)
    ranges = np.tile([[0.0, max_bend], [-np.pi, np.pi]], (n_links - 1, 1))
    return PoseFamily(
        name=name or f"capsule_chain_{n_links}",
        rest_vertices=verts,
        triangles=tris,
        ranges=ranges,
        joint_x=joints,
        blend_halfwidth=blend_halfwidth,
    )


def two_link_arm(**kwargs) -> PoseFamily:
    """Default desk-scale family: one elbow, bend + azimuth."""
    kwargs.setdefault("name", "two_link_arm")
    return capsule_chain(n_links=2, **kwargs)


FAMILIES = {
    "two_link_arm": two_link_arm,
    "capsule_chain_3": lambda **kw: capsule_chain(n_links=3, name="capsule_chain_3", **kw),
    "capsule_chain_4": lambda **kw: capsule_chain(n_links=4, name="capsule_chain_4", **kw),
}


def make_family(name: str, **kwargs) -> PoseFamily:
    if name not in FAMILIES:
        raise FamilyConfigError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}")
    return FAMILIES[name](**kwargs)


@dataclass
class GenerationReport:
    family: str
    seed: int
    poses: np.ndarray     # (N, P)
    labels: np.ndarray    # (N,) oracle collision labels
    collision_free_fraction: float


def synth_dataset(family: PoseFamily, n: int, seed: int) -> tuple[list, GenerationReport]:
    """Sample N poses uniformly in the family ranges and label them exactly.

    The emitted dataset must straddle the collision boundary; a family whose
    samples all land on one side is a configuration error.
    """
    report_topology = validate_manifold(family.rest_mesh())
    if not report_topology.is_valid:
        raise FamilyConfigError(f"family {family.name} rest mesh is not manifold")

    rng = np.random.default_rng(seed)
    lo, hi = family.ranges[:, 0], family.ranges[:, 1]
    poses = rng.uniform(lo, hi, size=(n, family.n_params)) if n else np.zeros((0, family.n_params))

    meshes = []
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        m = family.posed_mesh(poses[i])
        labels[i] = geom.collision_label(m, geom.build_bvh(m))
        meshes.append(m)
    frac = float((labels == 0).mean()) if n else 1.0
    if n > 0 and labels.max(initial=0) == 0:
        raise FamilyConfigError(
            f"family {family.name}: none of {n} sampled poses self-collides; "
            "widen the joint ranges"
        )
    if n > 0 and labels.min(initial=1) == 1:
        raise FamilyConfigError(
            f"family {family.name}: every sampled pose self-collides; "
            "narrow the joint ranges"
        )
    return meshes, GenerationReport(
        family=family.name, seed=seed, poses=poses, labels=labels,
        collision_free_fraction=frac,
    )


def collision_free_meshes(meshes: list, report: GenerationReport) -> list:
    """Training subset for the autoencoder: collision-free poses only."""
    return [m for m, lab in zip(meshes, report.labels) if lab == 0]


# -- dataset directory layout: rest.obj, pose_%05d.obj, manifest.json --------

def write_dataset(out_dir, family: PoseFamily, meshes: list, report: GenerationReport):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_obj(out / "rest.obj", family.rest_vertices, family.triangles)
    for i, m in enumerate(meshes):
        write_obj(out / f"pose_{i:05d}.obj", m.vertices, m.triangles)
    manifest = {
        "family": report.family,
        "seed": report.seed,
        "n": len(meshes),
        "collision_free_fraction": report.collision_free_fraction,
        "labels": report.labels.tolist(),
        "poses": report.poses.tolist(),
        "ranges": family.ranges.tolist(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(data_dir) -> tuple[list, dict]:
    data = Path(data_dir)
    manifest = json.loads((data / "manifest.json").read_text())
    rest_v, rest_t = read_obj(data / "rest.obj")
    meshes = []
    for i in range(manifest["n"]):
        v, t = read_obj(data / f"pose_{i:05d}.obj")
        if not np.array_equal(t, rest_t):
            raise FamilyConfigError(f"pose_{i:05d}.obj disagrees with rest connectivity")
        meshes.append(Mesh(v, t, rest_v))
    return meshes, manifest
