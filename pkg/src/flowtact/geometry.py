"""Point-cloud geometry and forward kinematics of keypoint-carrying chains.

Point clouds are plain ``(N, 3)`` float arrays in meters; flow fields are
``(N, 3)`` displacement arrays aligned row-wise with a source cloud. All
functions here are pure and numpy-only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-9
_AXIS_TOL = 1e-9


def as_cloud(points) -> np.ndarray:
    """Validate and return an (N, 3) float64 point cloud."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"point cloud must be (N, 3), got {p.shape}")
    if p.shape[0] < 1:
        raise ValueError("point cloud must contain at least one point")
    if not np.all(np.isfinite(p)):
        raise ValueError("point cloud contains non-finite coordinates")
    return p


def as_flow(displacements, n_source: int) -> np.ndarray:
    """Validate an (N, 3) flow field aligned with a cloud of ``n_source`` rows."""
    f = np.asarray(displacements, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != 3:
        raise ValueError(f"flow field must be (N, 3), got {f.shape}")
    if f.shape[0] != n_source:
        raise ValueError(f"flow rows {f.shape[0]} != source cloud rows {n_source}")
    if not np.all(np.isfinite(f)):
        raise ValueError("flow field contains non-finite entries")
    return f


def chamfer_distance(a, b) -> float:
    """Symmetric chamfer distance: mean squared nearest-neighbor distance
    from a to b plus the same from b to a.
    """
    a = as_cloud(a)
    b = as_cloud(b)
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def crop_to_box(points, lo, hi) -> np.ndarray:
    """Keep points inside the closed axis-aligned box [lo, hi]."""
    p = as_cloud(points)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    keep = np.all((p >= lo) & (p <= hi), axis=1)
    return p[keep]


def farthest_point_downsample(points, target_count: int, seed: int) -> np.ndarray:
    """Seeded farthest-point sampling down to ``target_count`` points.

    The first point is a seeded uniform draw; every following point
    maximizes its minimum distance to the already selected set. Returns the
    input unchanged when it is already small enough. Output points are a
    subset of the input (no interpolation).
    """
    p = as_cloud(points)
    if target_count < 1:
        raise ValueError(f"target_count must be >= 1, got {target_count}")
    n = p.shape[0]
    if n <= target_count:
        return p
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = np.empty(target_count, dtype=np.intp)
    chosen[0] = rng.integers(n)
    min_d2 = np.sum((p - p[chosen[0]]) ** 2, axis=1)
    for i in range(1, target_count):
        idx = int(np.argmax(min_d2))
        chosen[i] = idx
        min_d2 = np.minimum(min_d2, np.sum((p - p[idx]) ** 2, axis=1))
    return p[chosen]


def apply_flow(points, flow) -> np.ndarray:
    """Advect a cloud by a row-aligned flow field."""
    p = as_cloud(points)
    f = as_flow(flow, p.shape[0])
    return p + f


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid transform: 3x3 rotation plus translation, both in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation matrix must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self applied after other's frame: world = self * other (parent -> child)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = pts @ self.rotation.T + self.translation
        return out[0] if np.asarray(points).ndim == 1 else out


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis and angle in radians."""
    a = np.asarray(axis, dtype=np.float64)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def capsule_outline_length(x0: float, x1: float, radius: float) -> float:
    return 2.0 * (x1 - x0) + 2.0 * np.pi * radius


def capsule_outline_point(arc: float, x0: float, x1: float, radius: float) -> np.ndarray:
    """Point on the planar capsule outline (segment [x0, x1] on the x axis,
    radius around it) at arc length ``arc`` from the top-left corner, walking
    clockwise: top edge, far cap, bottom edge, near cap.
    """
    span = x1 - x0
    perim = capsule_outline_length(x0, x1, radius)
    u = float(arc) % perim
    if u < span:
        return np.array([x0 + u, radius])
    if u < span + np.pi * radius:
        alpha = np.pi / 2 - (u - span) / radius
        return np.array([x1 + radius * np.cos(alpha), radius * np.sin(alpha)])
    if u < 2 * span + np.pi * radius:
        return np.array([x1 - (u - span - np.pi * radius), -radius])
    alpha = -np.pi / 2 - (u - 2 * span - np.pi * radius) / radius
    return np.array([x0 + radius * np.cos(alpha), radius * np.sin(alpha)])


@dataclass(frozen=True)
class Link:
    """One chain link: parent index, rest transform, joint axis, joint type."""

    parent: int
    rest: RigidTransform
    axis: np.ndarray
    joint_type: str  # "revolute" | "fixed"

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64)
        if a.shape != (3,):
            raise ValueError("joint axis must be a 3-vector")
        if self.joint_type not in ("revolute", "fixed"):
            raise ValueError(f"unknown joint type {self.joint_type!r}")
        if abs(np.linalg.norm(a) - 1.0) > _AXIS_TOL:
            raise ValueError("joint axis must have unit norm")
        object.__setattr__(self, "axis", a)


@dataclass(frozen=True)
class KinematicChain:
    """Topologically ordered list of links; parent index -1 means world."""

    links: tuple[Link, ...]

    def __post_init__(self):
        links = tuple(self.links)
        for i, link in enumerate(links):
            if not -1 <= link.parent < i:
                raise ValueError(f"link {i} has parent {link.parent}; need parent < index")
        object.__setattr__(self, "links", links)

    @property
    def n_revolute(self) -> int:
        return sum(1 for l in self.links if l.joint_type == "revolute")


@dataclass(frozen=True)
class KeypointLayout:
    """Contact keypoints: per-entry link index and link-local offset in meters."""

    link_index: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        li = np.asarray(self.link_index, dtype=np.intp)
        off = np.asarray(self.offsets, dtype=np.float64)
        if li.ndim != 1 or off.shape != (li.shape[0], 3):
            raise ValueError("layout needs link_index (N,) and offsets (N, 3)")
        if li.shape[0] < 1:
            raise ValueError("layout must contain at least one keypoint")
        object.__setattr__(self, "link_index", li)
        object.__setattr__(self, "offsets", off)

    def __len__(self) -> int:
        return int(self.link_index.shape[0])

    def validate_for(self, chain: KinematicChain) -> None:
        if self.link_index.min() < 0 or self.link_index.max() >= len(chain.links):
            raise ValueError("layout references link indices outside the chain")


def link_transforms(chain: KinematicChain, joint_positions) -> list[RigidTransform]:
    """World transform of every link for the given revolute joint angles.

    Rest transforms compose parent-to-child in topological order; each
    revolute link additionally rotates about its own axis by its angle.
    """
    q = np.asarray(joint_positions, dtype=np.float64)
    if q.shape != (chain.n_revolute,):
        raise ValueError(f"expected {chain.n_revolute} joint positions, got {q.shape}")
    out: list[RigidTransform] = []
    qi = 0
    for link in chain.links:
        parent_tf = RigidTransform.identity() if link.parent < 0 else out[link.parent]
        tf = parent_tf.compose(link.rest)
        if link.joint_type == "revolute":
            joint = RigidTransform(rotation_about_axis(link.axis, q[qi]), np.zeros(3))
            tf = tf.compose(joint)
            qi += 1
        out.append(tf)
    return out


def keypoint_positions(chain: KinematicChain, layout: KeypointLayout, joint_positions) -> np.ndarray:
    """World position of every layout keypoint at the given joint angles."""
    layout.validate_for(chain)
    tfs = link_transforms(chain, joint_positions)
    pos = np.empty((len(layout), 3))
    for i in range(len(layout)):
        pos[i] = tfs[layout.link_index[i]].apply(layout.offsets[i])
    return pos


def chain_to_dict(chain: KinematicChain, layout: KeypointLayout | None = None) -> dict:
    doc = {
        "links": [
            {
                "parent": int(l.parent),
                "rest_rotation": [float(v) for v in l.rest.rotation.reshape(-1)],
                "rest_translation": [float(v) for v in l.rest.translation],
                "axis": [float(v) for v in l.axis],
                "type": l.joint_type,
            }
            for l in chain.links
        ]
    }
    if layout is not None:
        doc["keypoints"] = [
            {"link": int(layout.link_index[i]), "offset": [float(v) for v in layout.offsets[i]]}
            for i in range(len(layout))
        ]
    return doc


def chain_from_dict(doc: dict) -> tuple[KinematicChain, KeypointLayout | None]:
    links = tuple(
        Link(
            parent=int(entry["parent"]),
            rest=RigidTransform(
                np.asarray(entry["rest_rotation"], dtype=np.float64).reshape(3, 3),
                np.asarray(entry["rest_translation"], dtype=np.float64),
            ),
            axis=np.asarray(entry["axis"], dtype=np.float64),
            joint_type=entry["type"],
        )
        for entry in doc["links"]
    )
    chain = KinematicChain(links)
    layout = None
    if "keypoints" in doc:
        layout = KeypointLayout(
            link_index=np.array([kp["link"] for kp in doc["keypoints"]], dtype=np.intp),
            offsets=np.array([kp["offset"] for kp in doc["keypoints"]], dtype=np.float64),
        )
        layout.validate_for(chain)
    return chain, layout


def save_chain(path, chain: KinematicChain, layout: KeypointLayout | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(chain_to_dict(chain, layout), fh, indent=1, sort_keys=True)


def load_chain(path) -> tuple[KinematicChain, KeypointLayout | None]:
    with open(path) as fh:
        return chain_from_dict(json.load(fh))
