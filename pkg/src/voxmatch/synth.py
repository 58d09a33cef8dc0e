"""Voxelized capsule models arranged in kinematic trees.

Each model is a tree of links. A link is a capsule (segment plus radius)
whose start point is a joint on its parent. Joint angles rotate the link,
and everything below it, about axes fixed in the parent's rest frame.
Model dimensions are in model units; ``sampling`` voxels per unit sets the
grid resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidPose
from .graph import VoxelSet

_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])
_Z = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Link:
    name: str
    parent: int | None
    start: tuple  # joint position in the rest pose
    direction: tuple  # unit rest direction
    length: float
    radius: float
    axes: tuple = ()  # one rotation axis per degree of freedom
    limits: tuple = ()  # (lo, hi) in degrees, one per axis


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float


@dataclass(frozen=True)
class GroundTruth:
    """Per-voxel identity that is stable across poses.

    ``part[i]`` is the link owning voxel ``i`` and ``arclength[i]`` its
    arc-length coordinate (voxel units) measured from the root along the tree.
    """

    part: np.ndarray
    arclength: np.ndarray
    part_names: tuple
    part_parents: tuple

    def labels(self):
        """Discrete labels ``(part, floor(arclength))`` as a set."""
        return set(zip(self.part.tolist(), np.floor(self.arclength).astype(int).tolist()))

    def compatible(self, part_a, part_b):
        """True where two parts are identical or directly joined."""
        parents = np.array([-1 if p is None else p for p in self.part_parents])
        part_a = np.asarray(part_a)
        part_b = np.asarray(part_b)
        return (part_a == part_b) | (parents[part_a] == part_b) | (parents[part_b] == part_a)


@dataclass(frozen=True)
class SyntheticShape:
    voxels: VoxelSet
    ground_truth: GroundTruth
    pose_params: dict
    contacts: list = field(default_factory=list)
    capsules: tuple = ()


class ArticulatedModel:
    """A kinematic tree of capsules with named poses."""

    def __init__(self, name, links, poses):
        self.name = name
        self.links = tuple(links)
        self.poses = dict(poses)
        self._offsets = self._arc_offsets()

    def _arc_offsets(self):
        offsets = []
        for link in self.links:
            if link.parent is None:
                offsets.append(0.0)
                continue
            parent = self.links[link.parent]
            rel = np.asarray(link.start) - np.asarray(parent.start)
            along = float(np.clip(rel @ np.asarray(parent.direction), 0.0, parent.length))
            offsets.append(offsets[link.parent] + along)
        return np.array(offsets)

    def tree_distance(self, i, j):
        def ancestors(k):
            chain = [k]
            while self.links[chain[-1]].parent is not None:
                chain.append(self.links[chain[-1]].parent)
            return chain

        ai, aj = ancestors(i), ancestors(j)
        common = next(a for a in ai if a in aj)
        return ai.index(common) + aj.index(common)

    def validate(self, pose_params):
        unknown = set(pose_params) - {link.name for link in self.links}
        if unknown:
            raise InvalidPose(f"unknown joint(s) for {self.name}: {sorted(unknown)}")
        out = {}
        for link in self.links:
            angles = tuple(float(a) for a in np.atleast_1d(pose_params.get(link.name, ())))
            if not angles:
                angles = (0.0,) * len(link.axes)
            if len(angles) != len(link.axes):
                raise InvalidPose(
                    f"joint {link.name!r} takes {len(link.axes)} angle(s), got {len(angles)}"
                )
            for ang, (lo, hi) in zip(angles, link.limits):
                if not lo <= ang <= hi:
                    raise InvalidPose(f"joint {link.name!r} angle {ang} outside [{lo}, {hi}]")
            if angles:
                out[link.name] = angles
        return out

    def capsules(self, pose_params):
        """World-space capsules for a validated pose (model units)."""
        pose = self.validate(pose_params)
        rots, starts, caps = [], [], []
        for link in self.links:
            local = np.eye(3)
            for axis, ang in zip(link.axes, pose.get(link.name, ())):
                local = local @ _rotation(np.asarray(axis, float), np.radians(ang))
            start_rest = np.asarray(link.start, float)
            if link.parent is None:
                rot = local
                start = start_rest
            else:
                prot = rots[link.parent]
                pstart_rest = np.asarray(self.links[link.parent].start, float)
                rot = prot @ local
                start = starts[link.parent] + prot @ (start_rest - pstart_rest)
            end = start + rot @ (np.asarray(link.direction, float) * link.length)
            rots.append(rot)
            starts.append(start)
            caps.append(Capsule(start, end, link.radius))
        return caps


def _rotation(axis, angle):
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) * c + s * k + (1 - c) * np.outer(axis, axis)


def _segment_params(points, a, b):
    ab = b - a
    t = ((points - a) @ ab) / (ab @ ab)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return t, np.linalg.norm(points - closest, axis=1)


def _segment_distance(p1, q1, p2, q2):
    # closest points between two segments, clamped parametric solve
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    c, b = d1 @ r, d1 @ d2
    denom = a * e - b * b
    s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 1e-12 else 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
    elif t > 1.0:
        t, s = 1.0, np.clip((b - c) / a, 0.0, 1.0)
    return float(np.linalg.norm((p1 + d1 * s) - (p2 + d2 * t)))


def chain_model():
    """Three collinear links of decreasing length and radius, bending about z."""
    lengths, radii = (7.0, 5.5, 4.5), (0.9, 0.75, 0.6)
    links, x = [], 0.0
    for i, (length, radius) in enumerate(zip(lengths, radii)):
        links.append(
            Link(
                name=f"link{i}",
                parent=None if i == 0 else i - 1,
                start=(x, 0.0, 0.0),
                direction=tuple(_X),
                length=length,
                radius=radius,
                axes=() if i == 0 else (tuple(_Z),),
                limits=() if i == 0 else ((-150.0, 150.0),),
            )
        )
        x += length
    poses = {
        "straight": {},
        "bent": {"link1": 90.0},
        "zigzag": {"link1": 60.0, "link2": -60.0},
    }
    return ArticulatedModel("chain", links, poses)


def chain_branch_model(branch_length=5.0, branch_radius=0.5):
    """The chain with an extra thin branch sprouting from the middle of the first link."""
    base = chain_model()
    first = base.links[0]
    branch = Link(
        name="branch",
        parent=0,
        start=(first.length * 0.45, 0.0, 0.0),
        direction=tuple(_Y),
        length=branch_length,
        radius=branch_radius,
        axes=(tuple(_Z),),
        limits=((-80.0, 80.0),),
    )
    poses = {name: dict(p) for name, p in base.poses.items()}
    return ArticulatedModel("chain-branch", base.links + (branch,), poses)


def mannequin_model():
    """Torso, head, shoulder and hip bars, two-link arms and legs."""
    sw, hw = 2.8, 1.0  # half-widths of the shoulder and hip bars
    zs = 5.6
    down = tuple(-_Z)
    links = [
        Link("torso", None, (0, 0, 0), tuple(_Z), 6.0, 1.5),
        Link("head", 0, (0, 0, 6.0), tuple(_Z), 2.2, 1.0),
        Link("shoulders", 0, (-sw, 0, zs), tuple(_X), 2 * sw, 0.7),
        Link("hips", 0, (-hw, 0, 0), tuple(_X), 2 * hw, 0.8),
    ]
    arm_axes = (tuple(_X), tuple(_Y))
    arm_limits = ((-120.0, 120.0), (-120.0, 120.0))
    for side, x in (("l", -sw), ("r", sw)):
        links.append(Link(f"upper_arm_{side}", 2, (x, 0, zs), down, 2.6, 0.6, arm_axes, arm_limits))
        links.append(
            Link(f"forearm_{side}", len(links) - 1, (x, 0, zs - 2.6), down, 2.8, 0.5,
                 (tuple(_Y),), ((-150.0, 150.0),))
        )
    for side, x in (("l", -hw), ("r", hw)):
        links.append(Link(f"thigh_{side}", 3, (x, 0, 0), down, 3.2, 0.7, (tuple(_X),), ((-100.0, 100.0),)))
        links.append(
            Link(f"shin_{side}", len(links) - 1, (x, 0, -3.2), down, 3.2, 0.55,
                 (tuple(_X),), ((-150.0, 0.0),))
        )
    poses = {
        "apart": {"upper_arm_l": (0.0, 45.0), "upper_arm_r": (0.0, -45.0)},
        "hands-touching": {
            "upper_arm_l": (-90.0, 0.0),
            "upper_arm_r": (-90.0, 0.0),
            "forearm_l": -90.0,
            "forearm_r": 90.0,
        },
        "arms-raised": {"upper_arm_l": (0.0, 100.0), "upper_arm_r": (0.0, -100.0)},
    }
    return ArticulatedModel("mannequin-lite", links, poses)


def hand_model():
    """Palm with four two-segment fingers and a thumb."""
    links = [Link("palm", None, (0, 0, 0), tuple(_Z), 3.0, 1.4)]
    bases = (-1.2, -0.4, 0.4, 1.2)
    spread = (-14.0, -5.0, 5.0, 14.0)
    for i, (x, ang) in enumerate(zip(bases, spread)):
        d = _rotation(_Y, np.radians(ang)) @ _Z
        start = np.array([x, 0.0, 3.6])
        links.append(Link(f"finger{i}_a", 0, tuple(start), tuple(d), 1.7, 0.36,
                          (tuple(_X),), ((-10.0, 110.0),)))
        links.append(Link(f"finger{i}_b", len(links) - 1, tuple(start + 1.7 * d), tuple(d), 1.3, 0.32,
                          (tuple(_X),), ((-10.0, 120.0),)))
    d = _rotation(_Y, np.radians(-55.0)) @ _Z
    start = np.array([-1.4, 0.0, 1.0])
    links.append(Link("thumb_a", 0, tuple(start), tuple(d), 1.6, 0.42, (tuple(_X),), ((-10.0, 90.0),)))
    links.append(Link("thumb_b", len(links) - 1, tuple(start + 1.6 * d), tuple(d), 1.2, 0.36,
                      (tuple(_X),), ((-10.0, 90.0),)))
    poses = {
        "open": {},
        "curled": {"finger3_a": 95.0, "finger3_b": 110.0},
    }
    return ArticulatedModel("hand-lite", links, poses)


MODELS = {
    "chain": chain_model,
    "chain-branch": chain_branch_model,
    "mannequin-lite": mannequin_model,
    "hand-lite": hand_model,
}


def get_model(name):
    try:
        return MODELS[name]()
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


def voxelize(caps, sampling):
    """Integer grid points (voxel units) inside the union of capsules."""
    lo = np.min([np.minimum(c.a, c.b) - c.radius for c in caps], axis=0) * sampling
    hi = np.max([np.maximum(c.a, c.b) + c.radius for c in caps], axis=0) * sampling
    axes = [np.arange(np.floor(l) - 1, np.ceil(h) + 2) for l, h in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = grid / sampling
    inside = np.zeros(len(grid), dtype=bool)
    for c in caps:
        _, dist = _segment_params(pts, c.a, c.b)
        inside |= dist <= c.radius
    return grid[inside].astype(np.int64)


def self_contacts(model, caps, sampling, gap=1.0):
    """Capsule pairs more than two joints apart whose surfaces are within ``gap`` voxels."""
    out = []
    for i in range(len(caps)):
        for j in range(i + 1, len(caps)):
            if model.tree_distance(i, j) <= 2:
                continue
            d = _segment_distance(caps[i].a, caps[i].b, caps[j].a, caps[j].b)
            surface_gap = (d - caps[i].radius - caps[j].radius) * sampling
            if surface_gap < gap:
                out.append((model.links[i].name, model.links[j].name, float(surface_gap)))
    return out


def synth_articulated(model="chain", pose_params=None, sampling=4.0):
    """Voxelize an articulated model in a given pose.

    ``pose_params`` is either the name of a preset pose of the model or a
    mapping from joint (link) name to angle(s) in degrees.

    Raises
    ------
    InvalidPose
        If a joint is unknown, takes a different number of angles, or an
        angle lies outside the joint limits.
    """
    mdl = get_model(model) if isinstance(model, str) else model
    if pose_params is None:
        pose_params = {}
    if isinstance(pose_params, str):
        if pose_params not in mdl.poses:
            raise InvalidPose(f"unknown pose {pose_params!r} for {mdl.name}; choose from {sorted(mdl.poses)}")
        pose_params = mdl.poses[pose_params]
    if not sampling > 0:
        raise ValueError("sampling must be positive")
    pose = mdl.validate(pose_params)
    caps = mdl.capsules(pose)
    grid = voxelize(caps, sampling)
    pts = grid / sampling

    # owner = capsule with the deepest penetration
    depth = np.empty((len(caps), len(pts)))
    tpar = np.empty_like(depth)
    for k, c in enumerate(caps):
        t, dist = _segment_params(pts, c.a, c.b)
        depth[k] = dist - c.radius
        tpar[k] = t
    part = np.argmin(depth, axis=0)
    lengths = np.array([link.length for link in mdl.links])
    arclength = (mdl._offsets[part] + tpar[part, np.arange(len(pts))] * lengths[part]) * sampling

    truth = GroundTruth(
        part=part,
        arclength=arclength,
        part_names=tuple(link.name for link in mdl.links),
        part_parents=tuple(link.parent for link in mdl.links),
    )
    return SyntheticShape(
        voxels=VoxelSet(grid, resolution=1.0 / sampling),
        ground_truth=truth,
        pose_params=pose,
        contacts=self_contacts(mdl, caps, sampling),
        capsules=tuple(caps),
    )
