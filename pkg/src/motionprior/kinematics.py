"""Analytic 22-joint skeleton: forward kinematics, contacts, ground plane.

The skeleton is a fixed-topology kinematic tree loaded from a JSON file.
Shape is a 16-dim vector mapped linearly to per-bone log length scales, so
bone lengths stay positive for any shape. A set of 43 virtual surface
markers (fixed offsets in joint frames) stands in for a body surface.
"""

import hashlib
import json
import warnings
from dataclasses import dataclass
from importlib import resources

import torch

from .transforms import as_tensor, axis_angle_to_matrix

SHAPE_DIM = 16
NUM_MARKERS = 43
NUM_CONTACTS = 8

# Contact auto-annotation thresholds, 30 Hz convention: a joint is in
# contact when it moved < 0.5 cm over the last step and sits below 8 cm
# (4 cm for toes).
CONTACT_DISPLACEMENT = 0.005
CONTACT_HEIGHT = 0.08
CONTACT_HEIGHT_TOE = 0.04

FRAME_RATE = 30.0


@dataclass
class Skeleton:
    joint_names: list
    parents: list  # parents[j] < j, root has -1
    rest_offsets: torch.Tensor  # (22, 3) bone vectors in parent frames
    shape_basis: torch.Tensor  # (21, 16) -> per-bone log scale
    contact_joint_ids: list  # 8 joint indices, toes first
    contact_names: list
    marker_names: list
    marker_joints: list  # joint index each marker is rigidly attached to
    marker_offsets: torch.Tensor  # (43, 3) in the joint's frame

    def __post_init__(self):
        n = len(self.parents)
        if self.parents[0] != -1 or any(self.parents[j] >= j for j in range(1, n)):
            raise ValueError("joints must be topologically ordered with root first")
        if torch.any(self.rest_offsets[1:].norm(dim=-1) <= 0):
            raise ValueError("rest bone lengths must be positive")
        ids = list(self.contact_joint_ids)
        if len(set(ids)) != len(ids) or any(not 0 <= j < n for j in ids):
            raise ValueError("contact joints must be distinct valid indices")
        if any(not 0 <= j < n for j in self.marker_joints):
            raise ValueError("marker attachment joint out of range")
        if not bool(torch.isfinite(self.marker_offsets).all()):
            raise ValueError("marker offsets must be finite")

    @property
    def num_joints(self) -> int:
        return len(self.parents)

    def bone_scales(self, beta: torch.Tensor) -> torch.Tensor:
        """Per-bone length multipliers exp(basis @ beta). beta: (..., 16)."""
        return torch.exp(torch.einsum("bs,...s->...b", self.shape_basis, as_tensor(beta)))

    def toe_slots(self) -> list:
        return [i for i, name in enumerate(self.contact_names) if "toe" in name]

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "parents": [int(p) for p in self.parents],
            "rest_offsets": self.rest_offsets.tolist(),
            "shape_basis": self.shape_basis.tolist(),
            "contact_joints": [
                {"name": n, "joint": int(j)}
                for n, j in zip(self.contact_names, self.contact_joint_ids)
            ],
            "markers": [
                {"name": n, "joint": int(j), "offset": off}
                for n, j, off in zip(
                    self.marker_names, self.marker_joints, self.marker_offsets.tolist()
                )
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(
            joint_names=list(d["joint_names"]),
            parents=[int(p) for p in d["parents"]],
            rest_offsets=as_tensor(d["rest_offsets"]),
            shape_basis=as_tensor(d["shape_basis"]),
            contact_joint_ids=[int(c["joint"]) for c in d["contact_joints"]],
            contact_names=[c["name"] for c in d["contact_joints"]],
            marker_names=[m["name"] for m in d["markers"]],
            marker_joints=[int(m["joint"]) for m in d["markers"]],
            marker_offsets=as_tensor([m["offset"] for m in d["markers"]]),
        )


def skeleton_hash(skeleton: Skeleton) -> str:
    blob = json.dumps(skeleton.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_skeleton(skeleton: Skeleton, path) -> None:
    with open(path, "w") as f:
        json.dump(skeleton.to_dict(), f, indent=1)


def load_skeleton(path) -> Skeleton:
    with open(path) as f:
        return Skeleton.from_dict(json.load(f))


_DEFAULT = None


def default_skeleton() -> Skeleton:
    """The packaged 22-joint humanoid (cached)."""
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("motionprior").joinpath("assets/skeleton22.json").read_text()
        _DEFAULT = Skeleton.from_dict(json.loads(text))
    return _DEFAULT


def forward_kinematics(
    skeleton: Skeleton,
    root_pos: torch.Tensor,
    root_orient: torch.Tensor,
    joint_rots: torch.Tensor,
    beta: torch.Tensor,
    with_markers: bool = False,
):
    """World joint positions (..., 22, 3); optionally marker positions too.

    root_pos (..., 3), root_orient (..., 3) axis-angle, joint_rots (..., 21, 3),
    beta (..., 16) or (16,). Child position = parent position + parent chain
    rotation applied to the shape-scaled rest offset.
    """
    root_pos = as_tensor(root_pos)
    lead = root_pos.shape[:-1]
    rots = axis_angle_to_matrix(as_tensor(joint_rots))  # (..., 21, 3, 3)
    scales = skeleton.bone_scales(beta)
    if scales.dim() < len(lead) + 1:
        scales = scales.expand(*lead, -1)
    world_rot = [axis_angle_to_matrix(as_tensor(root_orient))]
    pos = [root_pos]
    offsets = skeleton.rest_offsets
    for j in range(1, skeleton.num_joints):
        parent = skeleton.parents[j]
        bone = offsets[j] * scales[..., j - 1 : j]
        pos.append(pos[parent] + (world_rot[parent] @ bone.unsqueeze(-1)).squeeze(-1))
        world_rot.append(world_rot[parent] @ rots[..., j - 1, :, :])
    joints = torch.stack(pos, dim=-2)
    if not with_markers:
        return joints
    wr = torch.stack(world_rot, dim=-3)  # (..., 22, 3, 3)
    mj = skeleton.marker_joints
    markers = joints[..., mj, :] + (
        wr[..., mj, :, :] @ skeleton.marker_offsets.unsqueeze(-1)
    ).squeeze(-1)
    return joints, markers


def fk_state_pose(skeleton: Skeleton, state_flat: torch.Tensor, beta, with_markers=False):
    """FK from the pose fields of flat state(s) (..., 207)."""
    from . import state as st

    lead = state_flat.shape[:-1]
    return forward_kinematics(
        skeleton,
        state_flat[..., st.ROOT_POS],
        state_flat[..., st.ROOT_ORIENT],
        state_flat[..., st.JOINT_ROTS].reshape(*lead, -1, 3),
        beta,
        with_markers=with_markers,
    )


def finite_difference_velocities(positions: torch.Tensor, frame_rate: float = FRAME_RATE):
    """Backward differences over the leading time axis; frame 0 copies frame 1.

    positions: (T, ...). A single-frame input yields zeros with a warning.
    """
    positions = as_tensor(positions)
    if positions.shape[0] < 2:
        warnings.warn("velocity from a single frame is zero", stacklevel=2)
        return torch.zeros_like(positions)
    vel = (positions[1:] - positions[:-1]) * frame_rate
    return torch.cat([vel[:1], vel], dim=0)


def annotate_contacts(
    joints: torch.Tensor, skeleton: Skeleton, frame_rate: float = FRAME_RATE
) -> torch.Tensor:
    """Binary contact labels (T, 8) for the skeleton's contact joints.

    A contact joint counts as planted when it moved less than 0.5 cm since
    the previous frame and sits below 8 cm (4 cm for toes) over ground z=0.
    Frame 0 copies frame 1.
    """
    joints = as_tensor(joints)
    ids = skeleton.contact_joint_ids
    pts = joints[:, ids, :]  # (T, 8, 3)
    if joints.shape[0] < 2:
        return torch.zeros(joints.shape[0], len(ids), dtype=joints.dtype)
    disp = (pts[1:] - pts[:-1]).norm(dim=-1)
    height = torch.full((len(ids),), CONTACT_HEIGHT, dtype=joints.dtype)
    height[skeleton.toe_slots()] = CONTACT_HEIGHT_TOE
    planted = (disp < CONTACT_DISPLACEMENT) & (pts[1:, :, 2] < height)
    labels = planted.to(joints.dtype)
    return torch.cat([labels[:1], labels], dim=0)


@dataclass
class GroundPlane:
    """Plane as a single 3-vector g = d * n with unit normal n, offset d.

    Points p on the plane satisfy n . p = d. The zero vector means a plane
    through the origin whose normal must be supplied at decomposition time.
    """

    g: torch.Tensor

    @classmethod
    def from_normal_offset(cls, normal, offset: float) -> "GroundPlane":
        n = as_tensor(normal)
        n = n / n.norm()
        return cls(g=n * offset)

    def decompose(self, up_hint=(0.0, 0.0, 1.0)):
        """Return (normal, offset) with the normal signed toward ``up_hint``.

        In a y-down camera frame pass up_hint=(0, -1, 0); the returned
        normal then has a negative y-component. Requires |g| > 0 to recover
        orientation; otherwise the hint itself is used with zero offset.
        """
        up = as_tensor(up_hint)
        norm = self.g.norm()
        if float(norm) == 0.0:
            return up / up.norm(), torch.zeros((), dtype=self.g.dtype)
        normal = self.g / norm
        offset = norm
        if float(normal @ up) < 0.0:
            normal = -normal
            offset = -offset
        return normal, offset

    def signed_height(self, points: torch.Tensor, up_hint=(0.0, 0.0, 1.0)) -> torch.Tensor:
        """n . p - d per point; positive on the up side."""
        normal, offset = self.decompose(up_hint)
        return torch.einsum("...i,i->...", as_tensor(points), normal) - offset
