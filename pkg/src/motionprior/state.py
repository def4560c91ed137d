"""Motion state layout and the yaw/shift canonicalization used by the model.

A state packs 207 scalars describing one frame at 30 Hz:

    root position r (3), root velocity r_dot (3),
    root orientation phi as axis-angle (3), root angular velocity phi_dot (3),
    joint rotations theta (21 x 3, axis-angle, one per non-root joint),
    joint positions (22 x 3) and joint velocities (22 x 3).

All heavy code paths work on flat ``(..., 207)`` double tensors; the -
``MotionState`` wrapper exists for readable field access at the edges.
"""

from dataclasses import dataclass

import torch

from .transforms import as_tensor, axis_angle_to_matrix, rotate_axis_angle, yaw_matrix

STATE_DIM = 207
NUM_JOINTS = 22
NUM_BODY_ROTS = NUM_JOINTS - 1

ROOT_POS = slice(0, 3)
ROOT_VEL = slice(3, 6)
ROOT_ORIENT = slice(6, 9)
ROOT_ANG_VEL = slice(9, 12)
JOINT_ROTS = slice(12, 75)
JOINT_POS = slice(75, 141)
JOINT_VEL = slice(141, 207)

# Minimal 138-dim vector scored by the initial-state mixture model:
# [r_dot, phi_dot, joint positions, joint velocities] in the canonical frame.
INIT_VECTOR_DIM = 138

# Below this horizontal norm of the body-right axis the heading is undefined.
_DEGENERATE_TOL = 1e-8


@dataclass
class MotionState:
    root_pos: torch.Tensor
    root_vel: torch.Tensor
    root_orient: torch.Tensor
    root_ang_vel: torch.Tensor
    joint_rots: torch.Tensor  # (21, 3)
    joint_pos: torch.Tensor  # (22, 3)
    joint_vel: torch.Tensor  # (22, 3)

    @classmethod
    def from_flat(cls, flat) -> "MotionState":
        flat = as_tensor(flat)
        if flat.shape[-1] != STATE_DIM:
            raise ValueError(f"expected {STATE_DIM} scalars, got {flat.shape[-1]}")
        return cls(
            root_pos=flat[..., ROOT_POS],
            root_vel=flat[..., ROOT_VEL],
            root_orient=flat[..., ROOT_ORIENT],
            root_ang_vel=flat[..., ROOT_ANG_VEL],
            joint_rots=flat[..., JOINT_ROTS].reshape(*flat.shape[:-1], NUM_BODY_ROTS, 3),
            joint_pos=flat[..., JOINT_POS].reshape(*flat.shape[:-1], NUM_JOINTS, 3),
            joint_vel=flat[..., JOINT_VEL].reshape(*flat.shape[:-1], NUM_JOINTS, 3),
        )

    def flat(self) -> torch.Tensor:
        lead = self.root_pos.shape[:-1]
        return torch.cat(
            [
                self.root_pos,
                self.root_vel,
                self.root_orient,
                self.root_ang_vel,
                self.joint_rots.reshape(*lead, -1),
                self.joint_pos.reshape(*lead, -1),
                self.joint_vel.reshape(*lead, -1),
            ],
            dim=-1,
        )


def pack_state(root_pos, root_vel, root_orient, root_ang_vel, joint_rots, joint_pos, joint_vel):
    return MotionState(
        as_tensor(root_pos),
        as_tensor(root_vel),
        as_tensor(root_orient),
        as_tensor(root_ang_vel),
        as_tensor(joint_rots),
        as_tensor(joint_pos),
        as_tensor(joint_vel),
    ).flat()


@dataclass
class CanonicalTransform:
    """Shift-then-yaw map p -> R_z(yaw) @ (p + [shift_xy, 0]).

    Chosen per reference state so its root lands on the z-axis and its
    body-right axis points along +x with zero y-component.
    """

    yaw: torch.Tensor  # (...,)
    shift_xy: torch.Tensor  # (..., 2)
    degenerate: torch.Tensor  # (...,) bool; body-right axis was near vertical

    def _shift3(self) -> torch.Tensor:
        return torch.cat([self.shift_xy, torch.zeros_like(self.shift_xy[..., :1])], dim=-1)

    def apply_point(self, p: torch.Tensor) -> torch.Tensor:
        """p: (..., 3) broadcastable against the transform's batch shape."""
        return torch.einsum("...ij,...j->...i", yaw_matrix(self.yaw), p + self._shift3())

    def apply_vector(self, v: torch.Tensor) -> torch.Tensor:
        return torch.einsum("...ij,...j->...i", yaw_matrix(self.yaw), v)

    def invert_point(self, p: torch.Tensor) -> torch.Tensor:
        back = torch.einsum("...ij,...j->...i", yaw_matrix(-self.yaw), p)
        return back - self._shift3()

    def invert_vector(self, v: torch.Tensor) -> torch.Tensor:
        return torch.einsum("...ij,...j->...i", yaw_matrix(-self.yaw), v)


def canonical_transform_for(state_flat: torch.Tensor) -> CanonicalTransform:
    """Transform putting ``state_flat``'s root at xy=0, body-right toward +x.

    The body-right axis is the root frame's +x column after applying the root
    orientation. When it is near vertical the yaw is left at zero and the
    degenerate flag set.
    """
    phi = state_flat[..., ROOT_ORIENT]
    right = axis_angle_to_matrix(phi)[..., :, 0]
    horiz = torch.sqrt(right[..., 0] ** 2 + right[..., 1] ** 2)
    degenerate = horiz < _DEGENERATE_TOL
    yaw = torch.where(
        degenerate,
        torch.zeros_like(horiz),
        -torch.atan2(right[..., 1], right[..., 0]),
    )
    shift_xy = -state_flat[..., 0:2]
    return CanonicalTransform(yaw=yaw, shift_xy=shift_xy, degenerate=degenerate)


def transform_state(state_flat: torch.Tensor, tf: CanonicalTransform) -> torch.Tensor:
    """Apply a yaw/shift transform to every frame-dependent field of a state."""
    state_flat = as_tensor(state_flat)
    lead = state_flat.shape[:-1]
    rot = yaw_matrix(tf.yaw)  # (..., 3, 3)
    shift = torch.cat([tf.shift_xy, torch.zeros_like(tf.shift_xy[..., :1])], dim=-1)

    def rot_pts(p):  # (..., n, 3)
        return torch.einsum("...ij,...nj->...ni", rot, p)

    r = (rot @ (state_flat[..., ROOT_POS] + shift).unsqueeze(-1)).squeeze(-1)
    r_dot = (rot @ state_flat[..., ROOT_VEL].unsqueeze(-1)).squeeze(-1)
    phi = rotate_axis_angle(tf.yaw, state_flat[..., ROOT_ORIENT])
    phi_dot = (rot @ state_flat[..., ROOT_ANG_VEL].unsqueeze(-1)).squeeze(-1)
    joints = rot_pts(state_flat[..., JOINT_POS].reshape(*lead, NUM_JOINTS, 3) + shift.unsqueeze(-2))
    joints_dot = rot_pts(state_flat[..., JOINT_VEL].reshape(*lead, NUM_JOINTS, 3))
    return torch.cat(
        [
            r,
            r_dot,
            phi,
            phi_dot,
            state_flat[..., JOINT_ROTS],
            joints.reshape(*lead, -1),
            joints_dot.reshape(*lead, -1),
        ],
        dim=-1,
    )


def untransform_state(state_flat: torch.Tensor, tf: CanonicalTransform) -> torch.Tensor:
    """Inverse of :func:`transform_state` for the same transform."""
    # p' = R(p + s)  =>  p = R^T(p' + s') with s' = -R s.
    inv = CanonicalTransform(
        yaw=-tf.yaw,
        shift_xy=-(yaw_matrix(tf.yaw)[..., :2, :2] @ tf.shift_xy.unsqueeze(-1)).squeeze(-1),
        degenerate=tf.degenerate,
    )
    return transform_state(state_flat, inv)


def canonicalize(state_flat: torch.Tensor, reference: torch.Tensor | None = None):
    """Canonicalize a state w.r.t. ``reference`` (itself when omitted).

    Returns (canonical_state, transform). Round trip with
    :func:`untransform_state` recovers the input to float precision.
    """
    state_flat = as_tensor(state_flat)
    tf = canonical_transform_for(state_flat if reference is None else as_tensor(reference))
    return transform_state(state_flat, tf), tf


def init_state_vector(canonical_flat: torch.Tensor) -> torch.Tensor:
    """138-dim minimal vector [r_dot, phi_dot, joints, joint velocities]."""
    return torch.cat(
        [
            canonical_flat[..., ROOT_VEL],
            canonical_flat[..., ROOT_ANG_VEL],
            canonical_flat[..., JOINT_POS],
            canonical_flat[..., JOINT_VEL],
        ],
        dim=-1,
    )
