"""MAP optimization fitting motion, shape, and ground to observations.

The optimizer recovers an initial state, a latent transition sequence, a
ground plane, and shape coefficients whose model rollout explains noisy or
partial observations. Fitting runs inside an internal frame derived
equivariantly from the observations, so problems that differ by a rigid
yaw+translation produce identically transformed results; inputs are
quantized to float32 inside that frame to make the internal problem
bit-stable. The internal frame also lifts the world so the ground plane
sits at offset 1 m, keeping the plane vector g = d*n away from the
degenerate zero vector.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import state as st
from .data import MotionClip, load_clip, save_clip
from .diffcore import lbfgs_minimize, torch_diff_function
from .gmm import gmm_log_likelihood
from .kinematics import (
    FRAME_RATE,
    SHAPE_DIM,
    Skeleton,
    default_skeleton,
    finite_difference_velocities,
    fk_state_pose,
    forward_kinematics,
    skeleton_hash,
)
from .model import LATENT_DIM, RolloutDivergenceError
from .transforms import as_tensor, axis_angle_to_matrix, matrix_to_axis_angle, yaw_matrix

GM_SIGMA = 100.0
BISQUARE_KAPPA = 4.6851
MAD_SCALE = 1.4826  # consistency factor making MAD estimate a Gaussian sigma
CONTACT_HEIGHT_TOL = 0.08  # m; contact joints may float this far off the floor
CONF_CUTOFF = 0.3  # 2D keypoints below this confidence are treated as unseen
X0_DIM = 141  # state without the 66 regressed joint positions

VARIANTS = ("joints3d", "keypoints3d", "joints2d", "pointcloud")


# ---------------------------------------------------------------------------
# robustifiers
# ---------------------------------------------------------------------------


def geman_mcclure(r: torch.Tensor, sigma: float = GM_SIGMA) -> torch.Tensor:
    """sigma^2 r^2 / (sigma^2 + r^2); saturates at sigma^2 for huge residuals."""
    r2 = r**2
    s2 = sigma * sigma
    return s2 * r2 / (s2 + r2)


def bisquare_weight(rhat: torch.Tensor, kappa: float = BISQUARE_KAPPA) -> torch.Tensor:
    """(1 - (rhat/kappa)^2)^2 inside |rhat| < kappa, zero outside."""
    rhat = as_tensor(rhat)
    inside = rhat.abs() < kappa
    core = (1.0 - (rhat / kappa) ** 2) ** 2
    return torch.where(inside, core, torch.zeros_like(core))


def chamfer_weights(residuals: torch.Tensor, kappa: float = BISQUARE_KAPPA) -> torch.Tensor:
    """Bisquare weights for raw residuals, MAD-normalized, detached.

    The scale is 1.4826 * median(|r - median(r)|); weights are constants
    with respect to autograd so they act as a fixed reweighting.
    """
    r = residuals.detach()
    med = r.median()
    mad = (r - med).abs().median()
    scale = torch.clamp(MAD_SCALE * mad, min=1e-8)
    return bisquare_weight(r / scale, kappa)


# ---------------------------------------------------------------------------
# observations and camera
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    """A sequence of per-frame measurements of one motion.

    variant        one of joints3d | keypoints3d | joints2d | pointcloud
    values         (T+1, M, 3) for the 3D variants, (T+1, 22, 2) pixel
                   coordinates for joints2d, or a list of (N_t, 3) tensors
                   for pointcloud
    visibility     (T+1, M) bool for dense variants (default all visible)
    confidence     (T+1, 22) floats in [0,1] for joints2d; entries below
                   CONF_CUTOFF count as unseen
    """

    variant: str
    values: object
    visibility: torch.Tensor | None = None
    confidence: torch.Tensor | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown observation variant {self.variant!r}")
        if self.variant == "pointcloud":
            self.values = [as_tensor(v).reshape(-1, 3) for v in self.values]
        else:
            self.values = as_tensor(self.values)
            if self.values.dim() != 3:
                raise ValueError("dense observations must be (frames, count, dim)")
            if self.visibility is None:
                self.visibility = torch.ones(self.values.shape[:2], dtype=torch.bool)
            else:
                self.visibility = torch.as_tensor(self.visibility, dtype=torch.bool)
        if self.variant == "joints2d":
            if self.confidence is None:
                self.confidence = torch.ones(self.values.shape[:2], dtype=torch.float64)
            else:
                self.confidence = as_tensor(self.confidence)
            self.visibility = self.confidence >= CONF_CUTOFF
        self.validate()

    @property
    def num_frames(self) -> int:
        if self.variant == "pointcloud":
            return len(self.values)
        return int(self.values.shape[0])

    def visible_count(self, frame: int) -> int:
        if self.variant == "pointcloud":
            return int(self.values[frame].shape[0])
        return int(self.visibility[frame].sum())

    def validate(self) -> None:
        if self.num_frames < 2:
            raise ValueError("observations need at least two frames")
        if self.visible_count(0) < 1:
            raise ValueError("frame 0 must contain at least one visible datum")

    def slice_frames(self, count: int) -> "Observation":
        """First ``count`` frames as a new observation, bypassing validation."""
        out = object.__new__(Observation)
        out.variant = self.variant
        if self.variant == "pointcloud":
            out.values = self.values[:count]
            out.visibility = None
            out.confidence = None
        else:
            out.values = self.values[:count]
            out.visibility = self.visibility[:count]
            out.confidence = None if self.confidence is None else self.confidence[:count]
        return out


def joints3d_from_states(states: torch.Tensor, visibility=None) -> Observation:
    """Observation of the per-frame joint positions stored in states."""
    pts = as_tensor(states)[..., st.JOINT_POS].reshape(-1, st.NUM_JOINTS, 3)
    return Observation("joints3d", pts.clone(), visibility)


def keypoints3d_from_states(states, beta, skeleton, visibility=None) -> Observation:
    """Observation of the skeleton's virtual surface markers."""
    with torch.no_grad():
        _, markers = fk_state_pose(skeleton, as_tensor(states), beta, with_markers=True)
    return Observation("keypoints3d", markers.clone(), visibility)


def occlude_below(obs: Observation, height: float) -> Observation:
    """Drop every datum whose world z falls below ``height``."""
    if obs.variant not in ("joints3d", "keypoints3d"):
        raise ValueError("height occlusion applies to 3D point observations")
    vis = obs.visibility & (obs.values[..., 2] >= height)
    return Observation(obs.variant, obs.values.clone(), vis)


def add_noise(obs: Observation, sigma: float, rng: np.random.Generator) -> Observation:
    """Add isotropic Gaussian noise to every dense observation value."""
    if obs.variant == "pointcloud":
        vals = [v + as_tensor(rng.normal(0.0, sigma, size=tuple(v.shape))) for v in obs.values]
        return Observation("pointcloud", vals)
    noisy = obs.values + as_tensor(rng.normal(0.0, sigma, size=tuple(obs.values.shape)))
    return Observation(obs.variant, noisy, obs.visibility, obs.confidence)


@dataclass
class Camera:
    """Pinhole camera: p_cam = rot @ p_world + trans, pixels via fx,fy,cx,cy."""

    fx: float
    fy: float
    cx: float
    cy: float
    rot: torch.Tensor = field(default_factory=lambda: torch.eye(3, dtype=torch.float64))
    trans: torch.Tensor = field(default_factory=lambda: torch.zeros(3, dtype=torch.float64))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        self.rot = as_tensor(self.rot).reshape(3, 3)
        self.trans = as_tensor(self.trans).reshape(3)

    def project(self, points: torch.Tensor) -> torch.Tensor:
        p = torch.einsum("ij,...j->...i", self.rot, as_tensor(points)) + self.trans
        z = p[..., 2].clamp(min=1e-6)
        u = self.fx * p[..., 0] / z + self.cx
        v = self.fy * p[..., 1] / z + self.cy
        return torch.stack([u, v], dim=-1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rot": [float(v) for v in self.rot.reshape(-1)],
            "trans": [float(v) for v in self.trans],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            rot=torch.tensor(d["rot"], dtype=torch.float64).reshape(3, 3),
            trans=torch.tensor(d["trans"], dtype=torch.float64),
        )

    @classmethod
    def looking_at_origin(cls, position=(0.0, -3.5, 1.5)) -> "Camera":
        # z_cam points from the camera toward the world origin's column.
        pos = as_tensor(position)
        fwd = -pos / pos.norm()
        right = torch.linalg.cross(fwd, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))
        right = right / right.norm()
        down = torch.linalg.cross(fwd, right)
        rot = torch.stack([right, down, fwd])
        return cls(fx=800.0, fy=800.0, cx=320.0, cy=240.0, rot=rot, trans=-(rot @ pos))


# ---------------------------------------------------------------------------
# energy weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyWeights:
    lam_data: float = 1.0
    lam_shape: float = 0.015
    lam_cvae: float = 5e-4
    lam_init: float = 5e-4
    lam_c: float = 1.0
    lam_b: float = 10.0
    lam_cv: float = 1.0
    lam_ch: float = 1.0
    lam_gnd: float = 0.0
    lam_pose: float = 2e-4
    lam_smooth: float = 0.1

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    @classmethod
    def occluded_keypoints(cls) -> "EnergyWeights":
        return cls()

    @classmethod
    def noisy_joints(cls) -> "EnergyWeights":
        return cls(lam_cvae=1e-3, lam_init=1e-3, lam_smooth=10.0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyWeights":
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "EnergyWeights":
        presets = {
            "occluded_keypoints": cls.occluded_keypoints,
            "noisy_joints": cls.noisy_joints,
        }
        if name not in presets:
            raise ValueError(f"unknown weight preset {name!r}")
        return replace(presets[name](), **overrides)


# ---------------------------------------------------------------------------
# rigid transforms of whole states, ground-plane frame
# ---------------------------------------------------------------------------


def rigid_transform_state(state_flat: torch.Tensor, rot: torch.Tensor, trans: torch.Tensor):
    """Apply p -> rot @ p + trans to every frame-dependent field of a state.

    Positions translate and rotate, velocities rotate, the root orientation
    composes rot on the left, body joint angles are unchanged.
    """
    state_flat = as_tensor(state_flat)
    rot = as_tensor(rot)
    trans = as_tensor(trans)
    lead = state_flat.shape[:-1]

    def pts(x):
        return torch.einsum("ij,...nj->...ni", rot, x) + trans

    def vecs(x):
        return torch.einsum("ij,...nj->...ni", rot, x)

    r = torch.einsum("ij,...j->...i", rot, state_flat[..., st.ROOT_POS]) + trans
    r_dot = torch.einsum("ij,...j->...i", rot, state_flat[..., st.ROOT_VEL])
    phi = matrix_to_axis_angle(rot @ axis_angle_to_matrix(state_flat[..., st.ROOT_ORIENT]))
    phi_dot = torch.einsum("ij,...j->...i", rot, state_flat[..., st.ROOT_ANG_VEL])
    joints = pts(state_flat[..., st.JOINT_POS].reshape(*lead, st.NUM_JOINTS, 3))
    joints_dot = vecs(state_flat[..., st.JOINT_VEL].reshape(*lead, st.NUM_JOINTS, 3))
    return torch.cat(
        [r, r_dot, phi, phi_dot, state_flat[..., st.JOINT_ROTS],
         joints.reshape(*lead, -1), joints_dot.reshape(*lead, -1)],
        dim=-1,
    )


_Z_AXIS = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
_ONE = torch.ones((), dtype=torch.float64)


def _plane_normal_offset(g_vec: torch.Tensor):
    """Differentiable split of g = d*n into unit upward normal and offset.

    The softened norm keeps gradients finite at g = 0, where the plane
    falls back to z = 0.
    """
    g = as_tensor(g_vec)
    norm = torch.sqrt((g**2).sum() + 1e-30)
    n_raw = g / norm
    sign = torch.where(n_raw[2] >= 0, _ONE, -_ONE)
    small = norm < 1e-9
    n_hat = torch.where(small, _Z_AXIS, sign * n_raw)
    d = torch.where(small, torch.zeros_like(norm), sign * norm)
    return n_hat, d


def ground_basis(g_vec: torch.Tensor):
    """(rot, trans) with world = rot @ ground + trans; floor is z=0 in ground.

    The plane vector g = d*n decomposes into the unit upward normal and the
    signed offset; a vanishing g falls back to the z=0 plane.
    """
    n_hat, d = _plane_normal_offset(g_vec)
    # minimal rotation taking +z to the plane normal
    v = torch.stack([-n_hat[1], n_hat[0], torch.zeros_like(n_hat[0])])
    zero = torch.zeros_like(v[0])
    k = torch.stack(
        [
            torch.stack([zero, -v[2], v[1]]),
            torch.stack([v[2], zero, -v[0]]),
            torch.stack([-v[1], v[0], zero]),
        ]
    )
    denom = (1.0 + n_hat[2]).clamp(min=1e-9)
    rot = torch.eye(3, dtype=torch.float64) + k + (k @ k) / denom
    return rot, d * n_hat


def state_to_ground(state_flat: torch.Tensor, g_vec: torch.Tensor) -> torch.Tensor:
    rot, trans = ground_basis(g_vec)
    return rigid_transform_state(state_flat, rot.T, -(rot.T @ trans))


def state_from_ground(state_flat: torch.Tensor, g_vec: torch.Tensor) -> torch.Tensor:
    rot, trans = ground_basis(g_vec)
    return rigid_transform_state(state_flat, rot, trans)


def plane_heights(points: torch.Tensor, g_vec: torch.Tensor) -> torch.Tensor:
    """Signed height of points over the plane, differentiable in g."""
    n_hat, d = _plane_normal_offset(g_vec)
    return torch.einsum("...i,i->...", as_tensor(points), n_hat) - d


# ---------------------------------------------------------------------------
# fit variables
# ---------------------------------------------------------------------------


@dataclass
class FitVariables:
    """Free variables of the MAP problem.

    x0 is the initial state without its 66 regressed joint positions
    (those are reproduced by forward kinematics of the pose and shape);
    z_seq holds one latent per transition; g is the plane vector; beta the
    shape coefficients.
    """

    x0: torch.Tensor
    z_seq: torch.Tensor
    g: torch.Tensor
    beta: torch.Tensor

    def __post_init__(self):
        self.x0 = as_tensor(self.x0).reshape(X0_DIM)
        self.z_seq = as_tensor(self.z_seq).reshape(-1, LATENT_DIM)
        self.g = as_tensor(self.g).reshape(3)
        self.beta = as_tensor(self.beta).reshape(SHAPE_DIM)
        for t in (self.x0, self.z_seq, self.g, self.beta):
            if not bool(torch.isfinite(t).all()):
                raise ValueError("fit variables must be finite")

    def copy(self) -> "FitVariables":
        return FitVariables(
            self.x0.clone(), self.z_seq.clone(), self.g.clone(), self.beta.clone()
        )


def x0_from_state(state_flat: torch.Tensor) -> torch.Tensor:
    """Drop the regressed joint positions from a full 207-dim state."""
    state_flat = as_tensor(state_flat)
    return torch.cat([state_flat[..., : st.JOINT_POS.start],
                      state_flat[..., st.JOINT_VEL]], dim=-1)


def materialize_x0(x0: torch.Tensor, beta: torch.Tensor, skeleton: Skeleton) -> torch.Tensor:
    """Full 207-dim state with joint positions from forward kinematics."""
    x0 = as_tensor(x0)
    lead = x0.shape[:-1]
    joints = forward_kinematics(
        skeleton,
        x0[..., 0:3],
        x0[..., 6:9],
        x0[..., 12:75].reshape(*lead, st.NUM_BODY_ROTS, 3),
        beta,
    )
    return torch.cat(
        [x0[..., :75], joints.reshape(*lead, -1), x0[..., 75:]], dim=-1
    )


def variables_from_states(model, states: torch.Tensor, beta, g_vec=None) -> FitVariables:
    """Truth-style initialization: encoder-mean latents for each transition."""
    states = as_tensor(states)
    with torch.no_grad():
        z = model.encode(states[1:], states[:-1]).mu
    g = torch.zeros(3, dtype=torch.float64) if g_vec is None else as_tensor(g_vec)
    return FitVariables(x0_from_state(states[0]), z, g, as_tensor(beta))


# ---------------------------------------------------------------------------
# energy terms
# ---------------------------------------------------------------------------


def energy_motion(model, gmm, x0_state, z_seq, g_vec, weights: EnergyWeights):
    """Motion-prior energy of a rollout in the frame of the plane g.

    -lam_cvae * sum_t log N(z_t; prior(x_{t-1})) - lam_init * log p_gmm(x0).
    """
    x0_state = as_tensor(x0_state)
    z_seq = as_tensor(z_seq)
    e = torch.zeros((), dtype=torch.float64)
    if weights.lam_cvae == 0.0 and weights.lam_init == 0.0:
        return e
    x0_g = state_to_ground(x0_state, g_vec)
    if weights.lam_cvae > 0.0 and z_seq.shape[0] > 0:
        states, _ = model.rollout(x0_g, z_seq)
        prevs = torch.cat([x0_g.unsqueeze(0), states[:-1]], dim=0)
        priors = model.conditional_prior(prevs)
        e = e - weights.lam_cvae * priors.log_prob(z_seq).sum()
    if weights.lam_init > 0.0:
        canon, _ = st.canonicalize(x0_g)
        e = e - weights.lam_init * gmm_log_likelihood(gmm, st.init_state_vector(canon))
    return e


def _masked_sq_sum(pred: torch.Tensor, target: torch.Tensor, vis: torch.Tensor):
    diff = ((pred - target) ** 2).sum(dim=-1)
    return torch.where(vis, diff, torch.zeros_like(diff)).sum()


def energy_data(obs: Observation, camera, states, beta, skeleton, weights: EnergyWeights,
                pc_weights=None):
    """Observation fidelity over the first len(obs) frames of states.

    3D joints and keypoints use plain squared distances over visible
    entries; 2D joints use the Geman-McClure cost of the pixel residual
    norm weighted by confidence; point clouds use a one-way chamfer
    distance with detached bisquare weights. By default the bisquare
    weights are recomputed from the current residuals on every call in
    the usual reweighting fashion; passing ``pc_weights`` pins them, which
    makes the energy the fixed-weight function its gradient actually
    differentiates.
    """
    states = as_tensor(states)
    n = obs.num_frames
    if states.shape[0] != n:
        raise ValueError(f"states cover {states.shape[0]} frames, observations {n}")
    joints, markers = fk_state_pose(skeleton, states, beta, with_markers=True)
    if obs.variant == "joints3d":
        total = _masked_sq_sum(joints, obs.values, obs.visibility)
    elif obs.variant == "keypoints3d":
        if obs.values.shape[1] != markers.shape[1]:
            raise ValueError("keypoint count does not match the skeleton's markers")
        total = _masked_sq_sum(markers, obs.values, obs.visibility)
    elif obs.variant == "joints2d":
        px = camera.project(joints)
        rnorm = torch.linalg.vector_norm(px - obs.values, dim=-1)
        cost = obs.confidence * geman_mcclure(rnorm)
        total = torch.where(obs.visibility, cost, torch.zeros_like(cost)).sum()
    elif obs.variant == "pointcloud":
        body = torch.cat([joints, markers], dim=1)  # (n, 65, 3)
        mins = []
        for t in range(n):
            pts = obs.values[t]
            if pts.shape[0] == 0:
                continue
            d2 = torch.cdist(pts, body[t]) ** 2
            mins.append(d2.min(dim=1).values)
        if not mins:
            return torch.zeros((), dtype=torch.float64)
        min_d2 = torch.cat(mins)
        if pc_weights is None:
            w = chamfer_weights(torch.sqrt(min_d2.detach() + 1e-18))
        else:
            w = as_tensor(pc_weights)
        total = (w * min_d2).sum()
    else:
        raise ValueError(f"unknown observation variant {obs.variant!r}")
    return weights.lam_data * total


def energy_regularizers(states, contact_probs, skeleton, g_vec, beta, g_init_vec,
                        weights: EnergyWeights):
    """Skeleton consistency, contact plausibility, and ground/shape priors.

    E_skel ties the regressed joint positions to forward kinematics and
    keeps bone lengths of the regressed joints constant over time. E_env
    makes joints with high predicted contact probability stay put and stay
    near the floor (within CONTACT_HEIGHT_TOL of the plane). E_gnd and
    E_shape anchor the plane to its initialization and beta to zero.
    contact_probs has one row per transition, aligned with states[1:].
    """
    states = as_tensor(states)
    n = states.shape[0]
    lead_joints = states[..., st.JOINT_POS].reshape(n, st.NUM_JOINTS, 3)
    e = torch.zeros((), dtype=torch.float64)
    if weights.lam_c > 0.0 or weights.lam_cv > 0.0 or weights.lam_ch > 0.0:
        fk_joints = fk_state_pose(skeleton, states, beta)
    if weights.lam_c > 0.0:
        e = e + weights.lam_c * ((fk_joints - lead_joints) ** 2).sum()
    if weights.lam_b > 0.0 and n > 1:
        parents = torch.as_tensor(skeleton.parents[1:])
        bones = torch.linalg.vector_norm(
            lead_joints[:, 1:] - lead_joints[:, parents], dim=-1
        )
        e = e + weights.lam_b * ((bones[1:] - bones[:-1]) ** 2).sum()
    if contact_probs is not None and contact_probs.shape[0] > 0 and (
        weights.lam_cv > 0.0 or weights.lam_ch > 0.0
    ):
        ids = skeleton.contact_joint_ids
        probs = as_tensor(contact_probs)
        cur = fk_joints[1:, ids]
        prev = fk_joints[:-1, ids]
        if weights.lam_cv > 0.0:
            e = e + weights.lam_cv * (probs * ((cur - prev) ** 2).sum(dim=-1)).sum()
        if weights.lam_ch > 0.0:
            over = (plane_heights(cur, g_vec).abs() - CONTACT_HEIGHT_TOL).clamp(min=0.0)
            e = e + weights.lam_ch * (probs * over).sum()
    if weights.lam_gnd > 0.0:
        e = e + weights.lam_gnd * ((as_tensor(g_vec) - as_tensor(g_init_vec)) ** 2).sum()
    if weights.lam_shape > 0.0:
        e = e + weights.lam_shape * (as_tensor(beta) ** 2).sum()
    return e


def _fit_energy(model, gmm, obs, camera, skeleton, weights, g_init_vec,
                x0, z_seq, g_vec, beta, horizon=None):
    """Total fitting energy; rollout truncated to ``horizon`` transitions."""
    z_use = z_seq if horizon is None else z_seq[: min(horizon, z_seq.shape[0])]
    h = z_use.shape[0]
    x0_state = materialize_x0(x0, beta, skeleton)
    x0_g = state_to_ground(x0_state, g_vec)
    states_g, probs = model.rollout(x0_g, z_use)
    seq_g = torch.cat([x0_g.unsqueeze(0), states_g], dim=0)
    rot, trans = ground_basis(g_vec)
    seq_w = rigid_transform_state(seq_g, rot, trans)

    e = torch.zeros((), dtype=torch.float64)
    if weights.lam_cvae > 0.0 and h > 0:
        priors = model.conditional_prior(seq_g[:-1])
        e = e - weights.lam_cvae * priors.log_prob(z_use).sum()
    if weights.lam_init > 0.0:
        canon, _ = st.canonicalize(seq_g[0])
        e = e - weights.lam_init * gmm_log_likelihood(gmm, st.init_state_vector(canon))
    e = e + energy_data(obs.slice_frames(h + 1), camera, seq_w, beta, skeleton, weights)
    e = e + energy_regularizers(seq_w, probs, skeleton, g_vec, beta, g_init_vec, weights)
    return e


# ---------------------------------------------------------------------------
# initialization (doubles as the smoothed per-frame baseline)
# ---------------------------------------------------------------------------


def _kabsch(src: torch.Tensor, dst: torch.Tensor):
    """Least-squares rotation+translation mapping src points onto dst."""
    a = src - src.mean(dim=0)
    b = dst - dst.mean(dim=0)
    h = a.T @ b
    u, _, vt = torch.linalg.svd(h)
    d = torch.sign(torch.linalg.det(vt.T @ u.T))
    flip = torch.diag(torch.tensor([1.0, 1.0, float(d)], dtype=torch.float64))
    rot = vt.T @ flip @ u.T
    trans = dst.mean(dim=0) - rot @ src.mean(dim=0)
    return rot, trans


def _rigid_frame_guesses(obs: Observation, camera, skeleton: Skeleton):
    """Per-frame (r, phi) guesses matching observed points to the rest pose."""
    n = obs.num_frames
    rest = forward_kinematics(
        skeleton,
        torch.zeros(3, dtype=torch.float64),
        torch.zeros(3, dtype=torch.float64),
        torch.zeros(st.NUM_BODY_ROTS, 3, dtype=torch.float64),
        torch.zeros(SHAPE_DIM, dtype=torch.float64),
    )
    if obs.variant == "keypoints3d":
        _, rest_pts = fk_state_pose(
            skeleton,
            torch.cat([torch.zeros(75, dtype=torch.float64),
                       rest.reshape(-1),
                       torch.zeros(66, dtype=torch.float64)]),
            torch.zeros(SHAPE_DIM, dtype=torch.float64),
            with_markers=True,
        )
    else:
        rest_pts = rest
    root_rest = rest[0]
    r = torch.zeros(n, 3, dtype=torch.float64)
    phi = torch.zeros(n, 3, dtype=torch.float64)
    r[:, 2] = root_rest[2]
    if obs.variant in ("joints3d", "keypoints3d"):
        last = None
        first_valid = None
        for t in range(n):
            vis = obs.visibility[t]
            if int(vis.sum()) >= 3:
                rot, trans = _kabsch(rest_pts[vis], obs.values[t][vis])
                last = (matrix_to_axis_angle(rot), rot @ root_rest + trans)
                if first_valid is None:
                    first_valid = t
            if last is not None:
                phi[t], r[t] = last
        if first_valid is not None:  # frames before the first solvable one
            for t in range(first_valid):
                phi[t], r[t] = phi[first_valid].clone(), r[first_valid].clone()
    elif obs.variant == "pointcloud":
        for t in range(n):
            if obs.values[t].shape[0] > 0:
                c = obs.values[t].mean(dim=0)
                r[t, 0], r[t, 1] = c[0], c[1]
    return r, phi


@dataclass
class InitResult:
    variables: FitVariables
    states: torch.Tensor  # (T+1, 207) direct per-frame estimate
    trace: list


def initialize_fit(obs: Observation, camera, skeleton, weights: EnergyWeights,
                   g_init=None, model=None, frame_rate: float = FRAME_RATE) -> InitResult:
    """Two-stage direct pose/shape optimization plus latent inference.

    Stage one moves only the per-frame root translation and orientation
    (30 steps); stage two frees the body pose and shape (80 steps). The
    objective is the data energy plus shape, squared-angle pose, and
    joint-smoothness priors. Velocities come from finite differences and
    the latent sequence from the encoder's posterior means (when a model
    is supplied). The per-frame result doubles as the smoothing baseline.
    """
    obs.validate()
    n = obs.num_frames
    if sum(obs.visible_count(t) for t in range(1, n)) == 0:
        raise ValueError("observations carry no information after frame 0")
    g_init_vec = torch.zeros(3, dtype=torch.float64) if g_init is None else as_tensor(g_init)
    r0, phi0 = _rigid_frame_guesses(obs, camera, skeleton)
    theta0 = torch.zeros(n, st.NUM_BODY_ROTS * 3, dtype=torch.float64)
    beta0 = torch.zeros(SHAPE_DIM, dtype=torch.float64)

    def objective(r, phi, theta, beta, with_pose_terms):
        joints = forward_kinematics(
            skeleton, r, phi, theta.reshape(n, st.NUM_BODY_ROTS, 3), beta
        )
        states = torch.cat(
            [r, torch.zeros_like(r), phi, torch.zeros_like(phi), theta,
             joints.reshape(n, -1), torch.zeros(n, 66, dtype=torch.float64)],
            dim=-1,
        )
        e = energy_data(obs, camera, states, beta, skeleton, weights)
        if weights.lam_smooth > 0.0 and n > 1:
            e = e + weights.lam_smooth * ((joints[1:] - joints[:-1]) ** 2).sum()
        if with_pose_terms:
            e = e + weights.lam_pose * (theta**2).sum()
            e = e + weights.lam_shape * (beta**2).sum()
        return e

    def stage_a(flat):
        r = flat[: n * 3].reshape(n, 3)
        phi = flat[n * 3 :].reshape(n, 3)
        return objective(r, phi, theta0, beta0, with_pose_terms=False)

    def stage_b(flat):
        r = flat[: n * 3].reshape(n, 3)
        phi = flat[n * 3 : n * 6].reshape(n, 3)
        theta = flat[n * 6 : n * 6 + n * 63].reshape(n, 63)
        beta = flat[n * 6 + n * 63 :]
        return objective(r, phi, theta, beta, with_pose_terms=True)

    xa = np.concatenate([r0.numpy().ravel(), phi0.numpy().ravel()])
    res_a = lbfgs_minimize(torch_diff_function(stage_a, xa.size), xa, max_iters=30)
    r1 = res_a.x[: n * 3]
    phi1 = res_a.x[n * 3 :]
    xb = np.concatenate([r1, phi1, theta0.numpy().ravel(), beta0.numpy().ravel()])
    res_b = lbfgs_minimize(torch_diff_function(stage_b, xb.size), xb, max_iters=80)

    r = torch.as_tensor(res_b.x[: n * 3]).reshape(n, 3)
    phi = torch.as_tensor(res_b.x[n * 3 : n * 6]).reshape(n, 3)
    theta = torch.as_tensor(res_b.x[n * 6 : n * 6 + n * 63]).reshape(n, 63)
    beta = torch.as_tensor(res_b.x[n * 6 + n * 63 :])
    with torch.no_grad():
        joints = forward_kinematics(
            skeleton, r, phi, theta.reshape(n, st.NUM_BODY_ROTS, 3), beta
        )
    states = torch.cat(
        [
            r,
            finite_difference_velocities(r, frame_rate),
            phi,
            finite_difference_velocities(phi, frame_rate),
            theta,
            joints.reshape(n, -1),
            finite_difference_velocities(joints, frame_rate).reshape(n, -1),
        ],
        dim=-1,
    )
    if model is not None:
        with torch.no_grad():
            z_seq = model.encode(states[1:], states[:-1]).mu
    else:
        z_seq = torch.zeros(n - 1, LATENT_DIM, dtype=torch.float64)
    variables = FitVariables(x0_from_state(states[0]), z_seq, g_init_vec, beta)
    traces = [{"stage": "init_a", "trace": [float(v) for v in res_a.trace]},
              {"stage": "init_b", "trace": [float(v) for v in res_b.trace]}]
    return InitResult(variables, states, traces)


# ---------------------------------------------------------------------------
# the equivariant internal frame
# ---------------------------------------------------------------------------


def _quantize(t: torch.Tensor) -> torch.Tensor:
    return t.to(torch.float32).to(torch.float64)


@dataclass
class _InternalFrame:
    """Yaw+shift p_int = rot @ (p + shift) derived from the observations.

    Derived equivariantly: observation sets differing by a rigid
    yaw+translation land on the same internal problem. The shift also
    lifts the scene so the ground plane's offset becomes 1 m.
    """

    yaw: float
    shift: torch.Tensor  # (3,)

    @property
    def rot(self) -> torch.Tensor:
        return yaw_matrix(torch.tensor(self.yaw, dtype=torch.float64))

    def apply_points(self, pts: torch.Tensor) -> torch.Tensor:
        return torch.einsum("ij,...j->...i", self.rot, as_tensor(pts) + self.shift)

    def apply_states(self, states: torch.Tensor) -> torch.Tensor:
        return rigid_transform_state(states, self.rot, self.rot @ self.shift)

    def invert_states(self, states: torch.Tensor) -> torch.Tensor:
        return rigid_transform_state(states, self.rot.T, -self.shift)

    def apply_plane(self, g_vec: torch.Tensor) -> torch.Tensor:
        n, d = _plane_parts(g_vec)
        n_i = self.rot @ n
        d_i = d + n @ self.shift
        return d_i * n_i

    def invert_plane(self, g_vec: torch.Tensor) -> torch.Tensor:
        n_i, d_i = _plane_parts(g_vec)
        n = self.rot.T @ n_i
        d = d_i - n @ self.shift
        return d * n

    def apply_observation(self, obs: Observation) -> Observation:
        if obs.variant == "pointcloud":
            vals = [_quantize(self.apply_points(v)) for v in obs.values]
            return Observation("pointcloud", vals)
        if obs.variant == "joints2d":
            return Observation("joints2d", _quantize(obs.values),
                               confidence=_quantize(obs.confidence))
        return Observation(obs.variant, _quantize(self.apply_points(obs.values)),
                           obs.visibility)

    def apply_camera(self, camera):
        if camera is None:
            return None
        rot = camera.rot @ self.rot.T
        trans = camera.trans - camera.rot @ self.shift
        return Camera(camera.fx, camera.fy, camera.cx, camera.cy,
                      _quantize(rot), _quantize(trans))

    def apply_variables(self, variables: FitVariables) -> FitVariables:
        fake = torch.cat(
            [variables.x0[:75],
             torch.zeros(66, dtype=torch.float64),
             variables.x0[75:]]
        )
        moved = self.apply_states(fake)
        return FitVariables(
            x0_from_state(moved),
            variables.z_seq.clone(),
            self.apply_plane(variables.g),
            variables.beta.clone(),
        )


def _plane_parts(g_vec: torch.Tensor):
    g = as_tensor(g_vec)
    norm = float(g.norm())
    if norm < 1e-12:
        return _Z_AXIS.clone(), torch.zeros((), dtype=torch.float64)
    n = g / norm
    if float(n[2]) < 0:
        return -n, -g.norm()
    return n, g.norm()


def _derive_frame(obs: Observation, camera, g_init_vec: torch.Tensor) -> _InternalFrame:
    def frame_points(t):
        if obs.variant == "pointcloud":
            return obs.values[t]
        return obs.values[t][obs.visibility[t]]

    if obs.variant == "joints2d":
        if camera is None:
            raise ValueError("2D observations need a camera")
        center = -(camera.rot.T @ camera.trans)
        fwd = camera.rot.T @ _Z_AXIS
        yaw = -math.atan2(float(fwd[1]), float(fwd[0]))
        anchor = center
    else:
        first = frame_points(0)
        anchor = first.mean(dim=0)
        drift = None
        for t in range(obs.num_frames - 1, 0, -1):
            pts = frame_points(t)
            if pts.shape[0] > 0:
                drift = pts.mean(dim=0) - anchor
                break
        yaw = 0.0
        if drift is not None and math.hypot(float(drift[0]), float(drift[1])) > 1e-6:
            yaw = -math.atan2(float(drift[1]), float(drift[0]))
    n, d = _plane_parts(g_init_vec)
    shift = torch.zeros(3, dtype=torch.float64)
    shift[0], shift[1] = -anchor[0], -anchor[1]
    # lift so the transformed plane has offset exactly 1
    shift[2] = (1.0 - d - n[0] * shift[0] - n[1] * shift[1]) / n[2].clamp(min=1e-6)
    return _InternalFrame(yaw=yaw, shift=shift)


# ---------------------------------------------------------------------------
# the staged fit
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    states: torch.Tensor         # (T+1, 207)
    contact_probs: torch.Tensor  # (T, 8)
    g: torch.Tensor              # (3,)
    beta: torch.Tensor           # (16,)
    energy_trace: list           # per-stage dicts
    init_states: torch.Tensor    # (T+1, 207) baseline from initialization
    init_energy: float
    final_energy: float
    warning: bool


def fit(model, gmm, obs: Observation, camera=None, skeleton=None,
        weights: EnergyWeights | None = None, g_init=None,
        stages=(30, 25, 15), init_vars: FitVariables | None = None,
        init_states: torch.Tensor | None = None) -> FitResult:
    """Three-stage MAP optimization of motion, ground, and shape.

    Stage one tunes the initial state and the first 15 transition latents
    on a truncated horizon, stage two the full latent sequence with the
    initial state frozen, stage three everything; the plane and shape stay
    active throughout. Returns the best-seen iterate by total energy; the
    warning flag is set when a later stage failed to improve on it.
    Supplying ``init_vars`` (with matching ``init_states``) replaces the
    built-in initialization.
    """
    if len(stages) != 3:
        raise ValueError("fit runs exactly three stages")
    skeleton = skeleton if skeleton is not None else default_skeleton()
    weights = weights if weights is not None else EnergyWeights.occluded_keypoints()
    g_init_ext = torch.zeros(3, dtype=torch.float64) if g_init is None else as_tensor(g_init)
    frame = _derive_frame(obs, camera, g_init_ext)
    obs_i = frame.apply_observation(obs)
    cam_i = frame.apply_camera(camera)
    g_init_i = _quantize(frame.apply_plane(g_init_ext))

    if init_vars is not None:
        variables = frame.apply_variables(init_vars)
        variables.g = g_init_i.clone()
        base_states = (frame.apply_states(as_tensor(init_states))
                       if init_states is not None else None)
        init_trace: list = []
    else:
        init = initialize_fit(obs_i, cam_i, skeleton, weights, g_init_i, model)
        variables = init.variables
        base_states = init.states
        init_trace = init.trace

    n = obs.num_frames
    total_t = n - 1
    if variables.z_seq.shape[0] != total_t:
        raise ValueError("latent sequence length does not match the observations")

    def full_energy(v: FitVariables) -> float:
        with torch.no_grad():
            try:
                return float(_fit_energy(model, gmm, obs_i, cam_i, skeleton, weights,
                                         g_init_i, v.x0, v.z_seq, v.g, v.beta))
            except RolloutDivergenceError:
                return math.inf

    def pack(v: FitVariables, parts, z_count):
        segs = []
        if "x0" in parts:
            segs.append(v.x0.numpy())
        if "z" in parts:
            segs.append(v.z_seq[:z_count].numpy().ravel())
        segs.append(v.g.numpy())
        segs.append(v.beta.numpy())
        return np.concatenate(segs)

    def unpack(flat: torch.Tensor, v: FitVariables, parts, z_count):
        i = 0
        x0 = v.x0
        z = v.z_seq
        if "x0" in parts:
            x0 = flat[i : i + X0_DIM]
            i += X0_DIM
        if "z" in parts:
            zc = flat[i : i + z_count * LATENT_DIM].reshape(z_count, LATENT_DIM)
            z = torch.cat([zc, v.z_seq[z_count:]], dim=0) if z_count < total_t else zc
            i += z_count * LATENT_DIM
        g = flat[i : i + 3]
        beta = flat[i + 3 :]
        return x0, z, g, beta

    stage_defs = [
        (stages[0], ("x0", "z"), min(15, total_t), min(15, total_t)),
        (stages[1], ("z",), total_t, None),
        (stages[2], ("x0", "z"), total_t, None),
    ]
    best_energy = full_energy(variables)
    init_energy = best_energy
    best_vars = variables.copy()
    best_stage = 0
    trace = [{"stage": 0, "trace": [init_energy], "full_energy": init_energy}]

    for idx, (iters, parts, z_count, horizon) in enumerate(stage_defs, start=1):
        if iters < 1:
            continue
        frozen = variables.copy()

        def stage_energy(flat, parts=parts, z_count=z_count, horizon=horizon,
                         frozen=frozen):
            x0, z, g, beta = unpack(flat, frozen, parts, z_count)
            try:
                return _fit_energy(model, gmm, obs_i, cam_i, skeleton, weights,
                                   g_init_i, x0, z, g, beta, horizon=horizon)
            except RolloutDivergenceError:
                return 1e30 * (1.0 + (flat**2).sum())

        x_start = pack(variables, parts, z_count)
        res = lbfgs_minimize(
            torch_diff_function(stage_energy, x_start.size), x_start, max_iters=iters
        )
        x0, z, g, beta = unpack(torch.as_tensor(res.x), variables, parts, z_count)
        variables = FitVariables(x0, z, g, beta)
        e_full = full_energy(variables)
        trace.append({"stage": idx, "trace": [float(v) for v in res.trace],
                      "full_energy": e_full, "no_progress": res.no_progress})
        if e_full < best_energy:
            best_energy = e_full
            best_vars = variables.copy()
            best_stage = idx

    warning = best_stage != len(stage_defs)
    with torch.no_grad():
        x0_state = materialize_x0(best_vars.x0, best_vars.beta, skeleton)
        x0_g = state_to_ground(x0_state, best_vars.g)
        states_g, probs = model.rollout(x0_g, best_vars.z_seq)
        seq_g = torch.cat([x0_g.unsqueeze(0), states_g], dim=0)
        seq_int = state_from_ground(seq_g, best_vars.g)
        states_ext = frame.invert_states(seq_int)
    result = FitResult(
        states=states_ext,
        contact_probs=probs,
        g=frame.invert_plane(best_vars.g),
        beta=best_vars.beta.clone(),
        energy_trace=init_trace + trace,
        init_states=(frame.invert_states(base_states)
                     if base_states is not None else states_ext),
        init_energy=init_energy,
        final_energy=best_energy,
        warning=warning,
    )
    return result


def fit_init_only(obs: Observation, camera=None, skeleton=None,
                  weights: EnergyWeights | None = None, g_init=None,
                  model=None) -> FitResult:
    """The smoothed per-frame baseline packaged like a full fit result."""
    skeleton = skeleton if skeleton is not None else default_skeleton()
    weights = weights if weights is not None else EnergyWeights.occluded_keypoints()
    g_init_ext = torch.zeros(3, dtype=torch.float64) if g_init is None else as_tensor(g_init)
    frame = _derive_frame(obs, camera, g_init_ext)
    obs_i = frame.apply_observation(obs)
    cam_i = frame.apply_camera(camera)
    g_init_i = _quantize(frame.apply_plane(g_init_ext))
    init = initialize_fit(obs_i, cam_i, skeleton, weights, g_init_i, model)
    states_ext = frame.invert_states(init.states)
    n = init.states.shape[0]
    return FitResult(
        states=states_ext,
        contact_probs=torch.zeros(n - 1, 8, dtype=torch.float64),
        g=frame.invert_plane(g_init_i),
        beta=init.variables.beta.clone(),
        energy_trace=init.trace,
        init_states=states_ext,
        init_energy=math.nan,
        final_energy=math.nan,
        warning=False,
    )


# ---------------------------------------------------------------------------
# problem and result files
# ---------------------------------------------------------------------------


@dataclass
class FitProblem:
    obs: Observation
    camera: Camera | None = None
    weights: EnergyWeights = field(default_factory=EnergyWeights.occluded_keypoints)
    stages: tuple = (30, 25, 15)
    g_init: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)


def save_fit_problem(path, problem: FitProblem) -> None:
    """JSON descriptor plus an .npz payload next to it."""
    path = str(path)
    payload_path = os.path.splitext(path)[0] + ".npz"
    arrays = {}
    if problem.obs.variant == "pointcloud":
        arrays["frame_count"] = np.array(problem.obs.num_frames)
        for t, pts in enumerate(problem.obs.values):
            arrays[f"pc_{t:05d}"] = pts.numpy()
    else:
        arrays["values"] = problem.obs.values.numpy()
        arrays["visibility"] = problem.obs.visibility.numpy()
        if problem.obs.confidence is not None:
            arrays["confidence"] = problem.obs.confidence.numpy()
    np.savez(payload_path, **arrays)
    doc = {
        "variant": problem.obs.variant,
        "payload": os.path.basename(payload_path),
        "camera": problem.camera.to_dict() if problem.camera else None,
        "weights": problem.weights.to_dict(),
        "stages": list(problem.stages),
        "g_init": [float(v) for v in problem.g_init] if problem.g_init is not None else None,
        "meta": problem.meta,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_fit_problem(path) -> FitProblem:
    path = str(path)
    with open(path) as f:
        doc = json.load(f)
    payload = np.load(os.path.join(os.path.dirname(path) or ".", doc["payload"]))
    variant = doc["variant"]
    if variant == "pointcloud":
        count = int(payload["frame_count"])
        values = [torch.as_tensor(payload[f"pc_{t:05d}"], dtype=torch.float64)
                  for t in range(count)]
        obs = Observation(variant, values)
    elif variant == "joints2d":
        obs = Observation(variant, torch.as_tensor(payload["values"], dtype=torch.float64),
                          confidence=torch.as_tensor(payload["confidence"],
                                                     dtype=torch.float64))
    else:
        obs = Observation(variant, torch.as_tensor(payload["values"], dtype=torch.float64),
                          torch.as_tensor(payload["visibility"]))
    weights_doc = dict(doc["weights"])
    preset = weights_doc.pop("preset", None)
    weights = (EnergyWeights.preset(preset, **weights_doc) if preset
               else EnergyWeights.from_dict(weights_doc))
    return FitProblem(
        obs=obs,
        camera=Camera.from_dict(doc["camera"]) if doc.get("camera") else None,
        weights=weights,
        stages=tuple(doc.get("stages", (30, 25, 15))),
        g_init=(torch.tensor(doc["g_init"], dtype=torch.float64)
                if doc.get("g_init") is not None else None),
        meta=doc.get("meta", {}),
    )


def save_fit_result(prefix, result: FitResult, skeleton: Skeleton,
                    frame_rate: float = FRAME_RATE) -> None:
    """Motion file plus a JSON sidecar with plane, shape, trace, contacts."""
    prefix = str(prefix)
    probs = result.contact_probs
    contacts = (probs >= 0.5).to(torch.float64)
    contacts = torch.cat([contacts[:1], contacts], dim=0) if contacts.shape[0] else (
        torch.zeros(result.states.shape[0], 8, dtype=torch.float64))
    clip = MotionClip(
        frame_rate=frame_rate,
        states=result.states,
        contacts=contacts,
        beta=result.beta,
        family="fit",
        seed=0,
        skel_hash=skeleton_hash(skeleton),
    )
    save_clip(clip, prefix + ".motion")
    sidecar = {
        "g": [float(v) for v in result.g],
        "beta": [float(v) for v in result.beta],
        "energy_trace": result.energy_trace,
        "contact_probs": [[float(p) for p in row] for row in result.contact_probs],
        "init_energy": result.init_energy,
        "final_energy": result.final_energy,
        "warning": bool(result.warning),
    }
    with open(prefix + ".json", "w") as f:
        json.dump(sidecar, f, indent=1)


def load_fit_result(prefix):
    """(MotionClip, sidecar dict); rollout states skip dataset validation."""
    prefix = str(prefix)
    clip = load_clip(prefix + ".motion", validate=False)
    with open(prefix + ".json") as f:
        sidecar = json.load(f)
    return clip, sidecar
