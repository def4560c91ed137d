"""Synthetic motion corpus: clip container, binary file format, generators.

Clips hold per-frame 207-dim states plus 8 contact labels at 30 Hz, with
velocities defined by backward finite differences of the stored positions.
Six closed-form families (standing sway, walking, squats, reaching, jumps,
sit-to-stand) provide deterministic, ground-consistent training motion on
the plane z = 0.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from . import state as st
from .kinematics import (
    FRAME_RATE,
    SHAPE_DIM,
    Skeleton,
    annotate_contacts,
    default_skeleton,
    finite_difference_velocities,
    forward_kinematics,
    skeleton_hash,
)
from .transforms import as_tensor, axis_angle_to_matrix, matrix_to_axis_angle

MAGIC = b"MPRCLIP\x00"
VERSION = 1
FRAME_SCALARS = st.STATE_DIM + 8  # state + contact labels per frame
HEADER_BYTES = 64

FAMILIES = ("idle_sway", "walk_cycle", "squat", "reach", "jump", "sit_stand")

# Feet are kept this far above the plane when planted.
GROUND_CLEARANCE = 0.003


@dataclass
class MotionClip:
    frame_rate: float
    states: torch.Tensor  # (T, 207)
    contacts: torch.Tensor  # (T, 8) in {0, 1}
    beta: torch.Tensor  # (16,)
    family: str
    seed: int
    skel_hash: str

    @property
    def num_frames(self) -> int:
        return int(self.states.shape[0])

    def joints(self) -> torch.Tensor:
        return self.states[:, st.JOINT_POS].reshape(-1, st.NUM_JOINTS, 3)

    def validate(self, atol: float = 1e-6) -> None:
        if self.states.shape[0] < 2:
            raise ValueError("clips need at least two frames")
        if self.states.shape[1] != st.STATE_DIM or self.contacts.shape[1] != 8:
            raise ValueError("bad clip layout")
        if not bool(torch.isfinite(self.states).all()):
            raise ValueError("non-finite state values")
        if not bool(((self.contacts == 0) | (self.contacts == 1)).all()):
            raise ValueError("contacts must be binary")
        for pos, vel in (
            (st.ROOT_POS, st.ROOT_VEL),
            (st.ROOT_ORIENT, st.ROOT_ANG_VEL),
            (st.JOINT_POS, st.JOINT_VEL),
        ):
            expect = finite_difference_velocities(self.states[:, pos], self.frame_rate)
            err = float((self.states[:, vel] - expect).abs().max())
            if err > atol:
                raise ValueError(f"stored velocities drift from positions by {err:.2e}")


def save_clip(clip: MotionClip, path) -> None:
    header = {
        "frame_rate": clip.frame_rate,
        "frame_count": clip.num_frames,
        "skeleton_hash": clip.skel_hash,
        "shape": [float(v) for v in clip.beta],
        "meta": {"family": clip.family, "seed": int(clip.seed)},
    }
    blob = json.dumps(header).encode()
    payload = (
        torch.cat([clip.states, clip.contacts], dim=1)
        .numpy()
        .astype("<f4")
        .tobytes()
    )
    with open(path, "wb") as f:
        head = MAGIC + struct.pack("<II", VERSION, len(blob))
        head += struct.pack("<Q", clip.num_frames)
        f.write(head.ljust(HEADER_BYTES, b"\x00"))
        f.write(blob)
        f.write(payload)


def load_clip(path, validate: bool = True) -> MotionClip:
    """Read a motion clip. ``validate=False`` skips the velocity consistency
    check, needed for model-generated motions whose velocity fields come
    from the decoder rather than from finite differences of the positions.
    """
    with open(path, "rb") as f:
        head = f.read(HEADER_BYTES)
        if len(head) < HEADER_BYTES or head[:8] != MAGIC:
            raise ValueError(f"{path}: not a motion clip file")
        version, blob_len = struct.unpack("<II", head[8:16])
        (frames,) = struct.unpack("<Q", head[16:24])
        if version != VERSION:
            raise ValueError(f"{path}: unsupported clip version {version}")
        header = json.loads(f.read(blob_len).decode())
        payload = f.read()
    expected = frames * FRAME_SCALARS * 4
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    values = torch.as_tensor(
        np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(frames, FRAME_SCALARS)
    )
    clip = MotionClip(
        frame_rate=float(header["frame_rate"]),
        states=values[:, : st.STATE_DIM],
        contacts=values[:, st.STATE_DIM :].round(),
        beta=as_tensor(header["shape"]),
        family=header["meta"].get("family", "unknown"),
        seed=int(header["meta"].get("seed", 0)),
        skel_hash=header["skeleton_hash"],
    )
    if validate:
        clip.validate(atol=1e-3)  # float32 storage loosens the consistency bound
    return clip


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _keyframe_curve(times: np.ndarray, keys) -> np.ndarray:
    """Piecewise cosine-eased interpolation through (time, value) keys."""
    keys = sorted(keys)
    out = np.empty_like(times)
    for i, t in enumerate(times):
        if t <= keys[0][0]:
            out[i] = keys[0][1]
            continue
        if t >= keys[-1][0]:
            out[i] = keys[-1][1]
            continue
        for (t0, v0), (t1, v1) in zip(keys[:-1], keys[1:]):
            if t0 <= t <= t1:
                w = 0.5 - 0.5 * np.cos(np.pi * (t - t0) / (t1 - t0))
                out[i] = v0 + (v1 - v0) * w
                break
    return out


def _compose_aa(*mats: torch.Tensor) -> torch.Tensor:
    out = mats[0]
    for m in mats[1:]:
        out = out @ m
    return matrix_to_axis_angle(out)


def _rot_x(angle: np.ndarray) -> torch.Tensor:
    aa = torch.zeros(len(angle), 3, dtype=torch.float64)
    aa[:, 0] = torch.as_tensor(angle)
    return axis_angle_to_matrix(aa)


def _rot_y(angle: np.ndarray) -> torch.Tensor:
    aa = torch.zeros(len(angle), 3, dtype=torch.float64)
    aa[:, 1] = torch.as_tensor(angle)
    return axis_angle_to_matrix(aa)


def _rot_z(angle: np.ndarray) -> torch.Tensor:
    aa = torch.zeros(len(angle), 3, dtype=torch.float64)
    aa[:, 2] = torch.as_tensor(angle)
    return axis_angle_to_matrix(aa)


class _PoseTrack:
    """Accumulates per-joint rotation matrices over T frames."""

    def __init__(self, skel: Skeleton, T: int):
        self.skel = skel
        self.T = T
        self.mats = {}

    def set(self, joint_name: str, *mats: torch.Tensor):
        prev = self.mats.get(joint_name)
        combined = prev if prev is not None else torch.eye(3, dtype=torch.float64).expand(self.T, 3, 3)
        for m in mats:
            combined = combined @ m
        self.mats[joint_name] = combined

    def theta(self) -> torch.Tensor:
        out = torch.zeros(self.T, st.NUM_BODY_ROTS, 3, dtype=torch.float64)
        for name, mats in self.mats.items():
            j = self.skel.joint_names.index(name)
            out[:, j - 1] = matrix_to_axis_angle(mats)
        return out


def _arms_down(track: _PoseTrack, T: int, rng, swing_l=None, swing_r=None):
    """Relaxed arms: shoulders rotated ~75 degrees down, slight elbow bend."""
    down = rng.uniform(1.15, 1.35)
    zeros = np.zeros(T)
    sw_l = zeros if swing_l is None else swing_l
    sw_r = zeros if swing_r is None else swing_r
    track.set("shoulder_l", _rot_y(np.full(T, -down)), _rot_x(sw_l))
    track.set("shoulder_r", _rot_y(np.full(T, down)), _rot_x(sw_r))
    bend = rng.uniform(0.15, 0.35)
    track.set("elbow_l", _rot_z(np.full(T, -bend)))
    track.set("elbow_r", _rot_z(np.full(T, bend)))


def _leg_chain(track: _PoseTrack, hip_l, knee_l, ankle_l, hip_r, knee_r, ankle_r):
    """Sagittal leg angles (radians about the side axis), flexion positive."""
    track.set("hip_l", _rot_x(hip_l))
    track.set("knee_l", _rot_x(-knee_l))
    track.set("ankle_l", _rot_x(ankle_l))
    track.set("hip_r", _rot_x(hip_r))
    track.set("knee_r", _rot_x(-knee_r))
    track.set("ankle_r", _rot_x(ankle_r))


def _crouch_angles(alpha: np.ndarray):
    """Symmetric crouch: thighs forward, knees folded, ankles compensating."""
    return alpha, 2.0 * alpha, alpha


def _toe_heights(skel, r, yaw, theta, beta) -> torch.Tensor:
    phi = torch.zeros(len(yaw), 3, dtype=torch.float64)
    phi[:, 2] = torch.as_tensor(yaw)
    joints = forward_kinematics(skel, as_tensor(r), phi, theta, beta)
    toes = [skel.joint_names.index("toe_l"), skel.joint_names.index("toe_r")]
    return joints[:, toes, 2].min(dim=1).values


def _family_idle_sway(skel, beta, T, times, rng, track):
    a = rng.uniform(0.05, 0.12)
    hip, knee, ankle = _crouch_angles(np.full(T, a))
    _leg_chain(track, hip, knee, ankle, hip, knee, ankle)
    for joint, lo, hi in (("spine_low", 0.02, 0.05), ("spine_mid", 0.02, 0.06), ("chest", 0.01, 0.04)):
        amp = rng.uniform(lo, hi)
        freq = rng.uniform(0.15, 0.45)
        phase = rng.uniform(0, 2 * np.pi)
        axis = _rot_x if rng.random() < 0.5 else _rot_y
        track.set(joint, axis(amp * np.sin(2 * np.pi * freq * times + phase)))
    sway = rng.uniform(0.01, 0.04) * np.sin(2 * np.pi * rng.uniform(0.2, 0.4) * times)
    _arms_down(track, T, rng, swing_l=sway, swing_r=-sway)
    r = np.zeros((T, 3))
    yaw = np.zeros(T)
    return r, yaw, "static"


def _family_walk_cycle(skel, beta, T, times, rng, track):
    scales = skel.bone_scales(beta)
    leg = float(0.40 * scales[3] + 0.42 * scales[6])  # thigh + shin, left side
    amp = rng.uniform(0.25, 0.38)
    speed = rng.uniform(0.7, 1.1)
    # Stance foot sweeps backward at leg * amp * omega mid-stance; matching
    # that to the forward speed keeps the planted foot near world-still.
    step_len = 0.95 * np.pi * leg * amp
    half_period = step_len / speed
    omega = np.pi / half_period
    ph = omega * times
    hip_l = amp * np.sin(ph)
    hip_r = -hip_l
    flex = rng.uniform(0.5, 0.8)
    # Squared swing gate: knee flexion is cubic-flat through mid-stance, so
    # the planted foot's world displacement stays under the contact budget.
    knee_l = flex * (0.5 + 0.5 * np.cos(ph)) ** 2 + 0.05
    knee_r = flex * (0.5 - 0.5 * np.cos(ph)) ** 2 + 0.05
    # Foot world pitch = hip - knee + ankle; this choice keeps feet flat.
    ankle_l = knee_l - hip_l
    ankle_r = knee_r - hip_r
    _leg_chain(track, hip_l, knee_l, ankle_l, hip_r, knee_r, ankle_r)
    arm = rng.uniform(0.10, 0.25)
    _arms_down(track, T, rng, swing_l=arm * np.sin(ph), swing_r=-arm * np.sin(ph))
    track.set("spine_low", _rot_x(np.full(T, -0.05)))
    r = np.zeros((T, 3))
    r[:, 1] = speed * times
    r[:, 0] = rng.uniform(0.005, 0.012) * np.sin(ph)
    r[:, 2] = -rng.uniform(0.008, 0.015) * (0.5 - 0.5 * np.cos(2 * ph))
    yaw = rng.uniform(0.02, 0.04) * np.sin(ph)
    return r, yaw, "global"


def _family_squat(skel, beta, T, times, rng, track):
    reps = rng.integers(1, 3)
    depth = rng.uniform(0.5, 0.9)
    alpha = depth * (0.5 - 0.5 * np.cos(2 * np.pi * reps * times / times[-1])) + 0.08
    hip, knee, ankle = _crouch_angles(alpha)
    _leg_chain(track, hip, knee, ankle, hip, knee, ankle)
    track.set("spine_low", _rot_x(-0.3 * alpha))
    track.set("spine_mid", _rot_x(-0.1 * alpha))
    raise_arm = 0.9 * alpha
    _arms_down(track, T, rng, swing_l=raise_arm, swing_r=raise_arm)
    r = np.zeros((T, 3))
    yaw = np.zeros(T)
    return r, yaw, "perframe"


def _family_reach(skel, beta, T, times, rng, track):
    a = rng.uniform(0.05, 0.12)
    hip, knee, ankle = _crouch_angles(np.full(T, a))
    _leg_chain(track, hip, knee, ankle, hip, knee, ankle)
    t_end = times[-1]
    profile = _keyframe_curve(
        times, [(0.0, 0.0), (0.35 * t_end, 1.0), (0.6 * t_end, 1.0), (0.95 * t_end, 0.0)]
    )
    side = "l" if rng.random() < 0.5 else "r"
    sign = -1.0 if side == "l" else 1.0
    down = 1.25 - 1.05 * profile  # raise toward horizontal
    fwd = 0.5 * profile
    track.set(f"shoulder_{side}", _rot_y(sign * down), _rot_x(fwd))
    track.set(f"elbow_{side}", _rot_z(sign * (0.3 - 0.25 * profile)))
    other = "r" if side == "l" else "l"
    osign = -sign
    track.set(f"shoulder_{other}", _rot_y(np.full(T, osign * 1.25)))
    track.set(f"elbow_{other}", _rot_z(np.full(T, osign * 0.3)))
    track.set("spine_low", _rot_x(-0.12 * profile))
    track.set("spine_mid", _rot_z(-sign * 0.10 * profile))
    r = np.zeros((T, 3))
    yaw = np.zeros(T)
    return r, yaw, "static"


def _family_jump(skel, beta, T, times, rng, track):
    t_end = times[-1]
    flight_time = rng.uniform(0.26, 0.4)
    t1 = 0.35 * (t_end - flight_time)  # crouch until here
    t2 = t1 + 0.12  # thrust
    t3 = t2 + flight_time
    crouch = rng.uniform(0.6, 0.9)
    alpha = _keyframe_curve(
        times,
        [
            (0.0, 0.1),
            (t1, crouch),
            (t2, 0.12),
            (t2 + flight_time * 0.5, 0.55),
            (t3, 0.3),
            (min(t3 + 0.25, t_end - 0.05), crouch * 0.7),
            (t_end, 0.12),
        ],
    )
    hip, knee, ankle = _crouch_angles(alpha)
    _leg_chain(track, hip, knee, ankle, hip, knee, ankle)
    arm = _keyframe_curve(times, [(0.0, 0.0), (t1, -0.3), (t2, 0.9), (t3, 0.4), (t_end, 0.0)])
    _arms_down(track, T, rng, swing_l=arm, swing_r=arm)
    track.set("spine_low", _rot_x(-0.25 * alpha))
    r = np.zeros((T, 3))
    yaw = np.zeros(T)
    return r, yaw, ("jump", t2, t3)


def _family_sit_stand(skel, beta, T, times, rng, track):
    t_end = times[-1]
    deep = rng.uniform(1.0, 1.3)
    alpha = _keyframe_curve(
        times,
        [(0.0, 0.1), (0.35 * t_end, deep), (0.65 * t_end, deep), (t_end, 0.12)],
    )
    alpha = alpha + 0.02 * np.sin(2 * np.pi * 0.8 * times) * (alpha > deep * 0.9)
    hip, knee, ankle = _crouch_angles(alpha)
    _leg_chain(track, hip, knee, ankle, hip, knee, ankle)
    track.set("spine_low", _rot_x(-0.3 * alpha))
    track.set("spine_mid", _rot_x(-0.12 * alpha))
    _arms_down(track, T, rng, swing_l=0.5 * alpha, swing_r=0.5 * alpha)
    r = np.zeros((T, 3))
    r[:, 1] = -0.10 * alpha / deep
    yaw = np.zeros(T)
    return r, yaw, "perframe"


_BUILDERS = {
    "idle_sway": _family_idle_sway,
    "walk_cycle": _family_walk_cycle,
    "squat": _family_squat,
    "reach": _family_reach,
    "jump": _family_jump,
    "sit_stand": _family_sit_stand,
}


def generate_synthetic(
    family: str,
    duration: float,
    seed: int,
    skeleton: Skeleton | None = None,
    frame_rate: float = FRAME_RATE,
) -> MotionClip:
    """Deterministic closed-form clip of one family; ground plane z = 0."""
    if family not in _BUILDERS:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    skel = skeleton if skeleton is not None else default_skeleton()
    T = max(int(round(duration * frame_rate)), 2)
    times = np.arange(T) / frame_rate
    rng = np.random.default_rng(seed)
    beta = as_tensor(rng.uniform(-0.8, 0.8, size=SHAPE_DIM))
    track = _PoseTrack(skel, T)
    r, yaw, ground_mode = _BUILDERS[family](skel, beta, T, times, rng, track)
    theta = track.theta()

    toe_z = _toe_heights(skel, r, yaw, theta, beta).numpy()
    if ground_mode == "static":
        r[:, 2] += GROUND_CLEARANCE - toe_z[0]
    elif ground_mode == "global":
        r[:, 2] += GROUND_CLEARANCE - toe_z.min()
    elif ground_mode == "perframe":
        r[:, 2] += GROUND_CLEARANCE - toe_z
    else:  # jump: pin ground phases per frame, ballistic arc in between
        _, t2, t3 = ground_mode
        pinned = r[:, 2] + GROUND_CLEARANCE - toe_z
        i2, i3 = int(t2 * frame_rate), min(int(t3 * frame_rate), T - 1)
        z = pinned.copy()
        if i3 > i2 + 1:
            tau = times[i2:i3 + 1] - times[i2]
            span = tau[-1]
            v0 = (pinned[i3] - pinned[i2] + 0.5 * 9.81 * span**2) / span
            z[i2:i3 + 1] = pinned[i2] + v0 * tau - 0.5 * 9.81 * tau**2
        r[:, 2] = z

    phi = np.zeros((T, 3))
    phi[:, 2] = yaw
    states = _assemble_states(skel, r, phi, theta, beta, frame_rate)
    contacts = annotate_contacts(
        states[:, st.JOINT_POS].reshape(T, st.NUM_JOINTS, 3), skel, frame_rate
    )

    # Random global placement: heading capped so the root yaw stays inside
    # the principal branch, keeping stored orientations wrap-free.
    margin = np.pi - 0.15 - np.abs(yaw).max()
    heading = rng.uniform(-margin, margin)
    shift = rng.normal(scale=1.2, size=2)
    tf = st.CanonicalTransform(
        yaw=torch.tensor(heading, dtype=torch.float64),
        shift_xy=torch.as_tensor(shift),
        degenerate=torch.tensor(False),
    )
    states = st.transform_state(states, tf)

    clip = MotionClip(
        frame_rate=frame_rate,
        states=states,
        contacts=contacts,
        beta=beta,
        family=family,
        seed=seed,
        skel_hash=skeleton_hash(skel),
    )
    clip.validate()
    return clip


def _assemble_states(skel, r, phi, theta, beta, frame_rate) -> torch.Tensor:
    r = as_tensor(r)
    phi = as_tensor(phi)
    joints = forward_kinematics(skel, r, phi, theta, beta)
    T = r.shape[0]
    return torch.cat(
        [
            r,
            finite_difference_velocities(r, frame_rate),
            phi,
            finite_difference_velocities(phi, frame_rate),
            theta.reshape(T, -1),
            joints.reshape(T, -1),
            finite_difference_velocities(joints, frame_rate).reshape(T, -1),
        ],
        dim=1,
    )


# ---------------------------------------------------------------------------
# datasets and windows
# ---------------------------------------------------------------------------


def generate_dataset(
    families: dict,
    duration: float,
    seed: int,
    skeleton: Skeleton | None = None,
    split_fractions=(0.8, 0.1, 0.1),
) -> dict:
    """Clips per family, deterministically split into train/val/test."""
    skel = skeleton if skeleton is not None else default_skeleton()
    seq = np.random.SeedSequence(seed)
    clips = []
    for family in sorted(families):
        count = families[family]
        for child in seq.spawn(count):
            clips.append(
                generate_synthetic(family, duration, int(child.generate_state(1)[0]), skel)
            )
    order = np.random.default_rng(seed).permutation(len(clips))
    n_train = int(round(split_fractions[0] * len(clips)))
    n_val = int(round(split_fractions[1] * len(clips)))
    splits = {
        "train": [clips[i] for i in order[:n_train]],
        "val": [clips[i] for i in order[n_train : n_train + n_val]],
        "test": [clips[i] for i in order[n_train + n_val :]],
    }
    return splits


def save_dataset(root, splits: dict, seed: int, families: dict) -> None:
    import os

    manifest = {"seed": seed, "families": families, "splits": {}}
    for name, clips in splits.items():
        os.makedirs(os.path.join(root, name), exist_ok=True)
        files = []
        for i, clip in enumerate(clips):
            rel = os.path.join(name, f"clip_{i:04d}.mclip")
            save_clip(clip, os.path.join(root, rel))
            files.append(rel)
        manifest["splits"][name] = files
        if clips:
            manifest["skeleton_hash"] = clips[0].skel_hash
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(root) -> dict:
    import os

    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    return {
        name: [load_clip(os.path.join(root, rel)) for rel in files]
        for name, files in manifest["splits"].items()
    }


def sample_training_window(clips, rng, length: int = 10):
    """Uniform clip, uniform admissible offset; returns (states, contacts, beta)."""
    if not clips:
        raise ValueError("no clips to sample from")
    idx = int(rng.integers(len(clips)))
    clip = clips[idx]
    if clip.num_frames < length:
        raise ValueError(f"clip has {clip.num_frames} frames, window needs {length}")
    start = int(rng.integers(clip.num_frames - length + 1))
    return (
        clip.states[start : start + length],
        clip.contacts[start : start + length],
        clip.beta,
    )
