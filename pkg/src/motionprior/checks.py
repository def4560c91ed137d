"""Numerical gradient verification for every differentiable building block.

Each named factory builds a randomly parameterized scalar function around
one operation (forward kinematics, the three model heads, the mixture
log-likelihood, the seven fitting energy terms, a 5-step rollout) and the
runner compares its reported gradient against central differences.
Forward kinematics and the low-dimensional terms are checked coordinate
by coordinate; the model heads, the composite energies and the rollout,
whose inputs run to hundreds of coordinates, are checked along random
low-dimensional affine slices, which probes the same chain rule at a
fraction of the cost.
"""

from dataclasses import dataclass

import numpy as np
import torch

from . import fitting as ft
from . import state as st
from .data import generate_synthetic
from .diffcore import grad_check, torch_diff_function
from .gmm import InitGmm, gmm_log_likelihood
from .kinematics import (
    SHAPE_DIM,
    default_skeleton,
    fk_state_pose,
    forward_kinematics,
    skeleton_hash,
)
from .model import LATENT_DIM, CvaeModel
from .transforms import as_tensor

DEFAULT_TOL = 1e-4
ROLLOUT_TOL = 1e-3  # error compounds across sequential steps
SLICE_DIM = 24


@dataclass
class CheckResult:
    name: str
    instance: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


class CheckContext:
    """Shared fixtures: a small perturbed model, a random mixture, real states."""

    def __init__(self, width: int = 32, groups: int = 2, seed: int = 0,
                 model: CvaeModel | None = None, gmm: InitGmm | None = None):
        self.skeleton = default_skeleton()
        if model is None:
            model = CvaeModel(width=width, groups=groups, seed=seed,
                              skel_hash=skeleton_hash(self.skeleton))
            gen = torch.Generator().manual_seed(seed + 1)
            with torch.no_grad():
                for head in (model.prior.head, model.encoder.head,
                             model.decoder.layers[-1]):
                    head.weight.add_(0.01 * torch.randn(head.weight.shape,
                                                        generator=gen, dtype=torch.float64))
                    head.bias.add_(0.01 * torch.randn(head.bias.shape,
                                                      generator=gen, dtype=torch.float64))
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model
        if gmm is None:
            rng = np.random.default_rng(seed + 2)
            k, d = 2, st.INIT_VECTOR_DIM
            chols = np.tile(np.eye(d) * 0.7, (k, 1, 1))
            chols += 0.05 * np.tril(rng.normal(size=(k, d, d)), -1)
            gmm = InitGmm(weights=np.full(k, 0.5), means=rng.normal(0, 0.3, (k, d)),
                          chols=chols)
        self.gmm = gmm
        clip = generate_synthetic("walk_cycle", 2.0, seed=seed, skeleton=self.skeleton)
        self.states = clip.states
        self.beta = clip.beta

    def frames(self, rng: np.random.Generator, count: int, noise: float = 0.03):
        idx = rng.integers(0, self.states.shape[0] - count)
        block = self.states[idx : idx + count].clone()
        return block + as_tensor(rng.normal(0.0, noise, size=tuple(block.shape)))


def _weights_like(rng: np.random.Generator, *shapes):
    """Fixed random read-out weights, drawn once per check instance."""
    return [as_tensor(rng.normal(size=shape)) for shape in shapes]


def _wsum(weights, *tensors) -> torch.Tensor:
    total = torch.zeros((), dtype=torch.float64)
    for w, t in zip(weights, tensors):
        total = total + (w * t).sum()
    return total


def _slice_fn(fn, center: np.ndarray, rng: np.random.Generator, dim: int = SLICE_DIM,
              scale: float = 0.02):
    """Restrict fn to a random affine slice through ``center``."""
    basis = as_tensor(rng.normal(size=(center.size, dim)) * scale)
    center_t = as_tensor(center)

    def sliced(u):
        return fn(center_t + basis @ u)

    return torch_diff_function(sliced, dim)


# ---------------------------------------------------------------------------
# factories: name -> (ctx, rng) -> DiffFunction
# ---------------------------------------------------------------------------


def _check_fk(ctx: CheckContext, rng):
    frame = ctx.frames(rng, 1)[0]
    x0 = np.concatenate(
        [frame[st.ROOT_POS].numpy(), frame[st.ROOT_ORIENT].numpy(),
         frame[st.JOINT_ROTS].numpy(), ctx.beta.numpy()]
    )
    n_markers = len(ctx.skeleton.marker_names)
    weights = _weights_like(rng, (st.NUM_JOINTS, 3), (n_markers, 3))

    def fn(flat):
        joints, markers = forward_kinematics(
            ctx.skeleton, flat[0:3], flat[3:6],
            flat[6:69].reshape(st.NUM_BODY_ROTS, 3), flat[69:], with_markers=True
        )
        return _wsum(weights, joints, markers)

    return torch_diff_function(fn, x0.size), x0


def _check_encoder(ctx: CheckContext, rng):
    center = ctx.frames(rng, 2).numpy().ravel()
    weights = _weights_like(rng, (LATENT_DIM,), (LATENT_DIM,))

    def fn(flat):
        prev = flat[: st.STATE_DIM]
        nxt = flat[st.STATE_DIM :]
        q = ctx.model.encode(nxt, prev)
        return _wsum(weights, q.mu, q.log_sigma)

    return _slice_fn(fn, center, rng), None


def _check_prior(ctx: CheckContext, rng):
    center = ctx.frames(rng, 1)[0].numpy()
    weights = _weights_like(rng, (LATENT_DIM,), (LATENT_DIM,))

    def fn(flat):
        p = ctx.model.conditional_prior(flat)
        return _wsum(weights, p.mu, p.log_sigma)

    return _slice_fn(fn, center, rng), None


def _check_decoder(ctx: CheckContext, rng):
    prev = ctx.frames(rng, 1)[0]
    center = np.concatenate([rng.normal(0, 0.5, LATENT_DIM), prev.numpy()])
    weights = _weights_like(rng, (st.STATE_DIM,), (8,))

    def fn(flat):
        out = ctx.model.decode(flat[:LATENT_DIM], flat[LATENT_DIM:])
        return _wsum(weights, out.next_state, out.contact_probs)

    return _slice_fn(fn, center, rng), None


def _check_gmm(ctx: CheckContext, rng):
    x0 = rng.normal(0, 0.5, ctx.gmm.dim)

    def fn(flat):
        return gmm_log_likelihood(ctx.gmm, flat)

    return torch_diff_function(fn, x0.size), x0


def _data_obs(ctx: CheckContext, rng, states):
    variant = ("joints3d", "keypoints3d", "joints2d", "pointcloud")[int(rng.integers(4))]
    camera = None
    if variant == "joints3d":
        obs = ft.joints3d_from_states(states)
        obs = ft.add_noise(obs, 0.02, rng)
    elif variant == "keypoints3d":
        obs = ft.add_noise(ft.keypoints3d_from_states(states, ctx.beta, ctx.skeleton), 0.02, rng)
    elif variant == "joints2d":
        camera = ft.Camera.looking_at_origin()
        px = camera.project(states[:, st.JOINT_POS].reshape(-1, st.NUM_JOINTS, 3))
        px = px + as_tensor(rng.normal(0, 2.0, size=tuple(px.shape)))
        conf = as_tensor(rng.uniform(0.2, 1.0, size=tuple(px.shape[:2])))
        conf[0, :] = 1.0
        obs = ft.Observation("joints2d", px, confidence=conf)
    else:
        joints = states[:, st.JOINT_POS].reshape(-1, st.NUM_JOINTS, 3)
        pts = [joints[t] + as_tensor(rng.normal(0, 0.02, size=(st.NUM_JOINTS, 3)))
               for t in range(states.shape[0])]
        obs = ft.Observation("pointcloud", pts)
    return obs, camera


def _check_e_data(ctx: CheckContext, rng):
    states = ctx.frames(rng, 2)
    obs, camera = _data_obs(ctx, rng, states)
    w = ft.EnergyWeights()
    center = np.concatenate([states.numpy().ravel(), ctx.beta.numpy()])
    pc_w = None
    if obs.variant == "pointcloud":
        # pin the reweighting at the center; the recomputed weights are
        # detached, so finite differences must not see them move
        with torch.no_grad():
            joints, markers = fk_state_pose(ctx.skeleton, states, ctx.beta,
                                            with_markers=True)
            body = torch.cat([joints, markers], dim=1)
            min_d2 = torch.cat(
                [(torch.cdist(obs.values[t], body[t]) ** 2).min(dim=1).values
                 for t in range(2)]
            )
            pc_w = ft.chamfer_weights(torch.sqrt(min_d2 + 1e-18))

    def fn(flat):
        s = flat[: 2 * st.STATE_DIM].reshape(2, st.STATE_DIM)
        return ft.energy_data(obs, camera, s, flat[2 * st.STATE_DIM :], ctx.skeleton, w,
                              pc_weights=pc_w)

    return _slice_fn(fn, center, rng), None


def _check_e_cvae(ctx: CheckContext, rng):
    x0s = ctx.frames(rng, 1)[0]
    w = ft.EnergyWeights(lam_cvae=1.0, lam_init=0.0)
    center = np.concatenate(
        [x0s.numpy(), rng.normal(0, 0.4, 2 * LATENT_DIM), [0.01, -0.01, 1.0]]
    )

    def fn(flat):
        return ft.energy_motion(
            ctx.model, ctx.gmm, flat[: st.STATE_DIM],
            flat[st.STATE_DIM : st.STATE_DIM + 2 * LATENT_DIM].reshape(2, LATENT_DIM),
            flat[st.STATE_DIM + 2 * LATENT_DIM :], w,
        )

    return _slice_fn(fn, center, rng), None


def _check_e_init(ctx: CheckContext, rng):
    x0s = ctx.frames(rng, 1)[0]
    w = ft.EnergyWeights(lam_cvae=0.0, lam_init=1.0)
    center = np.concatenate([x0s.numpy(), [0.02, 0.01, 1.0]])

    def fn(flat):
        return ft.energy_motion(ctx.model, ctx.gmm, flat[: st.STATE_DIM],
                                torch.zeros(0, LATENT_DIM, dtype=torch.float64),
                                flat[st.STATE_DIM :], w)

    return _slice_fn(fn, center, rng), None


def _check_e_skel(ctx: CheckContext, rng):
    states = ctx.frames(rng, 2)
    w = ft.EnergyWeights(lam_cv=0.0, lam_ch=0.0, lam_shape=0.0, lam_gnd=0.0)
    g = torch.zeros(3, dtype=torch.float64)
    center = np.concatenate([states.numpy().ravel(), ctx.beta.numpy()])

    def fn(flat):
        s = flat[: 2 * st.STATE_DIM].reshape(2, st.STATE_DIM)
        return ft.energy_regularizers(s, None, ctx.skeleton, g,
                                      flat[2 * st.STATE_DIM :], g, w)

    return _slice_fn(fn, center, rng), None


def _check_e_env(ctx: CheckContext, rng):
    states = ctx.frames(rng, 2)
    probs = as_tensor(rng.uniform(0.1, 1.0, size=(1, 8)))
    w = ft.EnergyWeights(lam_c=0.0, lam_b=0.0, lam_shape=0.0, lam_gnd=0.0)
    center = np.concatenate([states.numpy().ravel(), [0.015, -0.02, 0.97]])

    def fn(flat):
        s = flat[: 2 * st.STATE_DIM].reshape(2, st.STATE_DIM)
        return ft.energy_regularizers(s, probs, ctx.skeleton,
                                      flat[2 * st.STATE_DIM :], ctx.beta,
                                      torch.zeros(3, dtype=torch.float64), w)

    return _slice_fn(fn, center, rng), None


def _check_e_gnd(ctx: CheckContext, rng):
    w = ft.EnergyWeights(lam_c=0.0, lam_b=0.0, lam_cv=0.0, lam_ch=0.0,
                         lam_shape=0.0, lam_gnd=1.0)
    states = ctx.frames(rng, 2)
    gi = as_tensor(rng.normal(0, 0.2, 3))
    x0 = rng.normal(0, 0.3, 3) + np.array([0.0, 0.0, 1.0])

    def fn(flat):
        return ft.energy_regularizers(states, None, ctx.skeleton, flat, ctx.beta, gi, w)

    return torch_diff_function(fn, 3), x0


def _check_e_shape(ctx: CheckContext, rng):
    w = ft.EnergyWeights(lam_c=0.0, lam_b=0.0, lam_cv=0.0, lam_ch=0.0,
                         lam_shape=0.015, lam_gnd=0.0)
    states = ctx.frames(rng, 2)
    g = torch.zeros(3, dtype=torch.float64)
    x0 = rng.normal(0, 0.5, SHAPE_DIM)

    def fn(flat):
        return ft.energy_regularizers(states, None, ctx.skeleton, g, flat, g, w)

    return torch_diff_function(fn, SHAPE_DIM), x0


def _check_rollout(ctx: CheckContext, rng):
    t_steps = 5
    x0s = ctx.frames(rng, 1)[0]
    center = np.concatenate(
        [ft.x0_from_state(x0s).numpy(), rng.normal(0, 0.4, t_steps * LATENT_DIM),
         ctx.beta.numpy()]
    )
    weights = _weights_like(rng, (t_steps, st.STATE_DIM), (t_steps, 8))

    def fn(flat):
        x0 = ft.materialize_x0(flat[: ft.X0_DIM], flat[ft.X0_DIM + t_steps * LATENT_DIM :],
                               ctx.skeleton)
        z = flat[ft.X0_DIM : ft.X0_DIM + t_steps * LATENT_DIM].reshape(t_steps, LATENT_DIM)
        states, contacts = ctx.model.rollout(x0, z)
        return _wsum(weights, states, contacts)

    return _slice_fn(fn, center, rng), None


CHECKS = {
    "fk": (_check_fk, DEFAULT_TOL),
    "encoder": (_check_encoder, DEFAULT_TOL),
    "prior": (_check_prior, DEFAULT_TOL),
    "decoder": (_check_decoder, DEFAULT_TOL),
    "gmm_loglik": (_check_gmm, DEFAULT_TOL),
    "e_data": (_check_e_data, DEFAULT_TOL),
    "e_cvae": (_check_e_cvae, ROLLOUT_TOL),
    "e_init": (_check_e_init, DEFAULT_TOL),
    "e_skel": (_check_e_skel, DEFAULT_TOL),
    "e_env": (_check_e_env, DEFAULT_TOL),
    "e_gnd": (_check_e_gnd, DEFAULT_TOL),
    "e_shape": (_check_e_shape, DEFAULT_TOL),
    "rollout": (_check_rollout, ROLLOUT_TOL),
}


def run_checks(ctx: CheckContext | None = None, names=None, instances: int = 20,
               seed: int = 0) -> list:
    """Gradient-check every named operation on fresh random instances."""
    ctx = ctx if ctx is not None else CheckContext(seed=seed)
    results = []
    for name in names if names is not None else CHECKS:
        factory, tol = CHECKS[name]
        for i in range(instances):
            rng = np.random.default_rng(seed * 100003 + hash(name) % 65536 + i)
            fn, x0 = factory(ctx, rng)
            x = np.zeros(fn.size) if x0 is None else np.asarray(x0, dtype=np.float64)
            err = grad_check(fn, x)
            results.append(CheckResult(name, i, float(err), tol))
    return results
