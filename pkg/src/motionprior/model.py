"""Conditional VAE over single-frame motion transitions.

Given the previous state x_prev, a 48-dim latent z is drawn from a
learned conditional Gaussian prior, and a decoder turns (z, x_prev) into
an additive state change plus 8 contact probabilities. Every network
sees states in the canonical frame of x_prev (root over the origin,
body-right along +x), so the public operations are equivariant to yaw
and horizontal translation. Positions and velocities update additively;
orientations update by composing the predicted axis-angle delta on the
left: R_next = exp(delta) R_prev.
"""

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import state as st
from .transforms import DTYPE, as_tensor, axis_angle_to_matrix, matrix_to_axis_angle

LATENT_DIM = 48
NUM_CONTACTS = 8
# r(3) r_dot(3) phi->matrix(9) phi_dot(3) theta->matrices(189) joints(66) joints_dot(66)
FEATURE_DIM = 339
DECODER_OUT = st.STATE_DIM + NUM_CONTACTS

LOG_SIGMA_MIN = -8.0
LOG_SIGMA_MAX = 4.0

MAGIC = b"MPRCVAE\x00"
VERSION = 1
HEADER_BYTES = 64


class RolloutDivergenceError(RuntimeError):
    """A rollout produced a non-finite state; ``step`` is the 1-based transition."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite state at rollout step {step}")


class GaussianDiag:
    """Diagonal Gaussian given by mean and log standard deviation."""

    __slots__ = ("mu", "log_sigma")

    def __init__(self, mu: torch.Tensor, log_sigma: torch.Tensor):
        if mu.shape != log_sigma.shape:
            raise ValueError("mu and log_sigma shapes differ")
        self.mu = mu
        self.log_sigma = log_sigma

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mu.shape, generator=generator, dtype=self.mu.dtype)
        return self.mu + self.sigma * eps

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Log density, summed over the last axis."""
        z = (x - self.mu) * torch.exp(-self.log_sigma)
        per = -0.5 * z**2 - self.log_sigma - 0.5 * math.log(2.0 * math.pi)
        return per.sum(dim=-1)


@dataclass
class DecoderOutput:
    delta: torch.Tensor  # (..., 207) state change in the canonical frame
    contact_probs: torch.Tensor  # (..., 8)
    next_state: torch.Tensor  # (..., 207) in the original frame of x_prev


def state_features(flat: torch.Tensor) -> torch.Tensor:
    """Network input map: rotations enter as flattened 3x3 matrices."""
    flat = as_tensor(flat)
    if flat.shape[-1] != st.STATE_DIM:
        raise ValueError(f"expected {st.STATE_DIM} state scalars, got {flat.shape[-1]}")
    lead = flat.shape[:-1]
    phi_mat = axis_angle_to_matrix(flat[..., st.ROOT_ORIENT]).reshape(*lead, 9)
    theta = flat[..., st.JOINT_ROTS].reshape(*lead, st.NUM_BODY_ROTS, 3)
    theta_mat = axis_angle_to_matrix(theta).reshape(*lead, st.NUM_BODY_ROTS * 9)
    return torch.cat(
        [
            flat[..., st.ROOT_POS],
            flat[..., st.ROOT_VEL],
            phi_mat,
            flat[..., st.ROOT_ANG_VEL],
            theta_mat,
            flat[..., st.JOINT_POS],
            flat[..., st.JOINT_VEL],
        ],
        dim=-1,
    )


def apply_delta(prev_flat: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """x_next from x_prev and a 207-dim change, both in one frame.

    Positions and velocities add; root and joint orientations compose
    their axis-angle deltas on the left and stay on the principal branch.
    """
    prev_flat = as_tensor(prev_flat)
    delta = as_tensor(delta)
    lead = prev_flat.shape[:-1]

    def compose(d_aa, p_aa):
        return matrix_to_axis_angle(axis_angle_to_matrix(d_aa) @ axis_angle_to_matrix(p_aa))

    phi = compose(delta[..., st.ROOT_ORIENT], prev_flat[..., st.ROOT_ORIENT])
    theta = compose(
        delta[..., st.JOINT_ROTS].reshape(*lead, st.NUM_BODY_ROTS, 3),
        prev_flat[..., st.JOINT_ROTS].reshape(*lead, st.NUM_BODY_ROTS, 3),
    ).reshape(*lead, st.NUM_BODY_ROTS * 3)
    return torch.cat(
        [
            prev_flat[..., st.ROOT_POS] + delta[..., st.ROOT_POS],
            prev_flat[..., st.ROOT_VEL] + delta[..., st.ROOT_VEL],
            phi,
            prev_flat[..., st.ROOT_ANG_VEL] + delta[..., st.ROOT_ANG_VEL],
            theta,
            prev_flat[..., st.JOINT_POS] + delta[..., st.JOINT_POS],
            prev_flat[..., st.JOINT_VEL] + delta[..., st.JOINT_VEL],
        ],
        dim=-1,
    )


def _init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    # the stock Linear init, but drawn from an explicit generator
    bound = 1.0 / math.sqrt(layer.weight.shape[1])
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)


class _GaussianMlp(nn.Module):
    """5 linear layers -> (mu, log_sigma) head; GroupNorm+ReLU between layers."""

    def __init__(self, in_dim: int, width: int, out_dim: int, groups: int):
        super().__init__()
        dims = [in_dim, width, width, width, width]
        self.hidden = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1], dtype=DTYPE) for i in range(4)
        )
        self.norms = nn.ModuleList(nn.GroupNorm(groups, width, dtype=DTYPE) for _ in range(4))
        self.head = nn.Linear(width, 2 * out_dim, dtype=DTYPE)
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> GaussianDiag:
        lead = x.shape[:-1]
        h = x.reshape(-1, x.shape[-1])  # GroupNorm wants an explicit batch axis
        for lin, norm in zip(self.hidden, self.norms):
            h = torch.relu(norm(lin(h)))
        out = self.head(h).reshape(*lead, 2 * self.out_dim)
        mu, log_sigma = out[..., : self.out_dim], out[..., self.out_dim :]
        return GaussianDiag(mu, torch.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX))


class _Decoder(nn.Module):
    """4 linear layers, hiddens (h, h, h/2), z concatenated into every layer."""

    def __init__(self, cond_dim: int, width: int, out_dim: int, groups: int):
        super().__init__()
        half = width // 2
        self.layers = nn.ModuleList(
            [
                nn.Linear(cond_dim + LATENT_DIM, width, dtype=DTYPE),
                nn.Linear(width + LATENT_DIM, width, dtype=DTYPE),
                nn.Linear(width + LATENT_DIM, half, dtype=DTYPE),
                nn.Linear(half + LATENT_DIM, out_dim, dtype=DTYPE),
            ]
        )
        self.norms = nn.ModuleList(
            [
                nn.GroupNorm(groups, width, dtype=DTYPE),
                nn.GroupNorm(groups, width, dtype=DTYPE),
                nn.GroupNorm(groups, half, dtype=DTYPE),
            ]
        )

    def forward(self, z: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        lead = torch.broadcast_shapes(z.shape[:-1], cond.shape[:-1])
        zf = z.expand(*lead, z.shape[-1]).reshape(-1, z.shape[-1])
        h = cond.expand(*lead, cond.shape[-1]).reshape(-1, cond.shape[-1])
        for i, lin in enumerate(self.layers):
            h = lin(torch.cat([h, zf], dim=-1))
            if i < len(self.norms):
                h = torch.relu(self.norms[i](h))
        return h.reshape(*lead, -1)


class CvaeModel(nn.Module):
    """Transition model with encoder, conditional prior, and delta decoder.

    ``width`` is the hidden size (256 at desk scale, 1024 at reference
    scale); it must be divisible by 2*groups so GroupNorm tiles every
    hidden layer evenly. Final layers start at zero: the prior is a unit
    Gaussian, the decoder an identity step with contact probability 0.5.
    """

    def __init__(self, width: int = 256, groups: int = 16, seed: int = 0, skel_hash: str = ""):
        super().__init__()
        if width % (2 * groups) != 0:
            raise ValueError(f"width {width} not divisible by 2*{groups} groups")
        self.width = width
        self.groups = groups
        self.skel_hash = skel_hash
        self.train_meta: dict = {}
        self.encoder = _GaussianMlp(2 * FEATURE_DIM, width, LATENT_DIM, groups)
        self.prior = _GaussianMlp(FEATURE_DIM, width, LATENT_DIM, groups)
        self.decoder = _Decoder(FEATURE_DIM, width, DECODER_OUT, groups)

        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                _init_linear(module, gen)
        for head in (self.encoder.head, self.prior.head, self.decoder.layers[-1]):
            with torch.no_grad():
                head.weight.zero_()
                head.bias.zero_()

    # canonical-frame cores ------------------------------------------------

    def encode_canonical(self, next_canon: torch.Tensor, prev_canon: torch.Tensor) -> GaussianDiag:
        return self.encoder(
            torch.cat([state_features(prev_canon), state_features(next_canon)], dim=-1)
        )

    def prior_canonical(self, prev_canon: torch.Tensor) -> GaussianDiag:
        return self.prior(state_features(prev_canon))

    def decode_canonical(self, z: torch.Tensor, prev_canon: torch.Tensor):
        """Raw decoder outputs: (delta 207, contact logits 8)."""
        if z.shape[-1] != LATENT_DIM:
            raise ValueError(f"latent must have {LATENT_DIM} dims, got {z.shape[-1]}")
        out = self.decoder(z, state_features(prev_canon))
        return out[..., : st.STATE_DIM], out[..., st.STATE_DIM :]

    # public frame-free operations ------------------------------------------

    def encode(self, x_next: torch.Tensor, x_prev: torch.Tensor) -> GaussianDiag:
        """Posterior over z for an observed transition, any world frame."""
        prev_canon, tf = st.canonicalize(as_tensor(x_prev))
        next_canon = st.transform_state(as_tensor(x_next), tf)
        return self.encode_canonical(next_canon, prev_canon)

    def conditional_prior(self, x_prev: torch.Tensor) -> GaussianDiag:
        prev_canon, _ = st.canonicalize(as_tensor(x_prev))
        return self.prior_canonical(prev_canon)

    def decode(self, z: torch.Tensor, x_prev: torch.Tensor) -> DecoderOutput:
        prev_canon, tf = st.canonicalize(as_tensor(x_prev))
        delta, logits = self.decode_canonical(z, prev_canon)
        next_canon = apply_delta(prev_canon, delta)
        return DecoderOutput(
            delta=delta,
            contact_probs=torch.sigmoid(logits),
            next_state=st.untransform_state(next_canon, tf),
        )

    def step(self, x_prev: torch.Tensor, z: torch.Tensor):
        out = self.decode(z, x_prev)
        return out.next_state, out.contact_probs

    def sample_transition(self, x_prev: torch.Tensor, generator: torch.Generator | None = None):
        """Draw z from the conditional prior, decode. Returns (x_next, contacts, z)."""
        z = self.conditional_prior(x_prev).sample(generator)
        x_next, contacts = self.step(x_prev, z)
        return x_next, contacts, z

    def rollout(self, x0: torch.Tensor, z_seq: torch.Tensor):
        """Deterministic unroll x_t = step(x_{t-1}, z_t) for t = 1..T.

        ``z_seq`` is (T, ..., 48); returns states (T, ..., 207) and
        contact probabilities (T, ..., 8). T=0 yields empty tensors.
        """
        x0 = as_tensor(x0)
        z_seq = as_tensor(z_seq)
        if z_seq.numel() and z_seq.shape[-1] != LATENT_DIM:
            raise ValueError(f"latent must have {LATENT_DIM} dims, got {z_seq.shape[-1]}")
        states, contacts = [], []
        x = x0
        for t in range(z_seq.shape[0]):
            x, c = self.step(x, z_seq[t])
            if not bool(torch.isfinite(x).all()):
                raise RolloutDivergenceError(t + 1)
            states.append(x)
            contacts.append(c)
        if not states:
            return (
                torch.zeros(0, *x0.shape, dtype=x0.dtype),
                torch.zeros(0, *x0.shape[:-1], NUM_CONTACTS, dtype=x0.dtype),
            )
        return torch.stack(states), torch.stack(contacts)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------


def save_model(model: CvaeModel, path, meta: dict | None = None) -> None:
    segments = [[name, list(p.shape)] for name, p in model.named_parameters()]
    header = {
        "width": model.width,
        "groups": model.groups,
        "latent_dim": LATENT_DIM,
        "skeleton_hash": model.skel_hash,
        "segments": segments,
        "meta": meta or {},
    }
    blob = json.dumps(header).encode()
    payload = b"".join(
        p.detach().numpy().astype("<f4").tobytes() for _, p in model.named_parameters()
    )
    with open(path, "wb") as f:
        head = MAGIC + struct.pack("<II", VERSION, len(blob))
        f.write(head.ljust(HEADER_BYTES, b"\x00"))
        f.write(blob)
        f.write(payload)


def load_model(path) -> CvaeModel:
    with open(path, "rb") as f:
        head = f.read(HEADER_BYTES)
        if len(head) < HEADER_BYTES or head[:8] != MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, blob_len = struct.unpack("<II", head[8:16])
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(blob_len).decode())
        payload = f.read()
    model = CvaeModel(
        width=int(header["width"]),
        groups=int(header["groups"]),
        skel_hash=header.get("skeleton_hash", ""),
    )
    params = dict(model.named_parameters())
    declared = [name for name, _ in header["segments"]]
    if sorted(declared) != sorted(params):
        raise ValueError(f"{path}: segment names do not match the architecture")
    sizes = [int(np.prod(shape)) for _, shape in header["segments"]]
    if len(payload) != 4 * sum(sizes):
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes, header promises {4 * sum(sizes)}"
        )
    offset = 0
    with torch.no_grad():
        for (name, shape), size in zip(header["segments"], sizes):
            if list(params[name].shape) != list(shape):
                raise ValueError(f"{path}: segment {name} has shape {shape}, expected "
                                 f"{list(params[name].shape)}")
            chunk = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
            params[name].copy_(torch.as_tensor(chunk.astype(np.float64)).reshape(shape))
            offset += 4 * size
    model.train_meta = header.get("meta", {})
    return model
