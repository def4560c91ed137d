"""Losses, schedules, and the weight-update loop for the transition CVAE.

Training is teacher-forced per transition with a scheduled-sampling
curriculum: each input state is either the ground-truth previous frame or
the model's own (detached) prediction, chosen per sample and per timestep.
All losses are computed in the canonical frame of each transition and
averaged over both feature and batch dimensions.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from . import state as st
from .data import sample_training_window
from .diffcore import adamax_step
from .kinematics import default_skeleton, fk_state_pose
from .model import LATENT_DIM, GaussianDiag, apply_delta

log = logging.getLogger(__name__)


def kl_diag_gaussians(q: GaussianDiag, p: GaussianDiag) -> torch.Tensor:
    """Closed-form KL(q || p) per sample, summed over the trailing axis.

    Both arguments are diagonal Gaussians over the same dimension; the
    result is non-negative and zero iff the distributions match.
    """
    if q.mu.shape[-1] != p.mu.shape[-1]:
        raise ValueError(
            f"KL dimension mismatch: {q.mu.shape[-1]} vs {p.mu.shape[-1]}"
        )
    var_q = torch.exp(2.0 * q.log_sigma)
    var_p = torch.exp(2.0 * p.log_sigma)
    per_dim = (
        p.log_sigma
        - q.log_sigma
        + 0.5 * (var_q + (q.mu - p.mu) ** 2) / var_p
        - 0.5
    )
    return per_dim.sum(dim=-1)


def reconstruction_loss(x_true: torch.Tensor, x_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every state scalar and every batch element."""
    if x_true.shape != x_pred.shape:
        raise ValueError(f"shape mismatch: {tuple(x_true.shape)} vs {tuple(x_pred.shape)}")
    return ((x_pred - x_true) ** 2).mean()


class RegLosses(NamedTuple):
    joint: torch.Tensor
    consist: torch.Tensor
    marker: torch.Tensor
    bce: torch.Tensor
    vel: torch.Tensor


def regularizer_losses(
    x_pred: torch.Tensor,
    contact_logits: torch.Tensor,
    x_true: torch.Tensor,
    contacts_true: torch.Tensor,
    beta: torch.Tensor,
    skeleton=None,
) -> RegLosses:
    """Skeleton-consistency and contact regularizers for predicted states.

    joint   mean squared error between joint positions from forward
            kinematics of the true pose and of the predicted pose
    consist mean squared error between the predicted state's joint-position
            field and forward kinematics of its own pose
    marker  mean squared error between surface marker positions from the
            true and predicted poses
    bce     binary cross entropy of predicted contact logits vs labels
    vel     per contact joint, predicted contact probability times squared
            speed of that joint, summed over the 8 contacts

    x_pred/x_true are flat states (..., 207); beta broadcasts (..., 16) or
    (16,). Positional terms average over feature and batch axes; vel sums
    over contacts and averages over the batch only.
    """
    skel = skeleton if skeleton is not None else default_skeleton()
    lead = x_pred.shape[:-1]
    probs = torch.sigmoid(contact_logits)

    fk_pred, mk_pred = fk_state_pose(skel, x_pred, beta, with_markers=True)
    with torch.no_grad():
        fk_true, mk_true = fk_state_pose(skel, x_true, beta, with_markers=True)

    joint = ((fk_pred - fk_true) ** 2).mean()
    own_joints = x_pred[..., st.JOINT_POS].reshape(*lead, st.NUM_JOINTS, 3)
    consist = ((own_joints - fk_pred) ** 2).mean()
    marker = ((mk_pred - mk_true) ** 2).mean()
    bce = F.binary_cross_entropy_with_logits(contact_logits, contacts_true)

    vel = x_pred[..., st.JOINT_VEL].reshape(*lead, st.NUM_JOINTS, 3)
    contact_vel = vel[..., skel.contact_joint_ids, :]
    per_joint = probs * (contact_vel**2).sum(dim=-1)  # (..., 8)
    vel_loss = per_joint.sum(dim=-1).mean()
    return RegLosses(joint, consist, marker, bce, vel_loss)


@dataclass(frozen=True)
class LossWeights:
    """Loss-term weights with per-term enable switches."""

    w_kl: float = 4e-4
    w_contact: float = 0.01
    use_joint: bool = True
    use_consist: bool = True
    use_marker: bool = True
    use_bce: bool = True
    use_vel: bool = True

    def __post_init__(self):
        if self.w_kl < 0 or self.w_contact < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def any_fk(self) -> bool:
        return self.use_joint or self.use_consist or self.use_marker

    @property
    def any_reg(self) -> bool:
        return self.any_fk or self.use_bce or self.use_vel

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass(frozen=True)
class TrainSchedule:
    """Epoch counts, learning-rate stages, KL anneal, sampling curriculum.

    lr_stages lists (epoch_boundary, lr) pairs with strictly increasing
    boundaries; the base lr applies before the first boundary. The KL
    weight ramps linearly from 0 to its full value over kl_anneal_epochs.
    The sampling curriculum runs supervised_epochs of pure teacher forcing,
    then mixed_epochs blending toward self-rollout, then pure self inputs.
    """

    epochs: int = 200
    windows_per_epoch: int = 2000
    batch_size: int = 64
    window_len: int = 10
    lr: float = 1e-4
    lr_stages: tuple = ((50, 5e-5), (80, 2.5e-5), (140, 1.25e-5))
    kl_anneal_epochs: int = 50
    supervised_epochs: int = 10
    mixed_epochs: int = 10
    val_windows: int = 128

    def __post_init__(self):
        if min(self.epochs, self.windows_per_epoch, self.batch_size) < 1:
            raise ValueError("epochs, windows_per_epoch, batch_size must be >= 1")
        if self.window_len < 2:
            raise ValueError("windows need at least one transition")
        if self.lr < 0:
            raise ValueError("negative learning rate")
        if self.kl_anneal_epochs < 0 or self.supervised_epochs < 0 or self.mixed_epochs < 0:
            raise ValueError("negative schedule spans")
        bounds = [b for b, _ in self.lr_stages]
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError("lr stage boundaries must be strictly increasing")
        if any(v < 0 for _, v in self.lr_stages):
            raise ValueError("negative stage learning rate")

    def lr_at(self, epoch: int) -> float:
        out = self.lr
        for boundary, value in self.lr_stages:
            if epoch >= boundary:
                out = value
        return out

    def kl_weight_at(self, epoch: int, w_kl: float) -> float:
        if self.kl_anneal_epochs == 0:
            return w_kl
        return w_kl * min(1.0, epoch / self.kl_anneal_epochs)

    def sampling_prob(self, epoch: int) -> float:
        """P(use ground-truth input): 1 supervised, (0,1) mixed, 0 after."""
        if epoch < self.supervised_epochs:
            return 1.0
        i = epoch - self.supervised_epochs
        if i < self.mixed_epochs:
            return 1.0 - (i + 1) / (self.mixed_epochs + 1)
        return 0.0

    @classmethod
    def desk(cls) -> "TrainSchedule":
        """Small-machine run: 30 epochs with proportionally scaled stages."""
        return cls(
            epochs=30,
            windows_per_epoch=2000,
            batch_size=64,
            lr_stages=((8, 5e-5), (16, 2.5e-5), (24, 1.25e-5)),
            kl_anneal_epochs=15,
            supervised_epochs=10,
            mixed_epochs=10,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_stages"] = [list(s) for s in self.lr_stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        d = dict(d)
        if "lr_stages" in d:
            d["lr_stages"] = tuple(tuple(s) for s in d["lr_stages"])
        return cls(**d)


TERM_KEYS = ("rec", "kl", "joint", "consist", "marker", "bce", "vel")


def _window_pass(model, states, contacts, betas, skeleton, weights, *, s_prob, gen, rng, sample_z):
    """Run every transition of a window batch; returns per-term means.

    states (B, T, 207), contacts (B, T, 8), betas (B, 16). The returned
    dict holds loss tensors averaged over the T-1 transitions plus the
    contact classification accuracy as a float.
    """
    n_steps = states.shape[1] - 1
    zero = torch.zeros((), dtype=states.dtype)
    sums = {k: zero for k in TERM_KEYS}
    n_correct = 0
    n_labels = 0
    prev = states[:, 0]
    for t in range(1, n_steps + 1):
        true_next = states[:, t]
        prev_canon, tf = st.canonicalize(prev)
        next_canon_true = st.transform_state(true_next, tf)
        q = model.encode_canonical(next_canon_true, prev_canon)
        p = model.prior_canonical(prev_canon)
        z = q.sample(gen) if sample_z else q.mu
        delta, logits = model.decode_canonical(z, prev_canon)
        next_canon_pred = apply_delta(prev_canon, delta)

        sums["rec"] = sums["rec"] + reconstruction_loss(next_canon_true, next_canon_pred)
        sums["kl"] = sums["kl"] + kl_diag_gaussians(q, p).mean() / LATENT_DIM
        if weights.any_reg:
            regs = regularizer_losses(
                next_canon_pred, logits, next_canon_true, contacts[:, t], betas, skeleton
            )
            for key, value in zip(RegLosses._fields, regs):
                if getattr(weights, f"use_{key}"):
                    sums[key] = sums[key] + value
        with torch.no_grad():
            pred_labels = (logits >= 0).to(contacts.dtype)
            n_correct += int((pred_labels == contacts[:, t]).sum())
            n_labels += pred_labels.numel()

        if t <= n_steps - 1:
            if s_prob >= 1.0:
                prev = true_next
            else:
                pred_world = st.untransform_state(next_canon_pred, tf).detach()
                if s_prob <= 0.0:
                    prev = pred_world
                else:
                    keep = torch.as_tensor(rng.random(states.shape[0]) < s_prob)
                    prev = torch.where(keep.unsqueeze(-1), true_next, pred_world)

    out = {k: v / n_steps for k, v in sums.items()}
    out["contact_acc"] = n_correct / max(1, n_labels)
    return out


def _total_loss(terms, weights: LossWeights, kl_weight: float):
    reg = terms["joint"] + terms["consist"] + terms["marker"]
    reg = reg + weights.w_contact * (terms["bce"] + terms["vel"])
    return terms["rec"] + kl_weight * terms["kl"] + reg


def _sample_batch(clips, rng, batch_size, length):
    cols = [sample_training_window(clips, rng, length) for _ in range(batch_size)]
    return (
        torch.stack([c[0] for c in cols]),
        torch.stack([c[1] for c in cols]),
        torch.stack([c[2] for c in cols]),
    )


def _grad_vector(model) -> np.ndarray:
    parts = [
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
        for p in model.parameters()
    ]
    return torch.cat(parts).detach().numpy().astype(np.float64)


def _evaluate(model, windows, skeleton, weights: LossWeights) -> dict:
    """Deterministic validation pass: teacher forced, posterior-mean z."""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        terms = _window_pass(
            model, *windows, skeleton, weights,
            s_prob=1.0, gen=None, rng=None, sample_z=False,
        )
    if was_training:
        model.train()
    out = {k: float(v) for k, v in terms.items()}
    out["total"] = float(_total_loss(terms, weights, weights.w_kl))
    return out


def train_cvae(
    model,
    splits: dict,
    schedule: TrainSchedule | None = None,
    weights: LossWeights | None = None,
    seed: int = 0,
    skeleton=None,
    curves_path=None,
):
    """Fit the CVAE on dataset splits; returns (model, curves).

    Updates use the infinity-norm Adam variant on the flattened parameter
    vector. One curves row is recorded before any update (epoch 0) and one
    after each epoch; the parameters with the best validation
    reconstruction error are restored into the model at the end. A
    non-finite loss or gradient aborts with the epoch and batch named.
    """
    schedule = schedule if schedule is not None else TrainSchedule.desk()
    weights = weights if weights is not None else LossWeights()
    skel = skeleton if skeleton is not None else default_skeleton()
    train_clips = splits.get("train") or []
    val_clips = splits.get("val") or []
    if not train_clips or not val_clips:
        raise ValueError("need non-empty train and val splits")

    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    val_rng = np.random.default_rng((seed + 1) * 7919)
    val_windows = _sample_batch(
        val_clips, val_rng, schedule.val_windows, schedule.window_len
    )

    flat = parameters_to_vector(model.parameters()).detach().numpy().astype(np.float64)
    opt_state: dict = {}
    n_batches = max(1, schedule.windows_per_epoch // schedule.batch_size)

    def record(epoch, train_terms, val_terms):
        row = {"epoch": epoch}
        row["lr"] = schedule.lr_at(epoch - 1) if epoch > 0 else math.nan
        row["sampling_prob"] = schedule.sampling_prob(epoch - 1) if epoch > 0 else math.nan
        row["kl_weight"] = (
            schedule.kl_weight_at(epoch - 1, weights.w_kl) if epoch > 0 else math.nan
        )
        for k in ("total",) + TERM_KEYS:
            row[f"train_{k}"] = train_terms.get(k, math.nan)
        for k in ("total",) + TERM_KEYS + ("contact_acc",):
            row[f"val_{k}"] = val_terms[k]
        return row

    curves = []
    val0 = _evaluate(model, val_windows, skel, weights)
    curves.append(record(0, {}, val0))
    best_val = val0["rec"]
    best_flat = flat.copy()
    best_epoch = 0
    log.info("epoch 0 (untrained): val_rec %.6g acc %.3f", val0["rec"], val0["contact_acc"])

    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        s_prob = schedule.sampling_prob(epoch)
        kl_w = schedule.kl_weight_at(epoch, weights.w_kl)
        acc = {k: 0.0 for k in ("total",) + TERM_KEYS}
        for batch_idx in range(n_batches):
            batch = _sample_batch(
                train_clips, rng, schedule.batch_size, schedule.window_len
            )
            terms = _window_pass(
                model, *batch, skel, weights,
                s_prob=s_prob, gen=gen, rng=rng, sample_z=True,
            )
            total = _total_loss(terms, weights, kl_w)
            if not bool(torch.isfinite(total)):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch + 1}, batch {batch_idx + 1}"
                )
            model.zero_grad(set_to_none=True)
            total.backward()
            grads = _grad_vector(model)
            if not np.isfinite(grads).all():
                raise RuntimeError(
                    f"non-finite gradient at epoch {epoch + 1}, batch {batch_idx + 1}"
                )
            flat, opt_state = adamax_step(flat, grads, opt_state, lr)
            vector_to_parameters(torch.as_tensor(flat), model.parameters())
            acc["total"] += float(total.detach())
            for k in TERM_KEYS:
                acc[k] += float(terms[k].detach()) if torch.is_tensor(terms[k]) else float(terms[k])
        train_terms = {k: v / n_batches for k, v in acc.items()}
        val_terms = _evaluate(model, val_windows, skel, weights)
        curves.append(record(epoch + 1, train_terms, val_terms))
        if val_terms["rec"] < best_val:
            best_val = val_terms["rec"]
            best_flat = flat.copy()
            best_epoch = epoch + 1
        log.info(
            "epoch %d: lr %.3g s %.3f train %.6g val_rec %.6g acc %.3f",
            epoch + 1, lr, s_prob, train_terms["total"],
            val_terms["rec"], val_terms["contact_acc"],
        )

    vector_to_parameters(torch.as_tensor(best_flat), model.parameters())
    model.train_meta.update(
        {
            "schedule": schedule.to_dict(),
            "weights": weights.to_dict(),
            "seed": seed,
            "best_epoch": best_epoch,
            "best_val_rec": best_val,
        }
    )
    if curves_path is not None:
        save_curves(curves, curves_path)
    return model, curves


def save_curves(curves, path) -> None:
    """Write training curves rows to CSV with a stable column order."""
    if not curves:
        raise ValueError("no curves to save")
    fields = list(curves[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(curves)


def load_curves(path) -> list:
    with open(path, newline="") as f:
        return [
            {k: (float(v) if k != "epoch" else int(v)) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]
