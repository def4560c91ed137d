"""Batched rotation utilities (axis-angle <-> matrix) in double precision.

All functions accept tensors whose last dimension(s) hold the rotation and
broadcast over any leading batch dimensions. Everything is differentiable
and stable near the identity; the principal branch (angle <= pi) is used
when extracting axis-angle vectors.
"""

import torch

DTYPE = torch.float64

# Below this angle the Taylor forms of the sin/cos ratios are used.
_SMALL_ANGLE = 1e-8


def axis_angle_to_matrix(aa: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula. aa: (..., 3) -> (..., 3, 3)."""
    angle = aa.norm(dim=-1, keepdim=True)  # (..., 1)
    small = angle < _SMALL_ANGLE
    # Guarded angle keeps the division finite; the small-angle branch wins below.
    safe = torch.where(small, torch.ones_like(angle), angle)
    sin_over = torch.where(small, 1.0 - angle**2 / 6.0, torch.sin(safe) / safe)
    cos_term = torch.where(
        small, 0.5 - angle**2 / 24.0, (1.0 - torch.cos(safe)) / safe**2
    )
    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zeros = torch.zeros_like(x)
    k = torch.stack(
        [
            torch.stack([zeros, -z, y], dim=-1),
            torch.stack([z, zeros, -x], dim=-1),
            torch.stack([-y, x, zeros], dim=-1),
        ],
        dim=-2,
    )  # (..., 3, 3) skew matrix
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(k.shape)
    return eye + sin_over[..., None] * k + cos_term[..., None] * (k @ k)


def matrix_to_axis_angle(rot: torch.Tensor) -> torch.Tensor:
    """Principal-branch log map. rot: (..., 3, 3) -> (..., 3).

    Every branch is guarded at the input of the non-smooth op (acos near
    +-1, sqrt at 0) so that torch.where never mixes a NaN from the branch
    that was not selected into the backward pass.
    """
    trace = rot[..., 0, 0] + rot[..., 1, 1] + rot[..., 2, 2]
    cos = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0)
    # Skew part gives axis * 2 sin(angle).
    sk = torch.stack(
        [
            rot[..., 2, 1] - rot[..., 1, 2],
            rot[..., 0, 2] - rot[..., 2, 0],
            rot[..., 1, 0] - rot[..., 0, 1],
        ],
        dim=-1,
    )
    u = 1.0 - cos  # in [0, 2]; u = angle^2/2 + O(angle^4)
    small = u < 1e-6
    near_pi = cos < -0.999999995  # angle > pi - 1e-4
    # angle/(2 sin angle) as an analytic function of u near the identity
    safe_cos = torch.where(small, torch.zeros_like(cos), cos.clamp_min(-1.0 + 1e-12))
    angle_big = torch.acos(safe_cos)
    scale = torch.where(
        small,
        0.5 + u / 6.0 + u * u / 15.0,
        angle_big / (2.0 * torch.sin(angle_big)),
    )
    aa = sk * scale[..., None]
    if near_pi.any():
        # Axis magnitudes from the diagonal of (R + I)/2; signs from the skew
        # part; the angle from asin of the skew norm, exact at pi itself.
        diag = torch.stack([rot[..., 0, 0], rot[..., 1, 1], rot[..., 2, 2]], dim=-1)
        axis = torch.sqrt(((diag + 1.0) * 0.5).clamp_min(1e-24))
        sign = torch.where(sk >= 0, torch.ones_like(sk), -torch.ones_like(sk))
        axis = axis * sign
        norm = axis.norm(dim=-1, keepdim=True).clamp_min(_SMALL_ANGLE)
        sk_half = 0.5 * torch.linalg.vector_norm(sk, dim=-1)
        angle_pi = torch.pi - torch.asin(sk_half.clamp(max=1.0 - 1e-12))
        aa_pi = axis / norm * angle_pi[..., None]
        aa = torch.where(near_pi[..., None], aa_pi, aa)
    return aa


def yaw_matrix(yaw: torch.Tensor) -> torch.Tensor:
    """Rotation about +z by yaw (counter-clockwise). yaw: (...,) -> (..., 3, 3)."""
    c, s = torch.cos(yaw), torch.sin(yaw)
    zero = torch.zeros_like(c)
    one = torch.ones_like(c)
    return torch.stack(
        [
            torch.stack([c, -s, zero], dim=-1),
            torch.stack([s, c, zero], dim=-1),
            torch.stack([zero, zero, one], dim=-1),
        ],
        dim=-2,
    )


def rotate_axis_angle(yaw: torch.Tensor, aa: torch.Tensor) -> torch.Tensor:
    """Compose a z-rotation on the left of exp(aa), back to axis-angle."""
    return matrix_to_axis_angle(yaw_matrix(yaw) @ axis_angle_to_matrix(aa))


def as_tensor(x, device=None) -> torch.Tensor:
    """Coerce array-likes to double tensors without copying tensors."""
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE, device=device)
