"""Gaussian mixture over 138-dim initial-state vectors.

Hand-rolled EM with full covariances: k-means++ seeding, log-sum-exp
responsibilities, diagonal regularization, and a reseed rule for
components that lose all their mass. The fitted mixture is immutable;
log-likelihood runs in torch so downstream energies can differentiate
through it.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .state import INIT_VECTOR_DIM

MAGIC = b"MPRGMM\x00\x00"
VERSION = 1
HEADER_BYTES = 64

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(eq=False)
class InitGmm:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    chols: np.ndarray  # (K, D, D) lower Cholesky factors of the covariances
    fit_trace: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.chols = np.asarray(self.chols, dtype=np.float64)
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.chols.shape[0] != k:
            raise ValueError("component count mismatch between weights/means/choleskys")
        if self.means.shape[1] != self.chols.shape[1]:
            raise ValueError("mean and covariance dimensions differ")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        diag = np.diagonal(self.chols, axis1=-2, axis2=-1)
        if np.any(diag <= 0):
            raise ValueError("cholesky factors must have positive diagonals")
        self._torch = None

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def covariances(self) -> np.ndarray:
        return self.chols @ self.chols.transpose(0, 2, 1)

    def _torch_params(self):
        if self._torch is None:
            log_w = np.where(self.weights > 0, np.log(np.maximum(self.weights, 1e-300)), -np.inf)
            self._torch = (
                torch.as_tensor(log_w),
                torch.as_tensor(self.means),
                torch.as_tensor(self.chols),
                torch.as_tensor(
                    np.log(np.diagonal(self.chols, axis1=-2, axis2=-1)).sum(axis=-1)
                ),
            )
        return self._torch

    def log_likelihood(self, x: torch.Tensor) -> torch.Tensor:
        return gmm_log_likelihood(self, x)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return gmm_sample(self, rng)


def _mahalanobis_sq(x2d: torch.Tensor, means: torch.Tensor, chols: torch.Tensor) -> torch.Tensor:
    """Squared Mahalanobis distances, (M, D) x (K, ...) -> (M, K).

    Loops over components: a broadcasted batched solve would materialize
    an (M, K, D, D) tensor, which at working sizes does not fit in memory.
    """
    cols = []
    for j in range(means.shape[0]):
        y = torch.linalg.solve_triangular(
            chols[j], (x2d - means[j]).T, upper=False
        )
        cols.append((y**2).sum(dim=0))
    return torch.stack(cols, dim=1)


def gmm_log_likelihood(gmm: InitGmm, x: torch.Tensor) -> torch.Tensor:
    """log sum_k w_k N(x; mu_k, L_k L_k^T); x: (..., D) -> (...)."""
    x = torch.as_tensor(x, dtype=torch.float64) if not isinstance(x, torch.Tensor) else x
    if x.shape[-1] != gmm.dim:
        raise ValueError(f"expected {gmm.dim}-dim points, got {x.shape[-1]}")
    log_w, means, chols, log_dets = gmm._torch_params()
    lead = x.shape[:-1]
    quad = _mahalanobis_sq(x.reshape(-1, gmm.dim), means, chols)  # (M, K)
    log_comp = -0.5 * quad - log_dets - 0.5 * gmm.dim * _LOG_2PI + log_w
    return torch.logsumexp(log_comp, dim=-1).reshape(lead)


def gmm_sample(gmm: InitGmm, rng: np.random.Generator) -> np.ndarray:
    k = int(rng.choice(gmm.num_components, p=gmm.weights))
    eps = rng.standard_normal(gmm.dim)
    return gmm.means[k] + gmm.chols[k] @ eps


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _kmeanspp_centers(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centers = [data[int(rng.integers(n))]]
    for _ in range(k - 1):
        d2 = np.min(
            [((data - c) ** 2).sum(axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:  # all points coincide with a center; spread uniformly
            centers.append(data[int(rng.integers(n))])
            continue
        centers.append(data[int(rng.choice(n, p=d2 / total))])
    return np.stack(centers)


def _component_stats(data, resp, reg):
    """Weighted means and regularized covariance Choleskys. Torch, no grad."""
    nk = resp.sum(dim=0)  # (K,)
    means = (resp.T @ data) / nk[:, None]
    cov = torch.stack(
        [
            ((data - means[j]) * resp[:, j : j + 1]).T @ (data - means[j]) / nk[j]
            for j in range(means.shape[0])
        ]
    )
    eye = torch.eye(data.shape[1], dtype=data.dtype)
    for boost in (1.0, 100.0, 10000.0):
        try:
            chols = torch.linalg.cholesky(cov + boost * reg * eye)
            break
        except torch.linalg.LinAlgError:
            if boost == 10000.0:
                raise
    return nk / data.shape[0], means, chols


def _farthest_point_index(data: torch.Tensor, means: torch.Tensor) -> int:
    """Index of the point with the largest distance to its nearest mean."""
    d2 = torch.cdist(data, means).min(dim=1).values
    return int(torch.argmax(d2))


def fit_em(
    data,
    k: int = 12,
    seed: int = 0,
    max_iters: int = 200,
    reg: float = 1e-6,
    tol: float = 1e-7,
) -> InitGmm:
    """Expectation-maximization for a full-covariance mixture.

    Stops when the per-point log-likelihood improves by less than ``tol``
    or after ``max_iters`` iterations. The trace of per-point values is
    left on the result as ``fit_trace``; it is non-decreasing except
    immediately after an empty-component reseed.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be (N, D)")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    n, dim = data.shape
    if not np.all(np.isfinite(data)):
        raise ValueError("data contains non-finite values")
    if n < 2 * k:
        raise ValueError(f"{n} points cannot support {k} components")

    rng = np.random.default_rng(seed)
    centers = _kmeanspp_centers(data, k, rng)
    td = torch.as_tensor(data)
    # hard assignment to the seeds gives the first responsibilities
    assign = torch.cdist(td, torch.as_tensor(centers)).argmin(dim=1)
    resp = torch.zeros(n, k, dtype=torch.float64)
    resp[torch.arange(n), assign] = 1.0
    resp = resp + 1e-8  # soften so no seed starts empty
    resp = resp / resp.sum(dim=1, keepdim=True)

    trace: list[float] = []
    reseeds = 0
    with torch.no_grad():
        for _ in range(max_iters):
            weights, means, chols = _component_stats(td, resp, reg)
            gmm = InitGmm(weights.numpy(), means.numpy(), chols.numpy())
            log_w, tmeans, tchols, log_dets = gmm._torch_params()
            quad = _mahalanobis_sq(td, tmeans, tchols)  # (N, K)
            log_comp = -0.5 * quad - log_dets - 0.5 * dim * _LOG_2PI + log_w
            log_norm = torch.logsumexp(log_comp, dim=1)  # (N,)
            ll = float(log_norm.mean())
            if trace and ll < trace[-1] - 1e-9 and reseeds == 0:
                raise RuntimeError("log-likelihood decreased; EM step is broken")
            converged = bool(trace) and abs(ll - trace[-1]) < tol
            trace.append(ll)
            if converged:
                break
            resp = torch.exp(log_comp - log_norm[:, None])
            nk = resp.sum(dim=0)
            empty = torch.nonzero(nk < 1e-10).flatten()
            if len(empty):
                reseeds += len(empty)
                if reseeds > 3 * k:
                    raise RuntimeError("EM keeps producing empty components")
                for j in empty.tolist():
                    far_idx = _farthest_point_index(td, tmeans)
                    resp[:, j] = 0.0
                    resp[far_idx] = 0.0
                    resp[far_idx, j] = 1.0
                resp = resp / resp.sum(dim=1, keepdim=True)

    gmm.fit_trace = trace
    return gmm


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def save_gmm(gmm: InitGmm, path, meta: dict | None = None) -> None:
    header = {
        "components": gmm.num_components,
        "dim": gmm.dim,
        "meta": meta or {},
    }
    blob = json.dumps(header).encode()
    payload = b"".join(
        arr.astype("<f8").tobytes() for arr in (gmm.weights, gmm.means, gmm.chols)
    )
    with open(path, "wb") as f:
        head = MAGIC + struct.pack("<II", VERSION, len(blob))
        f.write(head.ljust(HEADER_BYTES, b"\x00"))
        f.write(blob)
        f.write(payload)


def load_gmm(path) -> InitGmm:
    with open(path, "rb") as f:
        head = f.read(HEADER_BYTES)
        if len(head) < HEADER_BYTES or head[:8] != MAGIC:
            raise ValueError(f"{path}: not a mixture model file")
        version, blob_len = struct.unpack("<II", head[8:16])
        if version != VERSION:
            raise ValueError(f"{path}: unsupported mixture version {version}")
        header = json.loads(f.read(blob_len).decode())
        payload = f.read()
    k, dim = int(header["components"]), int(header["dim"])
    expected = 8 * (k + k * dim + k * dim * dim)
    if len(payload) != expected:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, header promises {expected}")
    flat = np.frombuffer(payload, dtype="<f8")
    weights = flat[:k].copy()
    means = flat[k : k + k * dim].reshape(k, dim).copy()
    chols = flat[k + k * dim :].reshape(k, dim, dim).copy()
    return InitGmm(weights, means, chols)
