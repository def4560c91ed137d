"""Evaluation metrics: displacement, diversity, smoothness, ground
penetration, contact classification, and visibility-split positional errors.

Positions come in meters; reported positional values are centimeters,
accelerations stay in m/s^2. Aggregation pools over joints and frames.
"""

import csv
import json
from dataclasses import dataclass, field

import torch

from .kinematics import FRAME_RATE, GroundPlane, Skeleton
from .transforms import as_tensor

CM = 100.0
PENETRATION_THRESHOLDS_CM = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0)


def _joint_errors(pred: torch.Tensor, true: torch.Tensor) -> torch.Tensor:
    pred = as_tensor(pred)
    true = as_tensor(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(true.shape)}")
    return torch.linalg.vector_norm(pred - true, dim=-1)


def ade_fde(pred_seq: torch.Tensor, true_seq: torch.Tensor):
    """Average and final displacement error in cm for (T, J, 3) sequences.

    Per-joint Euclidean errors are averaged over joints; ADE additionally
    averages over frames, FDE keeps only the last frame. Picking the best
    of several samples is the caller's job.
    """
    err = _joint_errors(pred_seq, true_seq)
    return float(err.mean()) * CM, float(err[-1].mean()) * CM


def apd(sample_set: torch.Tensor) -> float:
    """Mean pairwise joint distance in cm across a (K, T, J, 3) sample set."""
    samples = as_tensor(sample_set)
    k = samples.shape[0]
    if k < 2:
        return 0.0
    total = 0.0
    pairs = 0
    for i in range(k):
        for j in range(i + 1, k):
            total += float(_joint_errors(samples[i], samples[j]).mean())
            pairs += 1
    return total / pairs * CM


def accel(joint_seq: torch.Tensor, h: float = 1.0 / FRAME_RATE) -> torch.Tensor:
    """|| (p_{t-1} - 2 p_t + p_{t+1}) / h^2 || per interior frame and joint.

    Input (T, J, 3) in meters; output (T-2, J) in m/s^2. Any trajectory
    quadratic in time has constant output.
    """
    p = as_tensor(joint_seq)
    if p.shape[0] < 3:
        return torch.zeros(0, p.shape[1], dtype=torch.float64)
    second = (p[:-2] - 2.0 * p[1:-1] + p[2:]) / (h * h)
    return torch.linalg.vector_norm(second, dim=-1)


def penetration(toe_seqs: torch.Tensor, ground: GroundPlane):
    """(Freq, Dist) of toes sinking below the ground plane.

    toe_seqs: (T, 2, 3) toe positions. A toe-frame with penetration depth
    d (cm) counts at every threshold it strictly exceeds; Freq averages
    the per-threshold counts over thresholds, each divided by 2T. Dist is
    the mean depth over all toe-frames, non-penetrating ones counting 0.
    """
    toes = as_tensor(toe_seqs)
    if toes.dim() != 3 or toes.shape[1] != 2:
        raise ValueError("expected (frames, 2, 3) toe positions")
    depth_cm = (-ground.signed_height(toes)).clamp(min=0.0) * CM
    total = depth_cm.numel()
    freqs = [float((depth_cm > thr).sum()) / total for thr in PENETRATION_THRESHOLDS_CM]
    freq = sum(freqs) / len(PENETRATION_THRESHOLDS_CM)
    dist = float(depth_cm.sum()) / total
    return freq, dist


def contact_accuracy(pred_probs: torch.Tensor, true_labels: torch.Tensor,
                     cutoff: float = 0.5) -> float:
    """Binary accuracy of contact predictions; a probability equal to the
    cutoff counts as a positive prediction."""
    probs = as_tensor(pred_probs)
    labels = as_tensor(true_labels)
    if probs.shape != labels.shape:
        raise ValueError("prediction and label shapes differ")
    pred = probs >= cutoff
    return float((pred == (labels > 0.5)).to(torch.float64).mean())


def positional_errors(pred: torch.Tensor, truth: torch.Tensor,
                      visibility: torch.Tensor, leg_joint_ids) -> dict:
    """Mean joint errors (cm) split by observation visibility.

    pred, truth: (T, J, 3); visibility: (T, J) bool marking joints that
    were observed. legs pools the given joint columns over all frames.
    An empty subset reports 0.
    """
    err = _joint_errors(pred, truth) * CM
    vis = torch.as_tensor(visibility, dtype=torch.bool)
    if vis.shape != err.shape:
        raise ValueError("visibility shape must match (frames, joints)")

    def masked_mean(mask):
        n = int(mask.sum())
        return float(err[mask].mean()) if n else 0.0

    ids = list(leg_joint_ids)
    legs = float(err[:, ids].mean()) if ids else 0.0
    return {
        "vis": masked_mean(vis),
        "occ": masked_mean(~vis),
        "all": float(err.mean()),
        "legs": legs,
    }


def root_align(joints: torch.Tensor) -> torch.Tensor:
    """Subtract the root joint position from every joint, per frame."""
    j = as_tensor(joints)
    return j - j[..., :1, :]


def leg_joint_ids(skeleton: Skeleton) -> list:
    """Knees, ankles, and toes by name."""
    keys = ("knee", "ankle", "toe")
    return [i for i, n in enumerate(skeleton.joint_names) if any(k in n for k in keys)]


# ---------------------------------------------------------------------------
# report container and serialization
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-sequence metric rows plus their aggregate means.

    Each row is {"name": str, <metric>: float, ...}; rows may carry
    different metric subsets (sampling runs have no positional errors).
    """

    sequences: list = field(default_factory=list)

    def add(self, name: str, **values) -> None:
        for key, v in values.items():
            v = float(v)
            if v < 0 and key != "name":
                raise ValueError(f"metric {key} is negative for {name}")
            if key in ("pen_freq", "contact_acc") and not 0.0 <= v <= 1.0:
                raise ValueError(f"{key} must lie in [0, 1]")
        self.sequences.append({"name": name, **{k: float(v) for k, v in values.items()}})

    def aggregate(self) -> dict:
        keys = sorted({k for row in self.sequences for k in row if k != "name"})
        out = {}
        for key in keys:
            vals = [row[key] for row in self.sequences if key in row]
            out[key] = sum(vals) / len(vals)
        return out

    def to_dict(self) -> dict:
        return {"sequences": self.sequences, "aggregate": self.aggregate()}

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    def save_csv(self, path) -> None:
        keys = sorted({k for row in self.sequences for k in row if k != "name"})
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["name"] + keys)
            for row in self.sequences:
                writer.writerow([row["name"]] + [row.get(k, "") for k in keys])
            agg = self.aggregate()
            writer.writerow(["aggregate"] + [agg.get(k, "") for k in keys])

    @classmethod
    def load_json(cls, path) -> "EvalReport":
        with open(path) as f:
            doc = json.load(f)
        report = cls()
        report.sequences = doc["sequences"]
        return report


def write_line_svg(path, series: dict, width: int = 640, height: int = 360) -> None:
    """Tiny dependency-free SVG line plot; one polyline per named series."""
    colors = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")
    pts = [(name, [float(v) for v in vals]) for name, vals in series.items() if len(vals)]
    if not pts:
        raise ValueError("nothing to plot")
    lo = min(min(v) for _, v in pts)
    hi = max(max(v) for _, v in pts)
    span = (hi - lo) or 1.0
    n = max(len(v) for _, v in pts)
    margin = 40
    sx = (width - 2 * margin) / max(n - 1, 1)
    sy = (height - 2 * margin) / span
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{margin}" y="{height - 8}" font-size="11">min {lo:.4g}  max {hi:.4g}</text>',
    ]
    for idx, (name, vals) in enumerate(pts):
        coords = " ".join(
            f"{margin + i * sx:.1f},{height - margin - (v - lo) * sy:.1f}"
            for i, v in enumerate(vals)
        )
        color = colors[idx % len(colors)]
        lines.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>'
        )
        lines.append(
            f'<text x="{margin}" y="{14 + 13 * idx}" font-size="11" fill="{color}">{name}</text>'
        )
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines))
