"""Evaluation of a registration: Dice overlap, folding ratio, SSIM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .field import VectorField, jacobian
from .loss import LossBreakdown, box_sum
from .volume import Volume

SSIM_WINDOW = 7
SSIM_C1 = 0.01**2  # (0.01 * L)^2 with intensity range L = 1
SSIM_C2 = 0.03**2


def dice(labels_a: Volume, labels_b: Volume, label_set=None):
    """Per-label and mean Dice overlap 2|A n B| / (|A| + |B|).

    Label 0 (background) is excluded; labels absent from both volumes are
    excluded from the mean.
    """
    if labels_a.kind != "label" or labels_b.kind != "label":
        raise ValidationError("dice requires label volumes")
    if labels_a.dims != labels_b.dims:
        raise ShapeError(f"label dims mismatch: {labels_a.dims} vs {labels_b.dims}")
    a = labels_a.data
    b = labels_b.data
    if label_set is None:
        label_set = np.union1d(np.unique(a), np.unique(b))
    per_label: dict[int, float] = {}
    for lab in sorted(int(v) for v in label_set):
        if lab == 0:
            continue
        na = int((a == lab).sum())
        nb = int((b == lab).sum())
        if na + nb == 0:
            continue
        inter = int(((a == lab) & (b == lab)).sum())
        per_label[lab] = 2.0 * inter / (na + nb)
    mean = float(np.mean(list(per_label.values()))) if per_label else float("nan")
    return per_label, mean


def neg_jacobian_ratio(u: VectorField) -> float:
    """Fraction of voxels with a strictly negative deformation determinant."""
    det = jacobian(u).determinants
    return float((det < 0.0).mean())


def ssim(a: Volume, b: Volume) -> float:
    """Mean structural similarity with a uniform 7^3 window.

    Window statistics use clamped (border-replicate) windows and population
    variances; constants follow the standard choice for intensity range 1.
    """
    if a.kind != "intensity" or b.kind != "intensity":
        raise ValidationError("ssim requires intensity volumes")
    if a.dims != b.dims:
        raise ShapeError(f"volume dims mismatch: {a.dims} vs {b.dims}")
    r = SSIM_WINDOW // 2
    m = float(SSIM_WINDOW**3)
    x = a.data
    y = b.data
    mu_x = box_sum(x, r) / m
    mu_y = box_sum(y, r) / m
    var_x = box_sum(x * x, r) / m - mu_x * mu_x
    var_y = box_sum(y * y, r) / m - mu_y * mu_y
    cov = box_sum(x * y, r) / m - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float((num / den).mean())


@dataclass
class MetricsReport:
    dice_per_label: dict[int, float] = field(default_factory=dict)
    dice_mean: float | None = None
    neg_jac_ratio: float | None = None
    ssim: float | None = None
    loss: LossBreakdown | None = None
    runtime_s: float | None = None

    def to_text(self) -> str:
        lines = []
        if self.dice_mean is not None:
            lines.append(f"dice_mean = {self.dice_mean!r}")
            for lab in sorted(self.dice_per_label):
                lines.append(f"dice_per_label.{lab} = {self.dice_per_label[lab]!r}")
        if self.neg_jac_ratio is not None:
            lines.append(f"neg_jac_ratio = {self.neg_jac_ratio!r}")
        if self.ssim is not None:
            lines.append(f"ssim = {self.ssim!r}")
        if self.loss is not None:
            lines.append(f"loss_sim = {self.loss.sim!r}")
            lines.append(f"loss_jdet = {self.loss.jdet!r}")
            lines.append(f"loss_smooth = {self.loss.smooth!r}")
            lines.append(f"loss_total = {self.loss.total!r}")
        if self.runtime_s is not None:
            lines.append(f"runtime_s = {self.runtime_s!r}")
        return "\n".join(lines) + "\n"


def parse_report_text(text: str) -> dict:
    """Flat {key: float} view of a serialized report (for tooling and tests)."""
    out: dict[str, float] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        out[key.strip()] = float(raw.strip())
    return out
