"""Segmentation metrics: DSC, IoU, and 95th-percentile Hausdorff distance.

Conventions the underlying definitions leave open are fixed here and
surfaced as flags in the report:

* DSC/IoU of two empty masks is 100; HD95 of two empty masks is 0.
* HD95 with exactly one empty mask is the image diagonal length.
* Boundary pixels are foreground pixels with at least one background
  4-neighbour (outside the image counts as background); distances are
  Euclidean between pixel centres.
* The 95th percentile is nearest-rank on the sorted directed distances,
  one direction at a time; HD95 is the max of the two directed values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import expit

from . import tensor as T
from .errors import ContractError, DimensionError


def _check_pair(pred, gt, op):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"{op}: mask shapes differ, {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if not np.isin(m, (0, 1)).all():
            raise ContractError(f"{op}: {name} mask is not binary")
    return pred.astype(bool), gt.astype(bool)


def dsc(pred, gt):
    """Dice similarity as a percentage; 100 when both masks are empty."""
    p, g = _check_pair(pred, gt, "dsc")
    total = p.sum() + g.sum()
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * np.logical_and(p, g).sum() / total


def iou(pred, gt):
    """Intersection over union as a percentage; 100 when both are empty."""
    p, g = _check_pair(pred, gt, "iou")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 100.0
    return 100.0 * np.logical_and(p, g).sum() / union


def boundary_pixels(mask):
    """Foreground pixels with a background 4-neighbour (edges count)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1)
    up = padded[:-2, 1:-1]
    down = padded[2:, 1:-1]
    left = padded[1:-1, :-2]
    right = padded[1:-1, 2:]
    return m & ~(up & down & left & right)


def _nearest_rank(sorted_vals, q=95.0):
    k = max(1, math.ceil(q / 100.0 * sorted_vals.size))
    return float(sorted_vals[k - 1])


def hd95(pred, gt):
    """Symmetric 95th-percentile Hausdorff distance in pixels.

    Returns (value, flag) where flag is None, "both_empty" or
    "one_empty_penalty" when an empty-mask convention fired.
    """
    p, g = _check_pair(pred, gt, "hd95")
    p_any, g_any = bool(p.any()), bool(g.any())
    if not p_any and not g_any:
        return 0.0, "both_empty"
    if p_any != g_any:
        h, w = p.shape
        return float(math.hypot(h, w)), "one_empty_penalty"
    bp = boundary_pixels(p)
    bg = boundary_pixels(g)
    # exact Euclidean distance-to-nearest-boundary maps
    dist_to_g = ndimage.distance_transform_edt(~bg)
    dist_to_p = ndimage.distance_transform_edt(~bp)
    d_pg = np.sort(dist_to_g[bp])
    d_gp = np.sort(dist_to_p[bg])
    return max(_nearest_rank(d_pg), _nearest_rank(d_gp)), None


@dataclass
class MetricsReport:
    dsc: float
    iou: float
    hd95: float
    n_samples: int
    convention_flags: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "dsc": self.dsc,
            "iou": self.iou,
            "hd95": self.hd95,
            "n_samples": self.n_samples,
            "convention_flags": dict(self.convention_flags),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self):
        lines = [
            f"{'DSC (%)':<8} up   {self.dsc:8.2f}",
            f"{'IoU (%)':<8} up   {self.iou:8.2f}",
            f"{'HD95':<8} down {self.hd95:8.2f}",
        ]
        if self.convention_flags:
            lines.append(f"flags: {self.convention_flags}")
        return "\n".join(lines)


def evaluate(model, triplets, tokenizer, threshold=0.5, batch_size=16):
    """Per-sample metrics on thresholded sigmoid outputs, averaged.

    Prompt index 0 is used for every sample so evaluation is
    deterministic regardless of the training sampler.
    """
    if not triplets:
        raise ContractError("evaluate: empty split")
    dscs, ious, hds = [], [], []
    flags = {}
    for start in range(0, len(triplets), batch_size):
        chunk = triplets[start : start + batch_size]
        images = np.stack([t.image for t in chunk])
        ids = [tokenizer.encode(t.prompts[0]) for t in chunk]
        with T.no_grad():
            logits = model.forward(images, ids)
        probs = expit(logits.numpy())
        preds = (probs >= threshold).astype(np.uint8)
        for pred, t in zip(preds, chunk):
            dscs.append(dsc(pred, t.mask))
            ious.append(iou(pred, t.mask))
            value, flag = hd95(pred, t.mask)
            hds.append(value)
            if flag:
                flags[flag] = flags.get(flag, 0) + 1
    return MetricsReport(
        dsc=float(np.mean(dscs)),
        iou=float(np.mean(ious)),
        hd95=float(np.mean(hds)),
        n_samples=len(triplets),
        convention_flags=flags,
    )
