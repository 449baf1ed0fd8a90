"""Target-region masks for attribute edits, derived from body keypoints.

Rules are rectangles/bands anchored on the mannequin skeleton, sized to
contain the dataset's oracle masks with margin to spare (keypoint jitter is
bounded by 2 px; every rule carries at least 3 px of slack). Users can refine
a rule mask with rectangle strokes or a full RLE patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rle
from .dataset import ATTRIBUTE_LEVELS, IMG_SIZE, bottom_row_for

# widest torso flare across categories; rules stay category-agnostic by
# assuming it everywhere
_MAX_FLARE = 0.25


@dataclass(frozen=True)
class RegionRules:
    """Context a rule needs beyond keypoints: the garment's current length."""

    clothing_length: str = "knee"

    def length_level(self) -> int:
        return ATTRIBUTE_LEVELS["clothing_length"].index(self.clothing_length)


def _rows(ys, lo, hi):
    return (ys >= lo) & (ys <= hi)


def _cols(xs, lo, hi):
    return (xs >= lo) & (xs <= hi)


def _garment_cols(xs, kp):
    cx = kp["neck"][0]
    hip_row = (kp["hip_l"][1] + kp["hip_r"][1]) / 2
    ankle_row = (kp["ankle_l"][1] + kp["ankle_r"][1]) / 2
    shoulder_half = (kp["shoulder_r"][0] - kp["shoulder_l"][0]) / 2 + 1
    torso_hw = shoulder_half + _MAX_FLARE * (ankle_row - hip_row) + 3
    leg_xs = [kp[f"{j}_{s}"][0] for j in ("hip", "knee", "ankle") for s in ("l", "r")]
    lo = min(cx - torso_hw, min(leg_xs) - 8)
    hi = max(cx + torso_hw, max(leg_xs) + 8)
    return _cols(xs, lo, hi)


def mask_for(attribute: str, keypoints: dict, rules: RegionRules | None = None,
             H: int = IMG_SIZE, W: int = IMG_SIZE) -> np.ndarray:
    """Binary target mask for editing `attribute` on a body with `keypoints`."""
    rules = rules or RegionRules()
    category = attribute.split(":")[0] if ":" in attribute else attribute
    if category not in ATTRIBUTE_LEVELS:
        raise KeyError(f"no mask rule for attribute {attribute!r}")
    kp = keypoints
    ys, xs = np.mgrid[0:H, 0:W]
    hip_row = (kp["hip_l"][1] + kp["hip_r"][1]) // 2
    ankle_row = (kp["ankle_l"][1] + kp["ankle_r"][1]) // 2
    neck_x, neck_row = kp["neck"]

    if category == "clothing_length":
        m = _garment_cols(xs, kp) & _rows(ys, hip_row - 4, ankle_row + 6)
    elif category in ("sleeve_length", "sleeve_type"):
        m = np.zeros((H, W), dtype=bool)
        for side in ("l", "r"):
            pts = [kp[f"shoulder_{side}"], kp[f"elbow_{side}"], kp[f"wrist_{side}"]]
            axs = [p[0] for p in pts]
            ayz = [p[1] for p in pts]
            m |= _cols(xs, min(axs) - 8, max(axs) + 8) & _rows(ys, min(ayz) - 7, max(ayz) + 8)
    elif category == "collar":
        m = _cols(xs, neck_x - 9, neck_x + 9) & _rows(ys, neck_row - 5, neck_row + 9)
    elif category == "hem":
        bottom = bottom_row_for(rules.length_level(), kp)
        m = _garment_cols(xs, kp) & _rows(ys, bottom - 8, bottom + 5)
    else:  # waistline
        m = _cols(xs, kp["hip_l"][0] - 10, kp["hip_r"][0] + 10) & _rows(
            ys, hip_row - 6, hip_row + 6
        )
    return m.astype(np.uint8)


def apply_manual_edit(mask: np.ndarray, strokes) -> np.ndarray:
    """Apply add/erase rectangle strokes (or an RLE patch) in order.

    A stroke is {"op": "add"|"erase", "rect": [x0, y0, x1, y1]} with the
    half-open convention x0 <= x < x1, or {"op": ..., "rle": {...}}.
    """
    out = (np.asarray(mask) != 0).astype(np.uint8).copy()
    h, w = out.shape
    for stroke in strokes:
        op = stroke.get("op")
        if op not in ("add", "erase"):
            raise ValueError(f"stroke op must be add/erase, got {op!r}")
        if "rect" in stroke:
            x0, y0, x1, y1 = (int(v) for v in stroke["rect"])
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise ValueError(f"stroke rect {stroke['rect']} outside {w}x{h} mask")
            out[y0:y1, x0:x1] = 1 if op == "add" else 0
        elif "rle" in stroke:
            patch = rle.decode(stroke["rle"])
            if patch.shape != out.shape:
                raise ValueError(f"rle patch {patch.shape} != mask {out.shape}")
            if op == "add":
                out |= patch
            else:
                out &= 1 - patch
        else:
            raise ValueError("stroke needs a 'rect' or 'rle' field")
    return out
