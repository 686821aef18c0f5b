"""3-D IoU of oriented boxes and one-pass-evaluation Success/Precision."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import Box3D

SUCCESS_THRESHOLDS = np.arange(21) / 20.0  # IoU 0..1
PRECISION_THRESHOLDS = np.arange(21) / 10.0  # metres 0..2


def _clip(subject: list, clipper: np.ndarray) -> list:
    """Sutherland-Hodgman: part of polygon ``subject`` inside convex CCW ``clipper``."""
    out = subject
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    s = 0.0
    for i in range(len(poly)):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % len(poly)]
        s += x0 * y1 - x1 * y0
    return abs(s) / 2.0


def bev_intersection(a: Box3D, b: Box3D) -> float:
    subject = [tuple(p) for p in a.corners_bev()]
    return _area(_clip(subject, b.corners_bev()))


def iou3d(a: Box3D, b: Box3D) -> float:
    """Footprint intersection (polygon clipping) times vertical overlap over union volume."""
    # fixed argument order makes the result exactly symmetric
    if tuple(a.as_array()) > tuple(b.as_array()):
        a, b = b, a
    zo = min(a.z + a.h / 2, b.z + b.h / 2) - max(a.z - a.h / 2, b.z - b.h / 2)
    if zo <= 0:
        return 0.0
    inter = bev_intersection(a, b) * zo
    union = a.w * a.h * a.l + b.w * b.h * b.l - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def center_distance(a: Box3D, b: Box3D) -> float:
    return float(np.linalg.norm(a.center - b.center))


def success_curve(ious) -> np.ndarray:
    """Fraction of frames with IoU >= t per threshold; zero-IoU frames never count."""
    ious = np.asarray(ious, dtype=float)
    hit = (ious[None, :] >= SUCCESS_THRESHOLDS[:, None]) & (ious[None, :] > 0)
    return hit.mean(axis=1) if ious.size else np.zeros(len(SUCCESS_THRESHOLDS))


def precision_curve(distances) -> np.ndarray:
    """Fraction of frames with centre error <= t; errors of 2 m or more never count."""
    d = np.asarray(distances, dtype=float)
    hit = (d[None, :] <= PRECISION_THRESHOLDS[:, None]) & (d[None, :] < PRECISION_THRESHOLDS[-1])
    return hit.mean(axis=1) if d.size else np.zeros(len(PRECISION_THRESHOLDS))


@dataclass
class OpeReport:
    success: float
    precision: float
    ious: np.ndarray = field(repr=False)
    distances: np.ndarray = field(repr=False)

    @property
    def n_frames(self) -> int:
        return int(self.ious.size)

    def records(self) -> list[dict]:
        return [{"iou": float(i), "center_error": float(d)} for i, d in zip(self.ious, self.distances)]


def ope_from_errors(ious, distances) -> OpeReport:
    ious = np.asarray(ious, dtype=float)
    distances = np.asarray(distances, dtype=float)
    return OpeReport(
        success=float(success_curve(ious).mean()),
        precision=float(precision_curve(distances).mean()),
        ious=ious,
        distances=distances,
    )


def evaluate_ope(pred, gt) -> OpeReport:
    """Success and precision (both in [0, 1]) of predicted vs ground-truth boxes."""
    if len(pred) != len(gt):
        raise ValueError(f"prediction/ground-truth length mismatch: {len(pred)} vs {len(gt)}")
    ious = [iou3d(p, g) for p, g in zip(pred, gt)]
    dist = [center_distance(p, g) for p, g in zip(pred, gt)]
    return ope_from_errors(ious, dist)
