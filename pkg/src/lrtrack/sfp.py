"""Spatial foreground predictor.

A small grouped-convolution network scores every BEV cell from the
concatenated template and search features; the search features are then
scaled by that score.  Supervision is an MSE against Gaussian peaks rendered
at ground-truth box centres.
"""
from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .bev import GridSpec
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

GROUPS = 4


def init_params(rng: np.random.Generator, C: int) -> dict[str, Parameter]:
    """3x3 grouped conv (2C->2C) -> ReLU -> 3x3 grouped conv (2C->C) -> ReLU -> 1x1 (C->1)."""
    if (2 * C) % GROUPS or C % GROUPS:
        raise ValueError(f"channel count C={C} must be divisible by {GROUPS}")
    cin = 2 * C // GROUPS
    return {
        "sfp.conv1.w": T.init_uniform(rng, 2 * C, cin * 9, cin * 9, "sfp.conv1.w"),
        "sfp.conv1.b": Parameter(np.zeros((1, 2 * C)), "sfp.conv1.b"),
        "sfp.conv2.w": T.init_uniform(rng, C, cin * 9, cin * 9, "sfp.conv2.w"),
        "sfp.conv2.b": Parameter(np.zeros((1, C)), "sfp.conv2.b"),
        "sfp.conv3.w": T.init_uniform(rng, 1, C, C, "sfp.conv3.w"),
        "sfp.conv3.b": Parameter(np.zeros((1, 1)), "sfp.conv3.b"),
    }


def sfp_forward(x_bev: Tensor, params: dict, H: int, W: int) -> Tensor:
    """Heatmap as an (H*W) x 1 column of values in [0, 1]."""
    if x_bev.shape[0] != H * W:
        raise T.ShapeError(f"sfp_forward: input has {x_bev.shape[0]} cells, expected {H * W}")
    C2 = params["sfp.conv1.w"].shape[0]
    if x_bev.shape[1] != C2:
        raise T.ShapeError(f"sfp_forward: input has {x_bev.shape[1]} channels, expected {C2}")
    h = T.relu(T.conv2d(x_bev, params["sfp.conv1.w"], params["sfp.conv1.b"], H, W, groups=GROUPS))
    h = T.relu(T.conv2d(h, params["sfp.conv2.w"], params["sfp.conv2.b"], H, W, groups=GROUPS))
    logits = T.add(T.matmul(h, T.transpose(params["sfp.conv3.w"])), params["sfp.conv3.b"])
    return T.sigmoid(logits)


def modulate(f_s: Tensor, y_pred: Tensor) -> Tensor:
    """Scale every cell's features by its heatmap value."""
    return T.mul(f_s, y_pred)


def sfp_loss(y_pred: Tensor, m_gt) -> Tensor:
    m = np.asarray(getattr(m_gt, "data", m_gt), dtype=np.float64).reshape(y_pred.shape)
    return T.mse(y_pred, m)


def gaussian_sigma(box, spec: GridSpec) -> float:
    """Radius in cells: a sixth of the shorter footprint side, at least one cell."""
    w_px = box.w / spec.cell_y
    l_px = box.l / spec.cell_x
    return max(1.0, min(w_px, l_px) / 6.0)


def render_gt_heatmap(boxes, spec: GridSpec, truncate: float = 3.0) -> np.ndarray:
    """H x W map: max over boxes of a Gaussian peak at each box centre.

    Boxes are given in the grid's frame.  Support is cut at ``truncate`` sigmas;
    boxes whose centre falls outside the grid contribute nothing.
    """
    out = np.zeros((spec.H, spec.W))
    rr, cc = np.meshgrid(np.arange(spec.H), np.arange(spec.W), indexing="ij")
    for box in boxes:
        u, v = spec.to_cell_coords(box.x, box.y)
        if not (-0.5 <= u < spec.H - 0.5 and -0.5 <= v < spec.W - 0.5):
            log.info("box centre (%.2f, %.2f) outside the grid; skipped", box.x, box.y)
            continue
        sigma = gaussian_sigma(box, spec)
        d2 = (rr - u) ** 2 + (cc - v) ** 2
        g = np.exp(-d2 / (2 * sigma * sigma))
        # slack keeps cells lying exactly on the cut from flickering with round-off
        g[d2 > (truncate * sigma) ** 2 * (1 + 1e-9)] = 0.0
        np.maximum(out, g, out=out)
    return np.clip(out, 0.0, 1.0)
