"""Frame-by-frame tracking of one sequence."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bev import RawPillars, feature_entropy, grid_entropy, pillar_features
from .model import TrackerModel
from .profiling import StageProfile
from .scene import Box3D, Sequence, crop_search_region
from .training import apply_offsets, grid_spec


@dataclass
class TrackState:
    current_box: Box3D
    template: RawPillars
    frame_index: int = 0


@dataclass
class FrameTrace:
    frame_index: int
    n_tokens: int
    k: int
    held: bool
    heatmap: np.ndarray | None = None
    entropy_before: float = 0.0
    entropy_after: float = 0.0


@dataclass
class TrackResult:
    boxes: list[Box3D]  # frames 2..T
    traces: list[FrameTrace] = field(default_factory=list)

    def mean(self, attr: str) -> float:
        vals = [getattr(t, attr) for t in self.traces if not t.held]
        return float(np.mean(vals)) if vals else 0.0


def _entropies(raw: RawPillars, heat: np.ndarray | None, gamma: float) -> tuple[float, float]:
    """Grid entropy of all occupied cells vs. the cells the predictor keeps."""
    occ = raw.occupancy
    H, W = raw.spec.H, raw.spec.W
    n = H * W
    h_fg = feature_entropy(raw, occ)
    before = grid_entropy(occ.sum() / n, h_fg, H, W)
    kept = occ if heat is None else occ & (heat >= gamma)
    after = grid_entropy(kept.sum() / n, feature_entropy(raw, kept) if kept.any() else 0.0, H, W)
    return before, after


def infer_sequence(
    seq: Sequence,
    model: TrackerModel,
    keep_heatmaps: bool = False,
    diagnostics: bool = False,
    profile: StageProfile | None = None,
) -> TrackResult:
    """Track from the first box; returns one box per frame after the first.

    Frames whose search crop holds no points repeat the previous box.
    """
    if len(seq) < 2:
        raise ValueError("a sequence needs at least two frames")
    cfg = model.cfg
    cls = seq.cls
    spec = grid_spec(cfg, cls)
    state = TrackState(seq.boxes[0], pillar_features(crop_search_region(seq.frames[0], seq.boxes[0], cls).points, spec))
    boxes, traces = [], []
    for t in range(1, len(seq)):
        crop = crop_search_region(seq.frames[t], state.current_box, cls)
        if len(crop) == 0:
            boxes.append(state.current_box)
            traces.append(FrameTrace(t, 0, 0, True))
            state.frame_index = t
            continue
        search = pillar_features(crop.points, spec)
        rng = np.random.default_rng([cfg.seed, t])
        out = model.forward(state.template, search, padded=False, rng=rng, profile=profile)
        heat = None if out.heat is None else out.heat.data[:, 0]
        trace = FrameTrace(t, out.n, out.k, False, heat.reshape(spec.H, spec.W) if (keep_heatmaps and heat is not None) else None)
        if diagnostics:
            trace.entropy_before, trace.entropy_after = _entropies(search, heat, cfg.gamma)
        state.current_box = apply_offsets(state.current_box, out.offsets())
        state.frame_index = t
        boxes.append(state.current_box)
        traces.append(trace)
    return TrackResult(boxes, traces)


def hold_first(seq: Sequence) -> list[Box3D]:
    """The zero-offset tracker: the first box repeated."""
    return [seq.boxes[0]] * (len(seq) - 1)
