"""Sample preparation, AdamW and the seeded training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import serialize
from .bev import GridSpec, RawPillars, pillar_features
from .config import Config, parse_config
from .model import TrackerModel, compute_losses
from .scene import Box3D, Sequence, augment_frame, crop_search_region, wrap_angle
from .sfp import render_gt_heatmap
from .tensor import Tape

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


@dataclass
class Sample:
    template: RawPillars
    search: RawPillars
    target: np.ndarray  # dx, dy, dz, dtheta in the reference-box frame
    heatmap: np.ndarray  # (H*W,)


def grid_spec(cfg: Config, cls: str | None = None) -> GridSpec:
    return GridSpec.for_class(cls or cfg.cls, cfg.H, cfg.W)


def template_pillars(seq: Sequence, spec: GridSpec, cls: str) -> RawPillars:
    """Raw features of the first frame cropped around the first box."""
    return pillar_features(crop_search_region(seq.frames[0], seq.boxes[0], cls).points, spec)


def target_offsets(box: Box3D, ref: Box3D) -> np.ndarray:
    rel = box.relative_to(ref)
    return np.array([rel.x, rel.y, rel.z, rel.theta])


def apply_offsets(ref: Box3D, offsets) -> Box3D:
    """Move ``ref`` by offsets given in its own frame."""
    dx, dy, dz, dth = (float(v) for v in offsets)
    c = ref.to_world(np.array([[dx, dy, dz]]))[0]
    return Box3D(c[0], c[1], c[2], ref.w, ref.h, ref.l, ref.theta + dth)


def make_sample(seq: Sequence, t: int, cfg: Config, spec: GridSpec, rng: np.random.Generator | None = None) -> Sample:
    """Training pair for frame ``t`` (>= 1).

    Template and search are frames t-1 and t, both cropped around box t-1
    (optionally perturbed by the configured jitter).
    """
    cls = seq.cls
    ref = seq.boxes[t - 1]
    if rng is not None and (cfg.jitter_xy > 0 or cfg.jitter_yaw > 0):
        jx, jy = rng.normal(0.0, cfg.jitter_xy, 2)
        ref = Box3D(ref.x + jx, ref.y + jy, ref.z, ref.w, ref.h, ref.l, ref.theta + rng.normal(0.0, cfg.jitter_yaw))
    crop = crop_search_region(seq.frames[t], ref, cls)
    tmpl = crop_search_region(seq.frames[t - 1], ref, cls).points
    target = seq.boxes[t].relative_to(ref)
    pts = crop.points
    if rng is not None and cfg.augment:
        flip = bool(rng.random() < 0.5)
        pts, target = augment_frame(pts, target, rng, flip=flip)
        if flip:
            tmpl = tmpl * np.array([1.0, -1.0, 1.0])
    heat = render_gt_heatmap([target], spec).reshape(-1)
    return Sample(
        pillar_features(tmpl, spec),
        pillar_features(pts, spec),
        np.array([target.x, target.y, target.z, wrap_angle(target.theta)]),
        heat,
    )


class AdamW:
    """Adam with decoupled weight decay on a dict of parameters."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0.0:
            return
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data *= 1 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def learning_rate(cfg: Config, epoch: int) -> float:
    return cfg.lr / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def sample_gradients(model: TrackerModel, sample: Sample, rng=None) -> tuple[dict[str, np.ndarray], dict]:
    """Loss parts and parameter gradients for one sample (padded, masked path)."""
    names = list(model.params)
    with Tape() as tape:
        out = model.forward(sample.template, sample.search, padded=True, rng=rng)
        total, parts = compute_losses(out.xy, out.zr, sample.target, out.heat, sample.heatmap, model.cfg)
    grads = tape.backward(total, wrt=[model.params[n] for n in names])
    parts["k"] = out.k
    parts["n"] = out.n
    return {n: grads[model.params[n]] for n in names}, parts


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    track: float
    pred: float
    mean_k: float


def train(
    sequences: list[Sequence],
    cfg: Config,
    model: TrackerModel | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> tuple[TrackerModel, list[EpochStats]]:
    """Seeded minibatch training; every epoch visits every (sequence, frame) pair once."""
    if not sequences:
        raise ValueError("training needs at least one sequence")
    cfg.validate()
    model = model or TrackerModel(cfg)
    spec = grid_spec(cfg)
    rng = np.random.default_rng(cfg.seed)
    pairs = [(i, t) for i, s in enumerate(sequences) for t in range(1, len(s))]
    opt = AdamW(model.params, cfg.lr, cfg.weight_decay)
    history = []
    batch_index = 0
    for epoch in range(cfg.epochs):
        opt.lr = learning_rate(cfg, epoch)
        order = rng.permutation(len(pairs))
        sums = np.zeros(4)
        for start in range(0, len(order), cfg.batch):
            acc: dict[str, np.ndarray] = {}
            idx = order[start : start + cfg.batch]
            for j in idx:
                si, t = pairs[j]
                sample = make_sample(sequences[si], t, cfg, spec, rng)
                grads, parts = sample_gradients(model, sample, rng)
                if not math.isfinite(parts["total"]):
                    raise NumericalError(f"non-finite loss in batch {batch_index}", batch_index)
                for k, g in grads.items():
                    if k in acc:
                        acc[k] += g
                    else:
                        acc[k] = g.copy()
                sums += (parts["total"], parts["track"], parts["pred"], parts["k"])
            for g in acc.values():
                g /= len(idx)
            opt.step(acc)
            batch_index += 1
        m = sums / len(pairs)
        stats = EpochStats(epoch, opt.lr, float(m[0]), float(m[1]), float(m[2]), float(m[3]))
        history.append(stats)
        log.info("epoch %d lr %.3g loss %.5f track %.5f pred %.5f K %.1f", epoch, stats.lr, stats.loss, stats.track, stats.pred, stats.mean_k)
        if on_epoch is not None:
            on_epoch(stats)
    return model, history


def evaluation_loss(model: TrackerModel, sequences: list[Sequence], cfg: Config | None = None) -> float:
    """Mean total loss over all unperturbed, unaugmented pairs."""
    cfg = cfg or model.cfg
    spec = grid_spec(cfg)
    vals = []
    for seq in sequences:
        for t in range(1, len(seq)):
            s = make_sample(seq, t, cfg, spec, None)
            out = model.forward(s.template, s.search, padded=True)
            _, parts = compute_losses(out.xy, out.zr, s.target, out.heat, s.heatmap, cfg)
            vals.append(parts["total"])
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# checkpoints


def config_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.name + ".cfg")


def save_checkpoint(path, model: TrackerModel) -> None:
    serialize.save(path, model.state())
    config_path(path).write_text(model.cfg.to_text(), encoding="utf-8")


def load_checkpoint(path, cfg: Config | None = None) -> TrackerModel:
    """Rebuild the model from a checkpoint and its config sidecar (or ``cfg``)."""
    if cfg is None:
        side = config_path(path)
        if not side.exists():
            raise FileNotFoundError(f"missing config sidecar {side}")
        cfg = parse_config(side.read_text(encoding="utf-8"))
    model = TrackerModel(cfg)
    model.load_state(serialize.load(path))
    return model
