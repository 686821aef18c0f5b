"""The tracking network: pillar projection, foreground predictor, token
compression, proxy mixing and the regression head, plus the training losses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ibdtc, sfp
from . import tensor as T
from .bev import N_RAW, RawPillars
from .config import Config
from .linalg import effective_rank, svd_thin
from .profiling import StageProfile, stage
from .tensor import Parameter, Tensor


@dataclass
class Decisions:
    """Non-differentiable choices made during a forward pass.

    Replaying a forward with the same decisions makes the output a smooth
    function of the parameters, which is what gradient checks need.
    """

    cells: np.ndarray
    k: int
    q_svd: np.ndarray | None
    clamped: bool = False
    degenerate: bool = False
    keep: np.ndarray | None = None


@dataclass
class ForwardOutput:
    heat: Tensor | None  # (H*W) x 1, None when the predictor is disabled
    xy: Tensor  # 1 x 2 offsets in the previous box frame
    zr: Tensor  # 1 x 2: dz, dtheta
    decisions: Decisions
    proxy: Tensor | None = None
    mask: np.ndarray | None = None
    attention: Tensor | None = None

    @property
    def k(self) -> int:
        return self.decisions.k

    @property
    def n(self) -> int:
        return int(self.decisions.cells.size)

    def offsets(self) -> np.ndarray:
        return np.concatenate([self.xy.data[0], self.zr.data[0]])


def init_head(rng: np.random.Generator, C: int) -> dict[str, Parameter]:
    p = {}
    for br in ("xy", "zr"):
        p[f"head.{br}.w1"] = T.init_uniform(rng, C, C, C, f"head.{br}.w1")
        p[f"head.{br}.b1"] = Parameter(np.zeros((1, C)), f"head.{br}.b1")
        p[f"head.{br}.w2"] = T.init_uniform(rng, C, 2, C, f"head.{br}.w2")
        p[f"head.{br}.b2"] = Parameter(np.zeros((1, 2)), f"head.{br}.b2")
    return p


def _branch(x: Tensor, params: dict, name: str) -> Tensor:
    h = T.relu(T.add(T.matmul(x, params[f"head.{name}.w1"]), params[f"head.{name}.b1"]))
    return T.add(T.matmul(h, params[f"head.{name}.w2"]), params[f"head.{name}.b2"])


def masked_mean(proxy: Tensor, mask) -> Tensor:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != proxy.shape[0]:
        raise T.ShapeError(f"mask length {mask.shape[0]} != proxy rows {proxy.shape[0]}")
    w = mask / mask.sum()
    return T.matmul(T.constant(w[None, :]), proxy)


def head_forward(proxy: Tensor, mask, params: dict) -> tuple[Tensor, Tensor]:
    """Masked mean over active proxy rows, then two parallel 2-layer perceptrons.

    Returns (dx, dy) and (dz, dtheta).  With no active rows both are zero.
    """
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        return T.constant(np.zeros((1, 2))), T.constant(np.zeros((1, 2)))
    pooled = masked_mean(proxy, mask)
    return _branch(pooled, params, "xy"), _branch(pooled, params, "zr")


def wrap_residual_target(pred: float, target: float) -> float:
    """Shift ``target`` by a multiple of 2*pi so pred - target lies in (-pi, pi]."""
    d = pred - target
    shift = 2 * math.pi * math.floor((d + math.pi) / (2 * math.pi))
    if d - shift == -math.pi:
        shift -= 2 * math.pi
    return target + shift


_PICK = (np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))


def compute_losses(xy: Tensor, zr: Tensor, gt, heat: Tensor | None, m_gt, cfg: Config):
    """Total loss and its parts.

    Tracking terms are smooth-L1 on (dx, dy), dz and the wrapped yaw
    residual; the predictor term is the heatmap MSE (absent when the
    predictor is disabled).
    """
    gt = np.asarray(gt, dtype=float).reshape(4)
    dz = T.matmul(zr, T.constant(_PICK[0]))
    dr = T.matmul(zr, T.constant(_PICK[1]))
    l_xy = T.smooth_l1(xy, gt[None, :2])
    l_z = T.smooth_l1(dz, [[gt[2]]])
    l_rot = T.smooth_l1(dr, [[wrap_residual_target(dr.item(), gt[3])]])
    track = T.add(T.add(T.scale(l_xy, cfg.lambda1), T.scale(l_z, cfg.lambda2)), T.scale(l_rot, cfg.lambda3))
    total = T.scale(track, cfg.theta2)
    parts = {"xy": l_xy.item(), "z": l_z.item(), "rot": l_rot.item(), "track": track.item(), "pred": 0.0}
    if heat is not None:
        l_pred = sfp.sfp_loss(heat, m_gt)
        total = T.add(T.scale(l_pred, cfg.theta1), total)
        parts["pred"] = l_pred.item()
    parts["total"] = total.item()
    return total, parts


class TrackerModel:
    def __init__(self, cfg: Config, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        C = cfg.C
        p: dict[str, Parameter] = {"pillar.proj": T.init_uniform(rng, N_RAW, C, N_RAW, "pillar.proj")}
        p.update(sfp.init_params(rng, C))
        p.update(ibdtc.init_params(rng, C, cfg.pool_size))
        p.update(ibdtc.init_mixer_params(rng, C))
        p.update(init_head(rng, C))
        if cfg.learnable_pe:
            H, W = cfg.H, cfg.W
            cells = np.arange(H * W)
            table = ibdtc.positional_encoding(np.column_stack([cells // W, cells % W]), C, H, W)
            p["ibdtc.pe"] = Parameter(table, "ibdtc.pe")
        if cfg.fusion_mode == "concat_linear":
            p["ibdtc.fuse"] = T.init_uniform(rng, 2 * C, C, 2 * C, "ibdtc.fuse")
        self.params = p

    # -- parameters -------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"checkpoint shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data[...] = v

    # -- forward ----------------------------------------------------------

    def rank_prior(self, x_prime: Tensor) -> Decisions:
        """Online SVD of the tokens: effective rank K and the first K right vectors."""
        cfg = self.cfg
        C = x_prime.shape[1]
        if x_prime.shape[0] == 0:
            return Decisions(np.zeros(0, dtype=np.int64), 1, np.zeros((1, C)), degenerate=True)
        spec = svd_thin(x_prime.data)
        est = effective_rank(spec, cfg.tau, limit=cfg.pool_size)
        q = spec.right_basis[: est.k].copy()
        if cfg.svd_row_scaling == "sigma":
            q *= spec.values[: est.k, None]
        if est.degenerate:
            q[:] = 0.0
        return Decisions(np.zeros(0, dtype=np.int64), est.k, q, est.clamped, est.degenerate)

    def active_queries(self, k: int, q_svd: np.ndarray, padded: bool) -> Tensor:
        cfg, P = self.cfg, self.params
        pool = P["ibdtc.queries"]
        L, C = pool.shape
        rows = L if padded else k
        prior = np.zeros((rows, C))
        if cfg.fusion_mode != "learnable_only":
            prior[:k] = q_svd
        learn = pool if padded else T.rows(pool, slice(0, k))
        mode = cfg.fusion_mode
        if mode == "addition":
            return T.add(learn, T.constant(prior))
        if mode == "learnable_only":
            return learn
        if mode == "svd_only":
            return T.constant(prior)
        return T.matmul(T.concat([learn, T.constant(prior)], axis=1), P["ibdtc.fuse"])

    def forward(
        self,
        template: RawPillars,
        search: RawPillars,
        padded: bool = False,
        decisions: Decisions | None = None,
        rng=None,
        profile: StageProfile | None = None,
    ) -> ForwardOutput:
        cfg, P = self.cfg, self.params
        H, W, C = cfg.grid
        proj = P["pillar.proj"]
        with stage(profile, "pillar"):
            f_s = T.matmul(T.constant(search.features), proj)
            if cfg.use_sfp:
                f_t = T.matmul(T.constant(template.features), proj)
        heat = None
        with stage(profile, "sfp"):
            if cfg.use_sfp:
                heat = sfp.sfp_forward(T.concat([f_t, f_s], axis=1), P, H, W)
                f_hat = sfp.modulate(f_s, heat)
                scores = heat.data[:, 0]
            else:
                f_hat = f_s
                scores = np.ones(H * W)

        with stage(profile, "tokens"):
            if decisions is None:
                cells = ibdtc.select_foreground(scores, search.occupancy, cfg.gamma, cfg.n_max)
            else:
                cells = decisions.cells
            coords = np.column_stack([cells // W, cells % W])
            if cfg.learnable_pe:
                pe = T.rows(P["ibdtc.pe"], cells)
            else:
                pe = T.constant(ibdtc.positional_encoding(coords, C, H, W))
            x_prime = T.add(T.rows(f_hat, cells), pe)

        if cells.size == 0:
            zero = T.constant(np.zeros((1, 2)))
            dec = decisions or Decisions(cells, 1, np.zeros((1, C)), degenerate=True)
            return ForwardOutput(heat, zero, zero, dec)

        attn = None
        if cfg.baseline != "none":
            with stage(profile, "compress"):
                seq = ibdtc.TokenSequence(x_prime, coords, cells)
                if decisions is not None and decisions.keep is not None and cfg.baseline == "random_drop_75":
                    keep = decisions.keep
                    proxy = T.matmul(T.rows(x_prime, keep), P["ibdtc.wv"])
                else:
                    proxy, keep = ibdtc.baseline_compress(seq, cfg.baseline, P, W, rng=rng)
            dec = Decisions(cells, proxy.shape[0], None, keep=keep)
            mask = np.ones(proxy.shape[0], dtype=bool)
        elif cfg.use_ibdtc:
            with stage(profile, "rank"):
                if decisions is None:
                    dec = self.rank_prior(x_prime)
                    dec.cells = cells
                else:
                    dec = decisions
            with stage(profile, "compress"):
                q_act = self.active_queries(dec.k, dec.q_svd, padded)
                proxy, attn = ibdtc.compress_tokens(x_prime, q_act, P)
                mask = ibdtc.adaptive_mask(dec.k, q_act.shape[0])
        else:
            # uncompressed: every token is its own query
            with stage(profile, "compress"):
                proxy, attn = ibdtc.cross_attention(x_prime, x_prime, P["ibdtc.wq"], P["ibdtc.wk"], P["ibdtc.wv"])
            dec = Decisions(cells, int(cells.size), None)
            mask = np.ones(cells.size, dtype=bool)

        with stage(profile, "head"):
            if cfg.proxy_mixer:
                proxy = ibdtc.masked_self_attention(proxy, mask, P)
            xy, zr = head_forward(proxy, mask, P)
        return ForwardOutput(heat, xy, zr, dec, proxy, mask, attn)
