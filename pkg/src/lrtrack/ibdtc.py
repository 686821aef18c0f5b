"""Rank-guided token compression.

Foreground cells of the modulated search grid become tokens.  An online SVD
of the (position-encoded) token matrix fixes how many compression queries
are active, K, and supplies a data-dependent prior for them; K learnable
queries plus that prior then cross-attend over the tokens to produce K proxy
tokens.  The SVD is a gradient barrier: its outputs enter the graph as
constants.

For fixed-shape training the query tensor is padded to the pool size L and
a leading-K mask keeps the inactive rows out of every later attention and
of the pooled output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .linalg import SingularSpectrum, effective_rank, svd_thin
from .tensor import Parameter, Tensor

FUSION_MODES = ("addition", "learnable_only", "svd_only", "concat_linear")
BASELINES = ("uniform_grid_1_8", "random_drop_75", "fixed_k_128")
MIN_TOKENS = 8


class ConfigError(ValueError):
    pass


@dataclass
class TokenSequence:
    tokens: Tensor  # N x C
    coords: np.ndarray  # (N, 2) int (row, col)
    cells: np.ndarray  # (N,) flat cell index

    def __post_init__(self):
        if self.tokens.shape[0] != self.coords.shape[0]:
            raise ValueError("token rows and coordinates differ in count")

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class QueryResult:
    k: int
    q_act: Tensor  # K x C, or L x C when padded
    q_svd: np.ndarray  # K x C (zeros for learnable_only / degenerate input)
    spectrum: SingularSpectrum | None
    clamped: bool = False
    degenerate: bool = False


@dataclass
class CompressionResult:
    k: int
    active_queries: Tensor
    proxy: Tensor
    mask: np.ndarray  # (rows of proxy,) bool, leading k True
    attention: Tensor | None = None


def init_params(rng: np.random.Generator, C: int, L: int, mode: str = "addition") -> dict[str, Parameter]:
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    p = {
        "ibdtc.queries": T.init_uniform(rng, L, C, C, "ibdtc.queries"),
        "ibdtc.wq": T.init_uniform(rng, C, C, C, "ibdtc.wq"),
        "ibdtc.wk": T.init_uniform(rng, C, C, C, "ibdtc.wk"),
        "ibdtc.wv": T.init_uniform(rng, C, C, C, "ibdtc.wv"),
    }
    if mode == "concat_linear":
        p["ibdtc.fuse"] = T.init_uniform(rng, 2 * C, C, 2 * C, "ibdtc.fuse")
    return p


# ---------------------------------------------------------------------------
# tokens


def select_foreground(heat: np.ndarray, occupancy: np.ndarray, gamma: float, n_max: int) -> np.ndarray:
    """Flat indices of the token cells, in descending heatmap order.

    Occupied cells scoring at least ``gamma`` qualify, capped at ``n_max``.
    If fewer than MIN_TOKENS qualify, the best MIN_TOKENS occupied cells are
    taken regardless of the threshold.  Ties keep raster order.
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigError(f"gamma must lie in [0, 1), got {gamma}")
    if n_max < 1:
        raise ConfigError("n_max must be >= 1")
    heat = np.asarray(heat, dtype=float).reshape(-1)
    occ = np.flatnonzero(np.asarray(occupancy, dtype=bool).reshape(-1))
    if occ.size == 0:
        return occ
    ranked = occ[np.argsort(-heat[occ], kind="stable")]
    chosen = ranked[heat[ranked] >= gamma]
    if chosen.size < MIN_TOKENS:
        chosen = ranked[:MIN_TOKENS]
    return chosen[:n_max]


def extract_foreground_tokens(f_hat: Tensor, heat, occupancy, W: int, gamma: float = 0.1, n_max: int = 512) -> TokenSequence:
    cells = select_foreground(heat, occupancy, gamma, n_max)
    coords = np.column_stack([cells // W, cells % W]).astype(np.int64)
    return TokenSequence(T.rows(f_hat, cells), coords, cells)


def pe_wavelengths(C: int, H: int, W: int) -> np.ndarray:
    """Geometric wavelengths from 2 to 2*max(H, W), one per sin/cos pair per axis."""
    n = (C // 2 + 1) // 2
    top = 2.0 * max(H, W)
    if n == 1:
        return np.array([2.0])
    return 2.0 * (top / 2.0) ** (np.arange(n) / (n - 1))


def positional_encoding(coords, C: int, H: int, W: int) -> np.ndarray:
    """Fixed 2-D sinusoidal codes; rows use the first C/2 channels, columns the rest.

    Within an axis block channel 2m is sin and 2m+1 is cos of
    2*pi*index/wavelength[m].
    """
    if C % 2:
        raise ConfigError(f"positional encoding needs an even channel count, got C={C}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    lam = pe_wavelengths(C, H, W)
    half = C // 2
    ch = np.arange(half)
    freq = 2 * math.pi / lam[ch // 2]
    is_sin = ch % 2 == 0
    out = np.empty((coords.shape[0], C))
    for axis in range(2):
        ang = coords[:, axis : axis + 1] * freq[None, :]
        out[:, axis * half : (axis + 1) * half] = np.where(is_sin[None, :], np.sin(ang), np.cos(ang))
    return out


def encode_tokens(seq: TokenSequence, H: int, W: int) -> TokenSequence:
    C = seq.tokens.shape[1]
    pe = positional_encoding(seq.coords, C, H, W)
    return TokenSequence(T.add(seq.tokens, T.constant(pe)), seq.coords, seq.cells)


# ---------------------------------------------------------------------------
# queries and compression


def build_active_queries(
    x_prime: Tensor,
    params: dict,
    tau: float = 0.99,
    mode: str = "addition",
    padded: bool = False,
    row_scaling: str = "unit",
) -> QueryResult:
    """Effective rank K and the active queries for one token matrix.

    ``padded`` returns all L pool rows (with the SVD prior zero-padded) so the
    caller can mask rows K..L-1 instead of slicing them away.
    """
    if mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {mode!r}")
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    if row_scaling not in ("unit", "sigma"):
        raise ConfigError(f"unknown svd row scaling {row_scaling!r}")
    pool = params["ibdtc.queries"]
    L, C = pool.shape
    n = x_prime.shape[0]
    spectrum = None
    clamped = degenerate = False
    if n == 0:
        k, q_svd, degenerate = 1, np.zeros((1, C)), True
    else:
        spectrum = svd_thin(x_prime.data)
        est = effective_rank(spectrum, tau, limit=L)
        k, clamped, degenerate = est.k, est.clamped, est.degenerate
        q_svd = spectrum.right_basis[:k].copy()
        if row_scaling == "sigma":
            q_svd *= spectrum.values[:k, None]
        if degenerate:
            q_svd[:] = 0.0
    if mode == "learnable_only":
        q_svd = np.zeros_like(q_svd)

    rows = L if padded else k
    prior = np.zeros((rows, C))
    prior[:k] = q_svd
    learn = pool if padded else T.rows(pool, slice(0, k))
    if mode == "addition":
        q_act = T.add(learn, T.constant(prior))
    elif mode == "learnable_only":
        q_act = learn
    elif mode == "svd_only":
        q_act = T.constant(prior)
    else:
        q_act = T.matmul(T.concat([learn, T.constant(prior)], axis=1), params["ibdtc.fuse"])
    return QueryResult(k, q_act, q_svd, spectrum, clamped, degenerate)


def cross_attention(queries: Tensor, tokens: Tensor, wq, wk, wv, key_mask=None) -> tuple[Tensor, Tensor]:
    """softmax(q Wq (x Wk)^T / sqrt(C)) x Wv, returned with the attention matrix."""
    C = tokens.shape[1]
    q = T.matmul(queries, wq)
    k = T.matmul(tokens, wk)
    v = T.matmul(tokens, wv)
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(C))
    attn = T.softmax_rows(logits, mask=key_mask)
    return T.matmul(attn, v), attn


def compress_tokens(x_prime: Tensor, q_act: Tensor, params: dict) -> tuple[Tensor, Tensor | None]:
    """Proxy tokens (rows of ``q_act``) from guided cross-attention.

    An empty token set gives all-zero proxies and no attention matrix.
    """
    if x_prime.shape[0] == 0:
        return T.constant(np.zeros(q_act.shape)), None
    return cross_attention(q_act, x_prime, params["ibdtc.wq"], params["ibdtc.wk"], params["ibdtc.wv"])


def adaptive_mask(k: int, L: int) -> np.ndarray:
    """Boolean length-L mask with the first k entries set."""
    if not 1 <= k <= L:
        raise ValueError(f"adaptive mask needs 1 <= K <= L, got K={k}, L={L}")
    m = np.zeros(L, dtype=bool)
    m[:k] = True
    return m


def init_mixer_params(rng: np.random.Generator, C: int) -> dict[str, Parameter]:
    return {f"mix.{n}": T.init_uniform(rng, C, C, C, f"mix.{n}") for n in ("wq", "wk", "wv")}


def masked_self_attention(proxy: Tensor, mask: np.ndarray, params: dict) -> Tensor:
    """One residual self-attention layer over the proxy rows.

    Masked rows get -inf logits as keys, so they add nothing to active rows;
    their own outputs are computed but never read.
    """
    ctx, _ = cross_attention(proxy, proxy, params["mix.wq"], params["mix.wk"], params["mix.wv"], key_mask=mask)
    return T.add(proxy, ctx)


def apply_adaptive_mask(padded_queries: Tensor, k: int, x_prime: Tensor, params: dict, mix: bool = True) -> CompressionResult:
    """Compress with L padded queries and mask everything past the first k."""
    L = padded_queries.shape[0]
    mask = adaptive_mask(k, L)
    proxy, attn = compress_tokens(x_prime, padded_queries, params)
    if mix:
        proxy = masked_self_attention(proxy, mask, params)
    return CompressionResult(k, padded_queries, proxy, mask, attn)


# ---------------------------------------------------------------------------
# naive baselines


def baseline_compress(seq: TokenSequence, method: str, params: dict, W: int, rng=None) -> tuple[Tensor, np.ndarray | None]:
    """Proxy rows from a geometry-agnostic reduction of ``seq``.

    Returns the proxy matrix and, for the subsampling methods, the kept token
    indices.  Subsampled tokens go through the value projection so the head
    sees the same space as attention outputs.
    """
    if method not in BASELINES:
        raise ConfigError(f"unknown baseline {method!r}")
    n = len(seq)
    wv = params["ibdtc.wv"]
    if method == "fixed_k_128":
        pool = params["ibdtc.queries"]
        k = min(128, pool.shape[0])
        q = T.rows(pool, slice(0, k))
        if n == 0:
            return T.constant(np.zeros((k, pool.shape[1]))), None
        proxy, _ = cross_attention(q, seq.tokens, params["ibdtc.wq"], params["ibdtc.wk"], wv)
        return proxy, None
    if n == 0:
        return T.constant(np.zeros((1, wv.shape[1]))), np.zeros(0, dtype=np.int64)
    if method == "uniform_grid_1_8":
        raster = seq.coords[:, 0] * W + seq.coords[:, 1]
        keep = np.argsort(raster, kind="stable")[::8]
    else:
        rng = np.random.default_rng(rng)
        m = max(1, int(round(0.25 * n)))
        keep = np.sort(rng.permutation(n)[:m])
    return T.matmul(T.rows(seq.tokens, keep), wv), keep
