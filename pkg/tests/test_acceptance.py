"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end, compression and ablation criteria train real models and take
tens of minutes on a single core; they are marked ``slow``.
"""
import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from lrtrack import experiments, ibdtc
from lrtrack import tensor as T
from lrtrack.bev import bev_entropy
from lrtrack.config import load_config
from lrtrack.data import generate_split
from lrtrack.gradcheck import grad_check
from lrtrack.inference import hold_first
from lrtrack.linalg import effective_rank, svd_thin, truncation_residual
from lrtrack.metrics import evaluate_ope, iou3d, ope_from_errors
from lrtrack.model import TrackerModel, compute_losses
from lrtrack.scene import Box3D
from lrtrack.training import grid_spec, make_sample, train

from test_ibdtc import params as ibdtc_params
from test_ibdtc import planted_tokens
from test_tensor import CASES
from test_tracker import TINY, random_box, raster_iou, tiny_seqs

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


# ------------------------------------------------------------ 1. Eckart-Young


def test_eckart_young(criterion):
    t0 = time.perf_counter()
    worst, beaten = 0.0, True
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = r.normal(size=(200, 64)) * np.geomspace(10, 0.1, 64)
        spec = svd_thin(x)
        for k in (1, 4, 8):
            res = truncation_residual(x, spec, k)
            tail = float(np.sum(spec.values[k:] ** 2))
            worst = max(worst, abs(res - tail) / tail)
            for _ in range(100):
                q, _ = np.linalg.qr(r.normal(size=(64, k)))
                beaten &= res <= float(np.sum((x - x @ q @ q.T) ** 2))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and beaten and elapsed < 5.0
    criterion(1, ok, f"max rel err {worst:.2e}, beats random projections: {beaten}, {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------ 2. rank rule


def test_rank_rule(criterion):
    in_band, monotone = 0, True
    for seed in range(50):
        spec = svd_thin(planted_tokens(seed, n=200, c=32, rank=8, noise=1e-3))
        ks = [effective_rank(spec, tau).k for tau in (0.95, 0.99, 0.999)]
        in_band += 8 <= ks[1] <= 12
        monotone &= ks[0] <= ks[1] <= ks[2]
    ok = in_band >= 45 and monotone
    criterion(2, ok, f"K in [8,12] on {in_band}/50 seeds, monotone in tau: {monotone}")
    assert ok


# ------------------------------------------------------------ 3. gradients


def _primitive_reports():
    for name, (make, op) in sorted(CASES.items()):
        for seed in range(5):
            r = np.random.default_rng(seed)
            ps = make(r)
            if name == "relu":
                ps[0].data[np.abs(ps[0].data) < 1e-3] = 0.5
            if name == "smooth_l1":
                ps[0].data[np.abs(np.abs(ps[0].data) - 1.0) < 1e-3] = 0.5
            shape = op(*ps).shape
            u = T.constant(r.normal(size=(1, shape[0])))
            v = T.constant(r.normal(size=(shape[1], 1)))
            yield name, grad_check(lambda: T.matmul(T.matmul(u, op(*ps)), v), ps, tolerance=1e-4)


def _module_reports():
    r = np.random.default_rng(3)
    p = ibdtc_params(C=8, L=6)
    x = T.Parameter(r.normal(size=(20, 8)), "tokens")
    q = T.rows(p["ibdtc.queries"], slice(0, 4))
    target = r.normal(size=(4, 8))

    def compress():
        proxy, _ = ibdtc.compress_tokens(x, q, p)
        return T.mse(ibdtc.masked_self_attention(proxy, np.ones(4, bool), p), target)

    yield "compress+mixer", grad_check(compress, [x] + list(p.values()), tolerance=1e-4)

    def padded():
        return T.mse(ibdtc.apply_adaptive_mask(p["ibdtc.queries"], 3, x, p).proxy, np.zeros((6, 8)))

    yield "padded compression", grad_check(padded, [x] + list(p.values()), tolerance=1e-4)

    for mode in ("addition", "concat_linear", "learnable_only", "svd_only"):
        cfg = dataclasses.replace(TINY, fusion_mode=mode, augment=False)
        model = TrackerModel(cfg, seed=1)
        for prm in model.params.values():
            if prm.shape[0] == 1:
                prm.data += 0.05 * np.random.default_rng(2).normal(size=prm.shape)
        s = make_sample(tiny_seqs(1, seed=9)[0], 2, cfg, grid_spec(cfg))
        dec = model.forward(s.template, s.search, padded=True).decisions

        def loss():
            out = model.forward(s.template, s.search, padded=True, decisions=dec)
            return compute_losses(out.xy, out.zr, s.target, out.heat, s.heatmap, cfg)[0]

        yield f"composed loss ({mode})", grad_check(loss, list(model.params.values()), tolerance=1e-4)


def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    failed, worst, count = [], 0.0, 0
    for name, report in list(_primitive_reports()) + list(_module_reports()):
        count += 1
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failed.append(name)
    elapsed = time.perf_counter() - t0
    ok = not failed and elapsed < 60.0
    criterion(3, ok, f"{count} checks, worst rel err {worst:.2e}, failures {failed}, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------ 4. masking


def test_masking_equivalence(criterion):
    r = np.random.default_rng(11)
    pairs = [(1, 1), (1, 8), (12, 12), (32, 32)] + [tuple(sorted(r.integers(1, 33, size=2))) for _ in range(16)]
    worst = 0.0
    for k, L in pairs:
        p = ibdtc_params(C=8, L=L, seed=7 * k + L)
        x = T.constant(r.normal(size=(int(r.integers(1, 60)), 8)))
        padded = ibdtc.apply_adaptive_mask(p["ibdtc.queries"], k, x, p)
        proxy, _ = ibdtc.compress_tokens(x, T.rows(p["ibdtc.queries"], slice(0, k)), p)
        sliced = ibdtc.masked_self_attention(proxy, np.ones(k, bool), p)
        worst = max(worst, float(np.max(np.abs(padded.proxy.data[:k] - sliced.data))))
    ok = worst < 1e-6 and len(pairs) == 20
    criterion(4, ok, f"{len(pairs)} (K, L) pairs, max abs diff {worst:.2e}")
    assert ok


# ------------------------------------------------------------ 5. entropy


ENTROPY_CASES = [  # (occupied cells, H_fg, H, W)
    (1, 0.0, 1, 2),
    (1, 1.0, 2, 2),
    (2, 3.0, 2, 2),
    (3, 0.5, 2, 2),
    (1, 4.0, 4, 4),
    (8, 2.0, 4, 4),
    (10, 7.5, 5, 4),
    (164, 4.0, 128, 128),
    (4096, 0.25, 128, 128),
    (7, 12.0, 3, 9),
]


def test_entropy_diagnostics(criterion):
    worst = 0.0
    for n, hfg, H, W in ENTROPY_CASES:
        mask = np.zeros(H * W, dtype=bool)
        mask[np.random.default_rng(n).permutation(H * W)[:n]] = True
        p = n / (H * W)
        expected = H * W * (-p * math.log2(p) - (1 - p) * math.log2(1 - p) + p * hfg)
        worst = max(worst, abs(bev_entropy(mask.reshape(H, W), hfg) - expected) / expected)
    empty = bev_entropy(np.zeros((16, 16), dtype=bool), 5.0)
    ok = worst < 1e-12 and empty == 0.0
    criterion(5, ok, f"{len(ENTROPY_CASES)} cases, max rel err {worst:.1e}, empty grid {empty}")
    assert ok


# ------------------------------------------------------------ 6-8. trained models


@pytest.fixture(scope="session")
def benchmark():
    cfg = load_config(CONFIGS / "benchmark.cfg")
    t0 = time.perf_counter()
    train_seqs, test_seqs = generate_split(cfg, "train"), generate_split(cfg, "test")
    model, _ = train(train_seqs, cfg)
    ev = experiments.evaluate_model(model, test_seqs, diagnostics=False)
    elapsed = time.perf_counter() - t0
    return {"cfg": cfg, "train": train_seqs, "test": test_seqs, "model": model, "eval": ev, "seconds": elapsed}


def _zero_offset(seqs):
    ious, dists = [], []
    for s in seqs:
        rep = evaluate_ope(hold_first(s), s.boxes[1:])
        ious += list(rep.ious)
        dists += list(rep.distances)
    return ope_from_errors(ious, dists)


@pytest.mark.slow
def test_end_to_end_tracking(benchmark, criterion):
    ev, zero = benchmark["eval"], _zero_offset(benchmark["test"])
    gain = ev.success - zero.success
    ok = ev.success >= 0.50 and gain >= 0.10 and benchmark["seconds"] <= 1800
    criterion(
        6,
        ok,
        f"Success {ev.success:.3f} / Precision {ev.precision:.3f}, zero-offset {zero.success:.3f}, "
        f"gain {100 * gain:.1f} pts, train+eval {benchmark['seconds']:.0f}s",
    )
    assert ok


@pytest.mark.slow
def test_compression_benefit(benchmark, criterion):
    cfg = benchmark["cfg"].replace(use_ibdtc=False)
    full, _ = train(benchmark["train"], cfg)
    res = experiments.run_bench(benchmark["model"], full, benchmark["test"])
    c = res["compressed"]
    ok = (
        c["mean_K"] <= c["mean_N"] / 4
        and res["mac_ratio"] >= 2.0
        and res["time_ratio"] >= 1.5
        and res["success_gap"] <= 0.02
    )
    criterion(
        7,
        ok,
        f"mean K {c['mean_K']:.1f} vs N/4 {c['mean_N'] / 4:.1f}, MAC ratio {res['mac_ratio']:.2f}, "
        f"time ratio {res['time_ratio']:.2f}, Success {c['success']:.3f} vs all-token "
        f"{res['uncompressed']['success']:.3f}",
    )
    assert ok


@pytest.mark.slow
def test_ablation_matrix(criterion):
    cfg = load_config(CONFIGS / "ablation.cfg")
    rows = experiments.run_ablation(cfg, generate_split(cfg, "train"), generate_split(cfg, "test"))
    complete = len(rows) == len(experiments.ablation_cells()) and not any(r["error"] for r in rows)
    by_cell = {(r["variant"], r["tau"]): r for r in rows}
    add = float(by_cell[("addition", "0.99")]["success"] or "nan")
    naive = {b: float(by_cell[(b, "-")]["success"] or "nan") for b in ("uniform_grid_1_8", "random_drop_75")}
    ok = complete and all(add >= v for v in naive.values())
    criterion(
        8,
        ok,
        f"{len(rows)} cells, errors {[r['variant'] for r in rows if r['error']]}, addition {add:.3f} vs "
        + ", ".join(f"{k} {v:.3f}" for k, v in naive.items()),
    )
    assert ok


# ------------------------------------------------------------ 9. IoU


def test_iou_oracle(criterion):
    r = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        a, b = random_box(r), random_box(r)
        worst = max(worst, abs(iou3d(a, b) - raster_iou(a, b)))
    # axis-aligned: boxes (w, h, l) with w along y and l along x
    closed = [
        (Box3D(0, 0, 0, 2, 2, 2, 0), Box3D(1, 0, 0, 2, 2, 2, 0), 4 / 12),
        (Box3D(0, 0, 0, 2, 2, 2, 0), Box3D(1, 1, 1, 2, 2, 2, 0), 1 / 15),
        (Box3D(0, 0, 0, 2, 2, 4, 0), Box3D(0, 0, 0, 1, 1, 1, 0), 1 / 16),
        (Box3D(0, 0, 0, 1, 1, 1, 0), Box3D(3, 0, 0, 1, 1, 1, 0), 0.0),
        (Box3D(0, 0, 0, 2, 2, 2, math.pi / 2), Box3D(0, 1, 0, 2, 2, 2, 0), 4 / 12),
    ]
    exact = max(abs(iou3d(a, b) - v) for a, b, v in closed)
    ok = worst < 0.01 and exact < 1e-12
    criterion(9, ok, f"max raster deviation {worst:.4f} on 100 pairs, closed-form error {exact:.1e}")
    assert ok
