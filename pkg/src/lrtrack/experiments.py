"""Evaluation over a test split, the latency/MAC benchmark and the ablation matrix."""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
import traceback
from dataclasses import dataclass

import numpy as np

from .config import Config
from .inference import infer_sequence
from .metrics import OpeReport, evaluate_ope, ope_from_errors
from .model import TrackerModel
from .profiling import StageProfile
from .scene import Sequence
from .training import train

log = logging.getLogger(__name__)

FUSION_SWEEP = ("addition", "learnable_only", "svd_only", "concat_linear")
TAU_SWEEP = (0.95, 0.99, 0.999)
BASELINE_SWEEP = ("uniform_grid_1_8", "random_drop_75", "fixed_k_128")
ABLATION_COLUMNS = ("variant", "tau", "mean_K", "success", "precision", "forward_ms", "error")


@dataclass
class Evaluation:
    report: OpeReport
    mean_k: float
    mean_n: float
    entropy_before: float
    entropy_after: float
    forward_ms: float
    per_sequence: list[dict]

    @property
    def success(self) -> float:
        return self.report.success

    @property
    def precision(self) -> float:
        return self.report.precision


def evaluate_model(model: TrackerModel, sequences, names=None, diagnostics: bool = True) -> Evaluation:
    """Track every sequence and pool all frames into one OPE report."""
    names = names or [f"seq_{i:04d}" for i in range(len(sequences))]
    ious, dists, ks, ns, eb, ea, per = [], [], [], [], [], [], []
    t0 = time.perf_counter()
    n_frames = 0
    for name, seq in zip(names, sequences):
        res = infer_sequence(seq, model, diagnostics=diagnostics)
        rep = evaluate_ope(res.boxes, seq.boxes[1:])
        live = [t for t in res.traces if not t.held]
        ks += [t.k for t in live]
        ns += [t.n_tokens for t in live]
        eb += [t.entropy_before for t in live]
        ea += [t.entropy_after for t in live]
        ious += list(rep.ious)
        dists += list(rep.distances)
        n_frames += len(res.traces)
        per.append(
            {
                "sequence": name,
                "success": rep.success,
                "precision": rep.precision,
                "mean_K": res.mean("k"),
                "mean_N": res.mean("n_tokens"),
                "frames": rep.n_frames,
            }
        )
    elapsed = time.perf_counter() - t0

    def mean(v):
        return float(np.mean(v)) if v else 0.0

    return Evaluation(
        ope_from_errors(ious, dists), mean(ks), mean(ns), mean(eb), mean(ea), 1e3 * elapsed / max(n_frames, 1), per
    )


# ---------------------------------------------------------------------------
# benchmark

COMPRESSION_STAGES = ("rank", "compress", "head")


def attention_macs(n_queries: int, n_tokens: int, C: int) -> int:
    """Closed-form multiply-accumulates of one cross-attention call.

    Query projection, key and value projections, logits and the weighted sum.
    """
    return n_queries * C * C + 2 * n_tokens * C * C + 2 * n_queries * n_tokens * C


def profile_variant(model: TrackerModel, sequences, repeats: int = 1) -> tuple[StageProfile, Evaluation]:
    infer_sequence(sequences[0], model)  # warm-up: JIT compilation and caches stay out of the timings
    prof = StageProfile()
    for _ in range(repeats):
        for seq in sequences:
            infer_sequence(seq, model, profile=prof)
    return prof, evaluate_model(model, sequences, diagnostics=False)


def run_bench(compressed: TrackerModel, uncompressed: TrackerModel, sequences, repeats: int = 1) -> dict:
    """Per-stage time and MACs of the compressed model vs. the all-token variant.

    Both are run frame by frame over the same sequences; frame counts agree
    so per-frame figures are directly comparable.
    """
    if uncompressed.cfg.use_ibdtc or uncompressed.cfg.baseline != "none":
        raise ValueError("the uncompressed variant must run with use_ibdtc = false and no baseline")
    out = {}
    for label, model in (("compressed", compressed), ("uncompressed", uncompressed)):
        prof, ev = profile_variant(model, sequences, repeats)
        frames = max(prof.calls.get("head", 0), 1)
        out[label] = {
            "success": ev.success,
            "precision": ev.precision,
            "mean_K": ev.mean_k,
            "mean_N": ev.mean_n,
            "frames": frames,
            "stage_ms": {k: 1e3 * v / frames for k, v in sorted(prof.seconds.items())},
            "stage_macs": {k: v / frames for k, v in sorted(prof.macs.items())},
            "compression_ms": 1e3 * prof.total(COMPRESSION_STAGES) / frames,
            "compression_macs": prof.total(COMPRESSION_STAGES, "macs") / frames,
        }
    c, u = out["compressed"], out["uncompressed"]
    out["mac_ratio"] = u["compression_macs"] / max(c["compression_macs"], 1.0)
    out["time_ratio"] = u["compression_ms"] / max(c["compression_ms"], 1e-12)
    out["success_gap"] = u["success"] - c["success"]
    return out


# ---------------------------------------------------------------------------
# ablation


def ablation_cells(taus=TAU_SWEEP, modes=FUSION_SWEEP, baselines=BASELINE_SWEEP) -> list[tuple[str, str, dict]]:
    """(variant, tau label, config overrides) for the full matrix.

    Every fusion mode is crossed with every tau; each baseline is one row
    since it never consults the rank rule.
    """
    cells = []
    for mode in modes:
        for tau in taus:
            cells.append((mode, repr(tau), {"fusion_mode": mode, "tau": tau}))
    for b in baselines:
        cells.append((b, "-", {"baseline": b}))
    return cells


def run_ablation(
    cfg: Config,
    train_seqs: list[Sequence],
    test_seqs: list[Sequence],
    cells=None,
    on_row=None,
) -> list[dict]:
    """Train and evaluate one model per cell; failures become rows with an error."""
    rows = []
    for variant, tau, over in cells or ablation_cells():
        row = {"variant": variant, "tau": tau, "mean_K": "", "success": "", "precision": "", "forward_ms": "", "error": ""}
        try:
            cell_cfg = dataclasses.replace(cfg, **over).validate()
            model, _ = train(train_seqs, cell_cfg)
            ev = evaluate_model(model, test_seqs, diagnostics=False)
            row.update(
                mean_K=f"{ev.mean_k:.3f}",
                success=f"{ev.success:.4f}",
                precision=f"{ev.precision:.4f}",
                forward_ms=f"{ev.forward_ms:.3f}",
            )
        except Exception as exc:  # recorded, never dropped
            log.debug("ablation cell %s/%s failed:\n%s", variant, tau, traceback.format_exc())
            row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow(r)
