"""Command-line entry point: gen, train, track, eval, bench, ablate.

Exit codes: 0 ok, 2 bad configuration or arguments, 3 missing or malformed
data, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import data, experiments
from .bev import write_pgm
from .config import Config, load_config
from .ibdtc import ConfigError
from .inference import infer_sequence
from .linalg import ConvergenceError
from .metrics import evaluate_ope, ope_from_errors
from .scene import read_boxes_csv, write_boxes_csv
from .serialize import CheckpointError
from .training import NumericalError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("lrtrack")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _config(args) -> Config:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or ())


def _write_json_lines(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = _config(args)
    if args.split:
        seeds = data.split_seeds(cfg, args.split)
    else:
        start = cfg.train_seed if args.seed is None else args.seed
        n = cfg.train_sequences if args.n is None else args.n
        if n < 1:
            raise UsageError("--n must be >= 1")
        seeds = list(range(start, start + n))
    paths = data.save_dataset(args.out, data.generate_sequences(cfg, seeds))
    log.info("wrote %d sequences to %s", len(paths), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    named = data.load_dataset(args.data)
    seqs = [s for _, s in named]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines, stamps = [], []

    def on_epoch(st):
        lines.append(f"epoch={st.epoch} lr={st.lr:.6g} loss={st.loss:.8f} track={st.track:.8f} pred={st.pred:.8f} mean_K={st.mean_k:.4f}")
        stamps.append(f"epoch={st.epoch} finished_at={time.strftime('%Y-%m-%dT%H:%M:%S')}")
        log.info(lines[-1])

    t0 = time.perf_counter()
    model, _ = train(seqs, cfg, on_epoch=on_epoch)
    save_checkpoint(out, model)
    Path(str(out) + ".log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    stamps.append(f"wall_seconds={time.perf_counter() - t0:.1f}")
    Path(str(out) + ".timing.log").write_text("\n".join(stamps) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_track(args) -> int:
    model = load_checkpoint(args.checkpoint)
    named = data.load_dataset(args.seq)
    out = Path(args.out)
    many = len(named) > 1
    if many:
        out.mkdir(parents=True, exist_ok=True)
    for name, seq in named:
        res = infer_sequence(seq, model, keep_heatmaps=bool(args.dump_heatmaps))
        write_boxes_csv(out / f"{name}.csv" if many else out, res.boxes, start_index=1)
        if args.dump_heatmaps:
            hdir = Path(args.dump_heatmaps) / name if many else Path(args.dump_heatmaps)
            hdir.mkdir(parents=True, exist_ok=True)
            for tr in res.traces:
                if tr.heatmap is not None:
                    write_pgm(hdir / f"{tr.frame_index:06d}.pgm", tr.heatmap)
    return EXIT_OK


def _predictions_for(pred: Path, name: str, single: bool):
    path = pred if (single and pred.is_file()) else pred / f"{name}.csv"
    if not path.exists():
        raise FileNotFoundError(f"no predictions for {name}: {path}")
    return read_boxes_csv(path)


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.pred):
        raise UsageError("eval needs exactly one of --checkpoint or --pred")
    named = data.load_dataset(args.data)
    records = []
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        ev = experiments.evaluate_model(model, [s for _, s in named], [n for n, _ in named], diagnostics=True)
        records.extend(dict(r) for r in ev.per_sequence)
        summary = {
            "success": ev.success,
            "precision": ev.precision,
            "mean_K": ev.mean_k,
            "mean_N": ev.mean_n,
            "entropy_before_sfp": ev.entropy_before,
            "entropy_after_sfp": ev.entropy_after,
            "frames": ev.report.n_frames,
        }
    else:
        pred = Path(args.pred)
        ious, dists = [], []
        for name, seq in named:
            rows = _predictions_for(pred, name, len(named) == 1)
            by_idx = dict(rows)
            missing = [t for t in range(1, len(seq)) if t not in by_idx]
            if missing:
                raise ValueError(f"{name}: predictions missing for frames {missing[:5]}")
            rep = evaluate_ope([by_idx[t] for t in range(1, len(seq))], seq.boxes[1:])
            ious += list(rep.ious)
            dists += list(rep.distances)
            records.append({"sequence": name, "success": rep.success, "precision": rep.precision, "frames": rep.n_frames})
        total = ope_from_errors(ious, dists)
        summary = {
            "success": total.success,
            "precision": total.precision,
            "mean_K": None,
            "mean_N": None,
            "entropy_before_sfp": None,
            "entropy_after_sfp": None,
            "frames": total.n_frames,
        }
    records.append({"summary": True, **summary})
    _write_json_lines(args.out, records)
    log.info("success %.4f precision %.4f", summary["success"], summary["precision"])
    return EXIT_OK


def cmd_bench(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.uncompressed:
        full = load_checkpoint(args.uncompressed)
    else:
        from .model import TrackerModel

        full = TrackerModel(model.cfg.replace(use_ibdtc=False))
        full.load_state(model.state())
    seqs = [s for _, s in data.load_dataset(args.data)]
    result = experiments.run_bench(model, full, seqs, repeats=args.repeats)
    C = model.cfg.C
    for label in ("compressed", "uncompressed"):
        r = result[label]
        q = r["mean_K"] if label == "compressed" else r["mean_N"]
        r["closed_form_attention_macs"] = experiments.attention_macs(q, r["mean_N"], C)
    Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("MAC ratio %.2f, time ratio %.2f", result["mac_ratio"], result["time_ratio"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    train_seqs = [s for _, s in data.load_dataset(args.train)] if args.train else data.generate_split(cfg, "train")
    test_seqs = [s for _, s in data.load_dataset(args.test)] if args.test else data.generate_split(cfg, "test")
    rows = experiments.run_ablation(cfg, train_seqs, test_seqs, on_row=lambda r: log.info("%s", r))
    experiments.write_ablation_csv(args.out, rows)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrtrack", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    g = with_config(sub.add_parser("gen", help="write synthetic sequences"))
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--split", choices=("train", "test"), help="use the config's seed range for this split")
    g.set_defaults(fn=cmd_gen)

    t = with_config(sub.add_parser("train", help="train a model"))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(fn=cmd_train)

    k = sub.add_parser("track", help="track sequences with a checkpoint")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--seq", required=True, help="a sequence directory or a dataset of them")
    k.add_argument("--out", required=True, help="CSV file (one sequence) or directory")
    k.add_argument("--dump-heatmaps", metavar="DIR")
    k.set_defaults(fn=cmd_track)

    e = sub.add_parser("eval", help="one-pass evaluation")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--pred", help="prediction CSV (one sequence) or directory of <name>.csv")
    e.add_argument("--out", required=True, help="JSON-lines report")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="compressed vs. all-token latency and MACs")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--uncompressed", help="checkpoint trained with use_ibdtc = false")
    b.add_argument("--data", required=True)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)

    a = with_config(sub.add_parser("ablate", help="fusion x tau x baseline matrix"))
    a.add_argument("--train", help="training dataset (default: generated from the config)")
    a.add_argument("--test", help="test dataset (default: generated from the config)")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except (NumericalError, ConvergenceError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except (OSError, CheckpointError, ValueError) as exc:
        code, msg = EXIT_DATA, str(exc)
    print(f"lrtrack {args.command}: {msg}".splitlines()[0], file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())
