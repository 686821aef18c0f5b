"""Seeded train/test splits and their on-disk layout (one directory per sequence)."""
from __future__ import annotations

from pathlib import Path

from .config import Config
from .scene import Sequence, generate_sequence, load_sequence, save_sequence


def split_seeds(cfg: Config, split: str) -> list[int]:
    if split == "train":
        return list(range(cfg.train_seed, cfg.train_seed + cfg.train_sequences))
    if split == "test":
        return list(range(cfg.test_seed, cfg.test_seed + cfg.test_sequences))
    raise ValueError(f"split must be 'train' or 'test', got {split!r}")


def generate_sequences(cfg: Config, seeds) -> list[Sequence]:
    return [generate_sequence(s, cfg.frames, cfg.cls, cfg.clutter_density, cfg.surface_bias) for s in seeds]


def generate_split(cfg: Config, split: str) -> list[Sequence]:
    return generate_sequences(cfg, split_seeds(cfg, split))


def sequence_dir_name(index: int) -> str:
    return f"seq_{index:04d}"


def save_dataset(directory, sequences) -> list[Path]:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, seq in enumerate(sequences):
        p = root / sequence_dir_name(i)
        save_sequence(p, seq)
        paths.append(p)
    return paths


def load_dataset(directory) -> list[tuple[str, Sequence]]:
    """All sequences under ``directory`` (sorted by name), or the directory itself if it is one."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"no such dataset directory: {root}")
    if (root / "gt.csv").exists():
        return [(root.name, load_sequence(root))]
    subdirs = sorted(p for p in root.iterdir() if (p / "gt.csv").exists())
    if not subdirs:
        raise FileNotFoundError(f"{root} holds no sequences (no gt.csv found)")
    return [(p.name, load_sequence(p)) for p in subdirs]
