"""Likelihood evaluation, category statistics and batch generation with export."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .diffusion import loss_autoregressive, loss_continuous, sample, sample_autoregressive, step_rng
from .schedule import LogLinearSchedule
from .train import Dataset
from .voxels import OccupancyMap, SequenceOverflow, Vocabulary, VoxelGrid, write_grid

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    nll: float
    perplexity: float
    stderr: float
    tokens: int
    mc_draws: int
    categories: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)


def evaluate_nll(
    model,
    data: Dataset,
    schedule: LogLinearSchedule,
    mc_draws: int = 8,
    seed: int = 0,
    active_only: bool = False,
    batch_size: int = 64,
    position_mode: str = "input",
) -> EvalReport:
    """Mean per-token NLL bound in nats; ``perplexity = exp(nll)``.

    Diffusion models average ``mc_draws`` continuous-time NELBO draws per
    sequence; causal models are scored exactly. ``stderr`` is the standard
    error of the mean over sequences.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if mc_draws < 1:
        raise ValueError("mc_draws must be >= 1")
    causal = bool(getattr(model.cfg, "causal", False))
    draws = 1 if causal else mc_draws
    n = len(data)
    seq_loss = np.zeros(n)
    seq_tokens = np.zeros(n)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            tokens, positions, k = data.batch(idx)
            L = tokens.shape[1]
            seq_tokens[idx] = k if active_only else L
            for d in range(draws):
                if causal:
                    res = loss_autoregressive(
                        model, tokens, positions, position_mode=position_mode, k=k, active_only=active_only
                    )
                else:
                    rng = step_rng(seed, (d << 32) | start)
                    res = loss_continuous(model, tokens, positions, schedule, rng, k=k, active_only=active_only)
                seq_loss[idx] += res.per_slot.sum(1) / draws
    per_seq = seq_loss / np.maximum(seq_tokens, 1)
    nll = float(seq_loss.sum() / seq_tokens.sum())
    stderr = float(per_seq.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return EvalReport(nll, math.exp(nll), stderr, int(seq_tokens.sum()), draws, seeds=[seed])


def category_histogram(structures: Iterable[VoxelGrid], top: int = 3) -> tuple[dict[int, float], float]:
    """Pooled block-id frequencies and the share held by the ``top`` most common ids."""
    counts: Counter[int] = Counter()
    for g in structures:
        counts.update(g.cells.values())
    total = sum(counts.values())
    if total == 0:
        raise ValueError("no occupied voxels to count")
    freqs = {b: c / total for b, c in sorted(counts.items())}
    collapse = sum(c for _, c in counts.most_common(top)) / total
    return freqs, collapse


@dataclass
class GeneratedItem:
    index: int
    seed: int
    grid: VoxelGrid | None
    paths: list[Path] = field(default_factory=list)
    error: str | None = None


def generate_batch(
    occupancies: Sequence[OccupancyMap],
    model,
    vocab: Vocabulary,
    seeds: Sequence[int],
    out_dir: str | Path | None = None,
    steps: int = 256,
    schedule: LogLinearSchedule | None = None,
    formats: Sequence[str] = ("json", "bin"),
    trace: bool = False,
    cached: bool = True,
    autoregressive: bool = False,
    temperature: float = 1.0,
    position_mode: str = "input",
) -> list[GeneratedItem]:
    """One uncurated sample per (occupancy, seed) pair, optionally written to disk.

    A single occupancy is reused for every seed. Items whose occupancy does
    not fit the model's sequence length are reported and skipped.
    """
    schedule = schedule or LogLinearSchedule()
    if len(occupancies) == 1:
        occupancies = list(occupancies) * len(seeds)
    if len(occupancies) != len(seeds):
        raise ValueError("need one seed per occupancy")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    items = []
    for i, (occ, seed) in enumerate(zip(occupancies, seeds)):
        try:
            if occ.k > model.cfg.L:
                raise SequenceOverflow(f"{occ.k} occupied voxels exceed L={model.cfg.L}")
            tr = None
            if autoregressive:
                grid = sample_autoregressive(occ, model, vocab, seed, temperature, position_mode)
                tag = f"occ{i:03d}_seed{seed}_ar"
            else:
                grid, tr = sample(occ, model, vocab, schedule, steps, seed, cached)
                tag = f"occ{i:03d}_seed{seed}_T{steps}"
        except SequenceOverflow as e:
            logger.error("item %d (seed %d): %s", i, seed, e)
            items.append(GeneratedItem(i, seed, None, error=str(e)))
            continue
        item = GeneratedItem(i, seed, grid)
        if out is not None:
            if "json" in formats:
                item.paths.append(out / f"{tag}.json")
            if "bin" in formats:
                item.paths.append(out / f"{tag}.scfd")
            for p in item.paths:
                write_grid(grid, p)
            if trace and tr is not None:
                p = out / f"{tag}.trace.ndjson"
                p.write_text(tr.to_ndjson(vocab.mask))
                item.paths.append(p)
        items.append(item)
    return items
