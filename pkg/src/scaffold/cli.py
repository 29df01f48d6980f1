"""``scaffold`` command line: ingest, train, sample, eval, stats.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint
from .backbone import BackboneConfig, NumericError
from .evaluate import category_histogram, evaluate_nll, generate_batch
from .schedule import LogLinearSchedule
from .train import (
    Dataset,
    NonFiniteGradient,
    configs_from_flat,
    load_model,
    parse_config,
    train,
)
from .voxels import (
    StructureTooLarge,
    VoxelDataError,
    Vocabulary,
    filter_dataset,
    load_dataset,
    occupancy_from_json,
    read_placements,
    save_dataset,
    sparsity_stats,
    voxelize,
)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("scaffold")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj):
    print(json.dumps(obj, indent=2, default=str))


def cmd_ingest(args) -> int:
    houses = read_placements(args.input, strict=not args.lenient)
    grids, names, too_large = [], [], 0
    for house_id, placements in houses:
        try:
            grids.append(voxelize(placements, args.dim))
            names.append(house_id)
        except StructureTooLarge:
            too_large += 1
    keep = [i for i, g in enumerate(grids) if g in filter_dataset([g], args.max_blocks, args.dim)]
    kept = [grids[i] for i in keep]
    if not kept:
        raise VoxelDataError("no structure survived filtering")
    vocab = Vocabulary.from_grids(kept)
    save_dataset(args.out, kept, vocab, [names[i] for i in keep])
    stats = sparsity_stats(kept, args.dim)
    summary = {
        "houses": len(houses),
        "retained": len(kept),
        "rejected": len(houses) - len(kept),
        "rejected_too_large": too_large,
        "vocab_size": vocab.size,
        "mean_background": stats["mean_background"],
        "dim": args.dim,
        "max_blocks": args.max_blocks,
    }
    (Path(args.out) / "stats.json").write_text(json.dumps(summary, indent=2))
    _emit(summary)
    return 0


def _dataset_dim(grids) -> int:
    return max(g.dim for g in grids)


def cmd_train(args) -> int:
    flat = parse_config(Path(args.config).read_text())
    model_kw, train_cfg, other = configs_from_flat(flat)
    data_dir = other.get("data.dir")
    if data_dir is None:
        raise UsageError("config needs data.dir")
    grids, vocab = load_dataset(data_dir)
    model_kw.setdefault("dim", _dataset_dim(grids))
    model_kw["V_total"] = vocab.total
    if train_cfg.loss == "autoregressive":
        model_kw["causal"] = True
        model_kw["time_conditioning"] = False
    model_cfg = BackboneConfig(**model_kw)
    data = Dataset.from_grids(grids, model_cfg.L, vocab)
    out = Path(other.get("out.dir", "runs/latest"))
    extra = {"vocab": vocab.token_to_block, "data_dir": str(data_dir)}
    res = train(data, model_cfg, train_cfg, out, resume=args.resume, extra=extra)
    _emit({
        "steps": res.state.step,
        "final_loss": res.curve[-1]["loss"] if res.curve else None,
        "checkpoint": res.checkpoint_path,
        "loss_curve": out / "loss_curve.csv",
    })
    return 0


def _load_for_inference(ckpt):
    model, config = load_model(ckpt)
    vocab = Vocabulary(config["extra"]["vocab"])
    return model, config, vocab


def cmd_sample(args) -> int:
    model, config, vocab = _load_for_inference(args.ckpt)
    if args.occupancy:
        occ = occupancy_from_json(Path(args.occupancy).read_text())
    else:
        data_dir = args.data or config["extra"].get("data_dir")
        grids, _ = load_dataset(data_dir)
        if not 0 <= args.from_data < len(grids):
            raise UsageError(f"--from-data index outside [0, {len(grids)})")
        occ = grids[args.from_data].occupancy()
    seeds = [args.seed + i for i in range(args.n)]
    formats = {"json": ("json",), "bin": ("bin",), "both": ("json", "bin")}[args.format]
    items = generate_batch(
        [occ], model, vocab, seeds, args.out, steps=args.steps,
        schedule=LogLinearSchedule(config["train"].get("eps_min", 1e-3)),
        formats=formats, trace=args.trace, cached=not args.no_cache,
        autoregressive=args.ar or model.cfg.causal, temperature=args.temperature,
        position_mode=config["train"].get("ar_position_mode", "input"),
    )
    ok = [it for it in items if it.grid is not None]
    report = {
        "samples": [{"seed": it.seed, "voxels": it.grid.k, "files": it.paths} for it in ok],
        "errors": [{"seed": it.seed, "error": it.error} for it in items if it.error],
    }
    if ok and any(it.grid.k for it in ok):
        report["collapse_score"] = category_histogram([it.grid for it in ok])[1]
    _emit(report)
    return 0 if ok else EXIT_DATA


def cmd_eval(args) -> int:
    model, config, vocab = _load_for_inference(args.ckpt)
    grids, data_vocab = load_dataset(args.data)
    if data_vocab != vocab:
        raise VoxelDataError("dataset vocabulary differs from the checkpoint's")
    data = Dataset.from_grids(grids, model.cfg.L, vocab)
    rep = evaluate_nll(
        model, data, LogLinearSchedule(config["train"].get("eps_min", 1e-3)),
        mc_draws=args.mc_draws, seed=args.seed, active_only=args.active_only,
        position_mode=config["train"].get("ar_position_mode", "input"),
    )
    _emit({"nll": rep.nll, "perplexity": rep.perplexity, "stderr": rep.stderr,
           "tokens": rep.tokens, "mc_draws": rep.mc_draws, "seed": args.seed})
    return 0


def cmd_stats(args) -> int:
    grids, vocab = load_dataset(args.data)
    dim = _dataset_dim(grids)
    st = sparsity_stats(grids, dim)
    _, collapse = category_histogram(grids)
    _emit({
        "count": st["count"],
        "dim": dim,
        "vocab_size": vocab.size,
        "mean_background": st["mean_background"],
        "k_histogram": st["k_histogram"],
        "category_histogram": st["category_histogram"],
        "collapse_score": collapse,
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scaffold", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="placement log -> filtered voxel dataset")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--max-blocks", type=int, default=1024)
    s.add_argument("--lenient", action="store_true", help="skip malformed records instead of failing")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train from a key=value config file")
    s.add_argument("--config", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate structures for an occupancy map")
    s.add_argument("--ckpt", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--occupancy")
    src.add_argument("--from-data", type=int)
    s.add_argument("--data", help="dataset for --from-data (defaults to the training set)")
    s.add_argument("--steps", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=1, help="number of samples, seeds seed..seed+n-1")
    s.add_argument("--out", default="samples")
    s.add_argument("--format", choices=("json", "bin", "both"), default="both")
    s.add_argument("--trace", action="store_true")
    s.add_argument("--no-cache", action="store_true")
    s.add_argument("--ar", action="store_true")
    s.add_argument("--temperature", type=float, default=1.0)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="NLL / perplexity of a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mc-draws", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--active-only", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="sparsity and category statistics of a dataset")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"scaffold: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, NonFiniteGradient, FloatingPointError) as e:
        print(f"scaffold: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VoxelDataError, checkpoint.CheckpointError, OSError, ValueError, KeyError) as e:
        print(f"scaffold: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
