"""Optimization loop: AdamW with linear warmup, EMA weights, resumable checkpoints."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import checkpoint
from .backbone import BackboneConfig, Denoiser, build_model
from .diffusion import loss_autoregressive, loss_continuous, loss_discrete, step_rng
from .schedule import LogLinearSchedule
from .voxels import Vocabulary, VoxelGrid, extract_sequence, stack_sequences

logger = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in {name}")


@dataclass
class TrainConfig:
    max_steps: int = 20_000
    warmup_steps: int = 2500
    ema_decay: float = 0.9999
    batch_size: int = 32
    loss: str = "continuous"  # continuous | discrete | autoregressive
    discrete_T: int = 1000
    seed: int = 0
    lr: float = 3e-4
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    antithetic: bool = False
    eps_min: float = 1e-3
    ckpt_every: int = 0
    ar_position_mode: str = "input"
    active_only: bool = False

    def __post_init__(self):
        if self.warmup_steps > self.max_steps:
            raise ValueError("warmup_steps must not exceed max_steps")
        if not (0.0 < self.ema_decay < 1.0):
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.loss not in ("continuous", "discrete", "autoregressive"):
            raise ValueError(f"unknown loss mode {self.loss!r}")


def warmup_factor(step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return 1.0
    return min(step / warmup_steps, 1.0)


class AdamW:
    """Decoupled weight decay Adam over a name -> tensor mapping."""

    def __init__(
        self,
        params: Mapping[str, torch.Tensor],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        warmup_steps: int = 0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def lr_at(self, step: int) -> float:
        return self.lr * warmup_factor(step, self.warmup_steps)

    @torch.no_grad()
    def step(self, grads: Mapping[str, torch.Tensor | None]) -> float:
        """Apply one update; returns the learning rate used."""
        for name, g in grads.items():
            if g is not None and not torch.isfinite(g).all():
                raise NonFiniteGradient(name)
        self.step_count += 1
        n = self.step_count
        lr = self.lr_at(n)
        bc1 = 1.0 - self.b1**n
        bc2 = 1.0 - self.b2**n
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if self.weight_decay:
                p.mul_(1.0 - lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m.mul_(self.b1).add_(g, alpha=1.0 - self.b1)
            v.mul_(self.b2).addcmul_(g, g, value=1.0 - self.b2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"train/step": np.array([self.step_count], dtype=np.int64)}
        for name in self.params:
            out[f"adam_m/{name}"] = self.m[name].detach().numpy()
            out[f"adam_v/{name}"] = self.v[name].detach().numpy()
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]):
        self.step_count = int(arrays["train/step"][0])
        for name in self.params:
            self.m[name].copy_(torch.from_numpy(arrays[f"adam_m/{name}"]))
            self.v[name].copy_(torch.from_numpy(arrays[f"adam_v/{name}"]))


@torch.no_grad()
def ema_update(params: Mapping[str, torch.Tensor], shadow: Mapping[str, torch.Tensor], decay: float):
    for name, p in params.items():
        shadow[name].mul_(decay).add_(p, alpha=1.0 - decay)
    return shadow


def clip_grad_norm(grads: Mapping[str, torch.Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values() if g is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            if g is not None:
                g.mul_(scale)
    return norm


def with_weights(model: Denoiser, weights: Mapping[str, torch.Tensor]) -> Denoiser:
    """Copy of ``model`` carrying ``weights`` (e.g. the EMA shadow)."""
    out = copy.deepcopy(model)
    with torch.no_grad():
        for name, p in out.named_parameters():
            p.copy_(weights[name])
    return out


@dataclass
class Dataset:
    tokens: np.ndarray  # (N, L)
    positions: np.ndarray  # (N, L, 3)
    k: np.ndarray  # (N,)

    def __len__(self):
        return len(self.tokens)

    def batch(self, idx):
        return self.tokens[idx], self.positions[idx], self.k[idx]

    @classmethod
    def from_grids(cls, grids: Sequence[VoxelGrid], L: int, vocab: Vocabulary, order: str = "lex"):
        return cls(*stack_sequences([extract_sequence(g, L, vocab, order) for g in grids]))


def batch_indices(n_items: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for 0-based ``step`` of an endless sequence of shuffled epochs."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n_items)
        perm = np.random.Generator(
            np.random.Philox(key=np.array([seed, 1 << 40 | epoch], dtype=np.uint64))
        ).permutation(n_items)
        take = min(batch_size - len(out), n_items - offset)
        out.extend(perm[offset : offset + take])
    return np.array(out, dtype=np.int64)


def compute_loss(model, tokens, positions, k, cfg: TrainConfig, schedule, rng):
    if cfg.loss == "continuous":
        return loss_continuous(
            model, tokens, positions, schedule, rng,
            antithetic=cfg.antithetic, k=k, active_only=cfg.active_only,
        )
    if cfg.loss == "discrete":
        return loss_discrete(
            model, tokens, positions, schedule, cfg.discrete_T, rng, k=k, active_only=cfg.active_only
        )
    return loss_autoregressive(
        model, tokens, positions, position_mode=cfg.ar_position_mode, k=k, active_only=cfg.active_only
    )


@dataclass
class TrainState:
    model: Denoiser
    optimizer: AdamW
    shadow: dict[str, torch.Tensor]
    model_cfg: BackboneConfig
    train_cfg: TrainConfig
    extra: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.optimizer.step_count

    def ema_model(self) -> Denoiser:
        return with_weights(self.model, self.shadow)


def init_state(model_cfg: BackboneConfig, train_cfg: TrainConfig, extra: dict | None = None) -> TrainState:
    model = build_model(model_cfg, seed=train_cfg.seed)
    params = dict(model.named_parameters())
    opt = AdamW(
        params, train_cfg.lr, (train_cfg.b1, train_cfg.b2), train_cfg.eps,
        train_cfg.weight_decay, train_cfg.warmup_steps,
    )
    shadow = {n: p.detach().clone() for n, p in params.items()}
    return TrainState(model, opt, shadow, model_cfg, train_cfg, dict(extra or {}))


def save_state(state: TrainState, path: str | Path) -> Path:
    config = {
        "model": state.model_cfg.to_dict(),
        "train": asdict(state.train_cfg),
        "extra": state.extra,
    }
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.model.named_parameters():
        arrays[name] = p.detach().numpy()
    for name, s in state.shadow.items():
        arrays[f"ema/{name}"] = s.numpy()
    arrays.update(state.optimizer.state_arrays())
    arrays["train/torch_rng"] = torch.random.get_rng_state().numpy()
    return checkpoint.save(path, config, arrays)


def load_state(path: str | Path, train_cfg: TrainConfig | None = None) -> TrainState:
    config, arrays = checkpoint.load(path)
    model_cfg = BackboneConfig(**config["model"])
    saved_cfg = TrainConfig(**config["train"])
    state = init_state(model_cfg, train_cfg or saved_cfg, config.get("extra"))
    with torch.no_grad():
        for name, p in state.model.named_parameters():
            p.copy_(torch.from_numpy(arrays[name]))
            state.shadow[name].copy_(torch.from_numpy(arrays[f"ema/{name}"]))
    state.optimizer.load_state_arrays(arrays)
    return state


def load_model(path: str | Path, use_ema: bool = True) -> tuple[Denoiser, dict]:
    """Model (EMA weights by default) plus the stored config block."""
    config, arrays = checkpoint.load(path)
    model = Denoiser(BackboneConfig(**config["model"]))
    prefix = "ema/" if use_ema else ""
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(arrays[prefix + name]))
    model.eval()
    return model, config


@dataclass
class TrainResult:
    state: TrainState
    curve: list[dict]
    checkpoint_path: Path | None


def train_steps(
    state: TrainState,
    data: Dataset,
    until: int,
    out_dir: str | Path | None = None,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Advance ``state`` to optimizer step ``until``.

    Every random draw is keyed by (seed, step), so stopping, checkpointing and
    resuming reproduces an uninterrupted run exactly.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    cfg = state.train_cfg
    schedule = LogLinearSchedule(cfg.eps_min)
    params = dict(state.model.named_parameters())
    out = Path(out_dir) if out_dir is not None else None
    curve = []
    ckpt_path = None
    state.model.train()
    while state.step < until:
        n = state.step
        tokens, positions, k = data.batch(batch_indices(len(data), cfg.batch_size, n, cfg.seed))
        rng = step_rng(cfg.seed, 1 << 32 | n)
        res = compute_loss(state.model, tokens, positions, k, cfg, schedule, rng)
        for p in params.values():
            p.grad = None
        res.loss.backward()
        grads = {name: p.grad for name, p in params.items()}
        grad_norm = clip_grad_norm(grads, cfg.grad_clip)
        lr = state.optimizer.step(grads)
        ema_update(params, state.shadow, cfg.ema_decay)
        row = {"step": state.step, "loss": float(res.loss.detach()), "lr": lr, "grad_norm": grad_norm}
        curve.append(row)
        if callback is not None:
            callback(row)
        if out is not None and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
            ckpt_path = _checkpoint(state, out)
    state.model.eval()
    if out is not None:
        ckpt_path = _checkpoint(state, out)
        _append_curve(out / "loss_curve.csv", curve)
    return TrainResult(state, curve, ckpt_path)


def _checkpoint(state: TrainState, out: Path) -> Path:
    try:
        save_state(state, out / f"ckpt_{state.step:07d}.sckp")
        return save_state(state, out / "last.sckp")
    except OSError:
        logger.warning("checkpoint write failed at step %d; in-memory state is intact", state.step)
        raise


def _append_curve(path: Path, rows: list[dict]):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss", "lr", "grad_norm"])
        if new:
            w.writeheader()
        w.writerows(rows)


def train(
    data: Dataset,
    model_cfg: BackboneConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    extra: dict | None = None,
    callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    if resume is not None:
        state = load_state(resume, train_cfg)
    else:
        state = init_state(model_cfg, train_cfg, extra)
    return train_steps(state, data, train_cfg.max_steps, out_dir, callback)


# -- flat key=value config files ---------------------------------------------

def parse_config(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, target):
    if isinstance(target, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(target, int):
        return int(float(value))
    if isinstance(target, float):
        return float(value)
    return value


_TRAIN_ALIASES = {"schedule.eps_min": "eps_min"}


def configs_from_flat(flat: Mapping[str, str]) -> tuple[dict, TrainConfig, dict]:
    """Split dotted keys into backbone kwargs, a TrainConfig and everything else."""
    model_kw: dict = {}
    train_kw: dict = {}
    other: dict = {}
    model_defaults = {f.name: f.default for f in fields(BackboneConfig)}
    train_defaults = {f.name: f.default for f in fields(TrainConfig)}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if key in _TRAIN_ALIASES:
            name = _TRAIN_ALIASES[key]
            train_kw[name] = _coerce(value, train_defaults[name])
        elif section == "model" and name in model_defaults:
            model_kw[name] = _coerce(value, model_defaults[name])
        elif section == "train" and name in train_defaults:
            train_kw[name] = _coerce(value, train_defaults[name])
        elif section in ("data", "sample", "out"):
            other[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return model_kw, TrainConfig(**train_kw), other
