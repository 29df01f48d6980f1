"""Transformer denoiser over voxel tokens.

Each slot's input is the embedding of its token plus an encoding of the voxel
coordinate the slot stands for. Diffusion models read all slots
bidirectionally; the autoregressive baseline uses the same stack with a
causal mask and no timestep input.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

FREQ_BASE = 10000.0


class BackboneDomainError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class BackboneConfig:
    depth: int = 12
    heads: int = 12
    width: int = 768
    L: int = 1024
    V_total: int = 256
    dim: int = 32
    pe_mode: str = "sinusoidal3d"  # or "learned"
    learned_key: str = "voxel"  # or "slot"
    time_conditioning: bool = False
    causal: bool = False
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.width % self.heads:
            raise BackboneDomainError(f"width {self.width} not divisible by heads {self.heads}")
        if self.pe_mode not in ("sinusoidal3d", "learned"):
            raise BackboneDomainError(f"unknown pe_mode {self.pe_mode!r}")
        if self.learned_key not in ("voxel", "slot"):
            raise BackboneDomainError(f"unknown learned_key {self.learned_key!r}")
        if self.pe_mode == "sinusoidal3d" and self.width < 6:
            raise BackboneDomainError("sinusoidal3d needs width >= 6")
        if self.V_total < 4:
            raise BackboneDomainError("V_total must leave room for at least one block token")
        if self.causal and self.time_conditioning:
            raise BackboneDomainError("the causal baseline takes no timestep input")

    # specials sit at the end of the vocabulary: MASK, PAD, BOS
    @property
    def mask_id(self) -> int:
        return self.V_total - 3

    @property
    def pad_id(self) -> int:
        return self.V_total - 2

    @property
    def bos_id(self) -> int:
        return self.V_total - 1

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_1d(coord: torch.Tensor, dim: int) -> torch.Tensor:
    """Interleaved ``[sin(w_0 c), cos(w_0 c), sin(w_1 c), ...]`` with geometric ``w_j``."""
    if dim % 2:
        raise BackboneDomainError(f"1D sinusoidal width must be even, got {dim}")
    j = torch.arange(dim // 2, dtype=torch.float64)
    freqs = FREQ_BASE ** (-2.0 * j / dim)
    args = coord.to(torch.float64)[..., None] * freqs
    return torch.stack([torch.sin(args), torch.cos(args)], dim=-1).flatten(-2)


def positional_encoding_3d(pos, width: int, dim: int | None = None) -> torch.Tensor:
    """3D sinusoidal encoding of integer voxel coordinates, shape ``(..., width)``.

    The width is split into thirds for x, y and z. Rows equal to the PAD
    sentinel (all coordinates negative) encode to zeros.
    """
    if width % 6:
        raise BackboneDomainError(f"width {width} is not divisible by 6")
    pos = torch.as_tensor(pos, dtype=torch.long)
    if pos.shape[-1] != 3:
        raise BackboneDomainError(f"expected (..., 3) coordinates, got {tuple(pos.shape)}")
    pad = (pos < 0).all(-1)
    live = pos[~pad]
    if live.numel() and ((live < 0).any() or (dim is not None and (live >= dim).any())):
        raise BackboneDomainError(f"coordinate outside [0, {dim})")
    third = width // 3
    enc = torch.cat([sinusoidal_1d(pos[..., a], third) for a in range(3)], dim=-1)
    return enc.masked_fill(pad[..., None], 0.0)


def time_embedding(t: torch.Tensor, width: int, scale: float = 1000.0) -> torch.Tensor:
    """Sinusoidal features of the diffusion time, ``(B,) -> (B, width)``."""
    half = width // 2
    freqs = torch.exp(-math.log(FREQ_BASE) * torch.arange(half, dtype=torch.float64) / half)
    args = scale * torch.as_tensor(t, dtype=torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if width % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def learned_positional_encoding(keys: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Rows of a trainable table; negative keys (PAD) give zeros."""
    keys = torch.as_tensor(keys, dtype=torch.long)
    pad = keys < 0
    if (keys >= table.shape[0]).any():
        raise BackboneDomainError(f"key outside table of {table.shape[0]} rows")
    rows = F.embedding(keys.clamp(min=0), table)
    return rows.masked_fill(pad[..., None], 0.0)


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        w = cfg.width
        self.heads = cfg.heads
        self.causal = cfg.causal
        self.norm1 = nn.LayerNorm(w)
        self.qkv = nn.Linear(w, 3 * w)
        self.proj = nn.Linear(w, w)
        self.norm2 = nn.LayerNorm(w)
        self.mlp = nn.Sequential(
            nn.Linear(w, cfg.mlp_ratio * w),
            nn.GELU(approximate="tanh"),
            nn.Linear(cfg.mlp_ratio * w, w),
        )
        self.modulation = None
        if cfg.time_conditioning:
            self.modulation = nn.Linear(w, 6 * w)
            nn.init.zeros_(self.modulation.weight)
            nn.init.zeros_(self.modulation.bias)

    def forward(self, x, c=None):
        B, L, W = x.shape
        if c is not None and self.modulation is not None:
            mods = self.modulation(F.silu(c))[:, None, :].chunk(6, dim=-1)
            shift1, scale1, gate1, shift2, scale2, gate2 = mods
            h = _modulate(self.norm1(x), shift1, scale1)
        else:
            gate1 = gate2 = 0.0
            h = self.norm1(x)
        q, k, v = self.qkv(h).view(B, L, 3, self.heads, W // self.heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        x = x + (1 + gate1) * self.proj(a.transpose(1, 2).reshape(B, L, W))
        if c is not None and self.modulation is not None:
            h = _modulate(self.norm2(x), shift2, scale2)
        else:
            h = self.norm2(x)
        return x + (1 + gate2) * self.mlp(h)


class Denoiser(nn.Module):
    """``x_theta(z_t, t)``: logits over the full vocabulary for every slot."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.tok = nn.Embedding(cfg.V_total, w)
        nn.init.normal_(self.tok.weight, std=0.02)
        self.pos_table = None
        if cfg.pe_mode == "learned":
            rows = cfg.dim**3 if cfg.learned_key == "voxel" else cfg.L
            self.pos_table = nn.Parameter(torch.randn(rows, w) * 0.02)
        else:
            self.pe_width = w - w % 6
        self.time_mlp = None
        if cfg.time_conditioning:
            self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm_f = nn.LayerNorm(w)
        self.final_modulation = None
        if cfg.time_conditioning:
            self.final_modulation = nn.Linear(w, 2 * w)
            nn.init.zeros_(self.final_modulation.weight)
            nn.init.zeros_(self.final_modulation.bias)
        self.head = nn.Linear(w, cfg.V_total)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self._pe_cache: dict = {}

    def position_features(self, positions: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        pad = (positions < 0).all(-1)
        dtype = self.tok.weight.dtype
        if cfg.pe_mode == "learned":
            if cfg.learned_key == "voxel":
                p = positions.clamp(min=0)
                keys = (p[..., 0] * cfg.dim + p[..., 1]) * cfg.dim + p[..., 2]
            else:
                keys = torch.arange(positions.shape[-2]).expand(positions.shape[:-1])
            return learned_positional_encoding(keys.masked_fill(pad, -1), self.pos_table)
        key = (dtype,)
        if key not in self._pe_cache:
            grid = torch.cartesian_prod(*[torch.arange(cfg.dim)] * 3)
            table = positional_encoding_3d(grid, self.pe_width, cfg.dim)
            table = F.pad(table, (0, cfg.width - self.pe_width)).to(dtype)
            # final row is the PAD sentinel
            self._pe_cache[key] = torch.cat([table, table.new_zeros(1, cfg.width)])
        p = positions.clamp(min=0)
        if (positions >= cfg.dim).any() or ((positions < 0) & ~pad[..., None]).any():
            raise BackboneDomainError(f"coordinate outside [0, {cfg.dim})")
        idx = ((p[..., 0] * cfg.dim + p[..., 1]) * cfg.dim + p[..., 2]).masked_fill(pad, cfg.dim**3)
        return self._pe_cache[key][idx]

    def conditioning(self, t, batch: int):
        if self.time_mlp is None or t is None:
            return None
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1).expand(batch)
        return self.time_mlp(time_embedding(t, self.cfg.width).to(self.tok.weight.dtype))

    def forward(self, tokens, positions, t=None, check_finite: bool = False):
        tokens = torch.as_tensor(_writable(tokens), dtype=torch.long)
        positions = torch.as_tensor(_writable(positions), dtype=torch.long)
        if tokens.ndim == 1:
            tokens, positions = tokens[None], positions[None]
        x = self.tok(tokens) + self.position_features(positions)
        c = self.conditioning(t, tokens.shape[0])
        if check_finite:
            _require_finite(x, "embedding")
        for i, block in enumerate(self.blocks):
            x = block(x, c)
            if check_finite:
                _require_finite(x, f"block {i}")
        h = self.norm_f(x)
        if c is not None:
            shift, scale = self.final_modulation(F.silu(c))[:, None, :].chunk(2, dim=-1)
            h = _modulate(h, shift, scale)
        logits = self.head(h)
        if check_finite:
            _require_finite(logits, "head")
        return logits

    def log_probs(self, tokens, positions, t=None, check_finite: bool = False):
        """Parameterized log-distributions, ``(B, L, V_total)``.

        Diffusion: MASK gets zero probability and unmasked inputs are copied
        through as point masses. Causal baseline: MASK and BOS are excluded.
        """
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.ndim == 1:
            tokens = tokens[None]
        logits = self(tokens, positions, t, check_finite=check_finite)
        cfg = self.cfg
        banned = torch.zeros(cfg.V_total, dtype=torch.bool)
        banned[cfg.mask_id] = True
        if cfg.causal:
            banned[cfg.bos_id] = True
            return torch.log_softmax(logits.masked_fill(banned, float("-inf")), dim=-1)
        logp = torch.log_softmax(logits.masked_fill(banned, float("-inf")), dim=-1)
        carried = tokens != cfg.mask_id
        one_hot = torch.full_like(logp, float("-inf")).scatter(-1, tokens[..., None], 0.0)
        return torch.where(carried[..., None], one_hot, logp)


def _writable(a):
    if isinstance(a, np.ndarray) and not a.flags.writeable:
        return a.copy()
    return a


def _require_finite(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations after {where}")


@torch.no_grad()
def denoise(model: Denoiser, z_t, t, positions) -> np.ndarray:
    """Per-slot categorical distributions as float64 numpy, ``(B, L, V_total)``."""
    z = torch.as_tensor(np.asarray(z_t), dtype=torch.long)
    squeeze = z.ndim == 1
    logp = model.log_probs(z, np.asarray(positions), t, check_finite=True)
    probs = logp.to(torch.float64).exp().numpy()
    return probs[0] if squeeze else probs


def build_model(cfg: BackboneConfig, seed: int = 0) -> Denoiser:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return Denoiser(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
