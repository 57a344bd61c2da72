"""A small class-conditional DiT whose block slots can be edited in place.

The graph is ``patchify -> entries -> final layer -> unpatchify`` where each
entry is either a :class:`Block` or a :class:`ParallelPair` of two blocks.
Blocks use adaLN-Zero conditioning: modulation weights start at zero so a
fresh block is the identity map on tokens.
"""

from __future__ import annotations

import copy
import dataclasses
import math

import numpy as np
import torch
from torch import nn

from graftkit import tensor as T
from graftkit.operators import Kind, OperatorConfig, TokenMixer, build_operator

SLOTS = ("mha", "mlp")


@dataclasses.dataclass(frozen=True)
class DiTConfig:
    depth: int = 8
    dim: int = 64
    heads: int = 4
    patch: int = 2
    image_size: int = 16
    channels: int = 1
    num_classes: int = 8
    mlp_ratio: float = 4.0
    cfg_dropout: float = 0.1
    freq_dim: int = 128
    num_timesteps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.depth < 1 or self.freq_dim % 2:
            raise ValueError("depth must be >= 1 and freq_dim even")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_tokens(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def mixer_config(self, layer: int) -> OperatorConfig:
        return OperatorConfig(Kind.MHA, self.dim, heads=self.heads, seed=self.seed * 1000 + 2 * layer + 1)

    def mlp_config(self, layer: int) -> OperatorConfig:
        return OperatorConfig(Kind.MLP, self.dim, ratio=self.mlp_ratio, seed=self.seed * 1000 + 2 * layer + 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown DiTConfig keys: {sorted(unknown)}")
        return cls(**d)


PROFILES = {
    "xs": DiTConfig(),
    # DiT-XL/2 on 32x32x4 latents: used for parameter accounting only.
    "xl2": DiTConfig(depth=28, dim=1152, heads=16, patch=2, image_size=32, channels=4,
                     num_classes=1000, freq_dim=256),
}


def _sincos_2d(dim: int, grid: int) -> torch.Tensor:
    """Fixed 2-D sine-cosine position embedding, ``[grid*grid, dim]``."""
    half = dim // 2
    omega = 1.0 / 10000 ** (np.arange(half // 2, dtype=np.float64) / (half / 2.0))
    coords = np.arange(grid, dtype=np.float64)
    rows, cols = np.meshgrid(coords, coords, indexing="ij")

    def embed(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    emb = np.concatenate([embed(rows), embed(cols)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return torch.from_numpy(emb).to(torch.get_default_dtype())


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(torch.get_default_dtype())


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    B, D = shift.shape
    shift = T.reshape(shift, (B, 1, D))
    scale = T.reshape(scale, (B, 1, D))
    return T.add(T.mul(T.layernorm(x), T.add(scale, 1.0)), shift)


class Block(nn.Module):
    """Transformer block with two replaceable slots: ``mixer`` (MHA) and ``mlp``."""

    def __init__(self, dim: int, mixer: TokenMixer, mlp: TokenMixer):
        super().__init__()
        self.dim = dim
        self.mixer = mixer
        self.mlp = mlp
        self.ada_w = nn.Parameter(torch.zeros(dim, 6 * dim))
        self.ada_b = nn.Parameter(torch.zeros(6 * dim))

    def modulation(self, cond: torch.Tensor) -> list[torch.Tensor]:
        """``[shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp]``, each ``[B, D]``."""
        mod = T.add(T.matmul(T.silu(cond), self.ada_w), self.ada_b)
        return [T.slice(mod, i * self.dim, (i + 1) * self.dim) for i in range(6)]

    def slot(self, name: str) -> TokenMixer:
        if name not in SLOTS:
            raise ValueError(f"unknown slot {name!r}; expected one of {SLOTS}")
        return self.mixer if name == "mha" else self.mlp

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(cond)
        B, D = gate1.shape
        h = self.mixer(_modulate(x, shift1, scale1))
        x = T.add(x, T.mul(T.reshape(gate1, (B, 1, D)), h))
        h = self.mlp(_modulate(x, shift2, scale2))
        return T.add(x, T.mul(T.reshape(gate2, (B, 1, D)), h))


class ParallelPair(nn.Module):
    """Two blocks fed the same input; their residual deltas are merged by a linear map.

    ``y = x + [A(x) - x ; B(x) - x] @ merge_w + merge_b``. With ``merge_w = [I; I]``
    this adds both deltas, a first-order match for running A then B.
    """

    def __init__(self, block_a: Block, block_b: Block):
        super().__init__()
        dim = block_a.dim
        self.dim = dim
        self.block_a = block_a
        self.block_b = block_b
        eye = torch.eye(dim)
        self.merge_w = nn.Parameter(torch.cat([eye, eye], dim=0))
        self.merge_b = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        neg_x = T.scale(x, -1.0)
        delta_a = T.add(self.block_a(x, cond), neg_x)
        delta_b = T.add(self.block_b(x, cond), neg_x)
        merged = T.add(T.matmul(T.concat([delta_a, delta_b]), self.merge_w), self.merge_b)
        return T.add(x, merged)


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.dim = dim
        self.ada_w = nn.Parameter(torch.zeros(dim, 2 * dim))
        self.ada_b = nn.Parameter(torch.zeros(2 * dim))
        self.w = nn.Parameter(torch.zeros(dim, out_dim))
        self.b = nn.Parameter(torch.zeros(out_dim))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        mod = T.add(T.matmul(T.silu(cond), self.ada_w), self.ada_b)
        shift, scale = T.slice(mod, 0, self.dim), T.slice(mod, self.dim, 2 * self.dim)
        return T.add(T.matmul(_modulate(x, shift, scale), self.w), self.b)


class DiT(nn.Module):
    """The model graph. ``forward(z_t, t, c)`` predicts the noise added to ``z_t``."""

    def __init__(self, config: DiTConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        D, F = config.dim, config.freq_dim
        self.patch_w = nn.Parameter(torch.randn(config.patch_dim, D, generator=gen) * math.sqrt(1.0 / config.patch_dim))
        self.patch_b = nn.Parameter(torch.zeros(D))
        self.register_buffer("pos_embed", _sincos_2d(D, config.grid), persistent=False)
        self.t_w1 = nn.Parameter(torch.randn(F, D, generator=gen) * 0.02)
        self.t_b1 = nn.Parameter(torch.zeros(D))
        self.t_w2 = nn.Parameter(torch.randn(D, D, generator=gen) * 0.02)
        self.t_b2 = nn.Parameter(torch.zeros(D))
        self.class_table = nn.Parameter(torch.randn(config.num_classes + 1, D, generator=gen) * 0.02)
        self.entries = nn.ModuleList(
            Block(D, build_operator(config.mixer_config(i)), build_operator(config.mlp_config(i)))
            for i in range(config.depth)
        )
        self.final = FinalLayer(D, config.patch_dim)

    # -- structure ----------------------------------------------------------

    @property
    def effective_depth(self) -> int:
        return len(self.entries)

    def blocks(self) -> list[Block]:
        """All blocks in execution order, with parallel pairs expanded (a, b)."""
        out = []
        for entry in self.entries:
            out.extend([entry.block_a, entry.block_b] if isinstance(entry, ParallelPair) else [entry])
        return out

    def architecture(self) -> list[dict]:
        """Serializable description of every entry and its slot operators."""

        def block_desc(b: Block) -> dict:
            return {"mha": b.mixer.config.to_dict(), "mlp": b.mlp.config.to_dict()}

        arch = []
        for entry in self.entries:
            if isinstance(entry, ParallelPair):
                arch.append({"type": "pair", "a": block_desc(entry.block_a), "b": block_desc(entry.block_b)})
            else:
                arch.append({"type": "block", **block_desc(entry)})
        return arch

    # -- forward ------------------------------------------------------------

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        B = x.shape[0]
        C, g, p = self.config.channels, self.config.grid, self.config.patch
        x = T.reshape(x, (B, C, g, p, g, p))
        x = T.transpose(T.transpose(T.transpose(x, 1, 2), 2, 4), 4, 5)  # [B, g, g, p, p, C]
        return T.reshape(x, (B, g * g, p * p * C))

    def unpatchify(self, x: torch.Tensor) -> torch.Tensor:
        B = x.shape[0]
        C, g, p = self.config.channels, self.config.grid, self.config.patch
        x = T.reshape(x, (B, g, g, p, p, C))
        x = T.transpose(T.transpose(T.transpose(x, 4, 5), 2, 4), 1, 2)  # [B, C, g, p, g, p]
        return T.reshape(x, (B, C, g * p, g * p))

    def conditioning(self, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """Conditioning vector ``[B, D]`` = timestep MLP + class embedding."""
        cfg = self.config
        t = torch.as_tensor(t).reshape(-1)
        c = torch.as_tensor(c).reshape(-1)
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= cfg.num_timesteps):
            raise ValueError(f"timestep out of range [0, {cfg.num_timesteps})")
        if c.numel() and (int(c.min()) < 0 or int(c.max()) > cfg.num_classes):
            raise ValueError(f"class label out of range [0, {cfg.num_classes}] ({cfg.num_classes} is null)")
        freq = timestep_embedding(t, cfg.freq_dim).to(self.t_w1.dtype)
        temb = T.add(T.matmul(T.silu(T.add(T.matmul(freq, self.t_w1), self.t_b1)), self.t_w2), self.t_b2)
        return T.add(temb, T.embedding(self.class_table, c.long()))

    def embed(self, z_t: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if z_t.dim() != 4 or tuple(z_t.shape[1:]) != expected:
            raise ValueError(f"expected images [B, {expected[0]}, {expected[1]}, {expected[2]}], got {tuple(z_t.shape)}")
        tokens = T.add(T.matmul(self.patchify(z_t), self.patch_w), self.patch_b)
        return T.add(tokens, self.pos_embed.to(tokens.dtype))

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        x = self.embed(z_t)
        cond = self.conditioning(t, c)
        for entry in self.entries:
            x = entry(x, cond)
        return self.unpatchify(self.final(x, cond))


def build_model(cfg: DiTConfig) -> DiT:
    """Deterministic MHA + MLP model; every adaLN modulation starts at zero."""
    return DiT(cfg)


# -- editing ------------------------------------------------------------------


def _shallow(module: nn.Module) -> nn.Module:
    """A new module object that shares all parameters and submodules with ``module``."""
    clone = copy.copy(module)
    clone._modules = module._modules.copy()
    clone._parameters = module._parameters.copy()
    clone._buffers = module._buffers.copy()
    return clone


def _locate(g: DiT, layer: int) -> tuple[int, str | None]:
    """Map a flat block index to (entry index, pair branch or None)."""
    flat = 0
    for i, entry in enumerate(g.entries):
        if isinstance(entry, ParallelPair):
            if layer in (flat, flat + 1):
                return i, "block_a" if layer == flat else "block_b"
            flat += 2
        else:
            if layer == flat:
                return i, None
            flat += 1
    raise IndexError(f"layer {layer} out of range for a model with {flat} blocks")


def replace_operator(g: DiT, layer: int, slot: str, new: TokenMixer) -> DiT:
    """Return a graph where block ``layer``'s ``slot`` is ``new``; everything else is shared.

    ``layer`` indexes blocks in execution order (pairs count as two). The host
    block's adaLN modulation is kept.
    """
    if slot not in SLOTS:
        raise ValueError(f"unknown slot {slot!r}; expected one of {SLOTS}")
    if new.config.dim != g.config.dim:
        raise ValueError(f"operator width {new.config.dim} does not match model width {g.config.dim}")
    entry_idx, branch = _locate(g, layer)
    edited = _shallow(g)
    edited.entries = _shallow(g.entries)
    entry = _shallow(g.entries[entry_idx])
    if branch is None:
        block = entry
    else:
        block = _shallow(getattr(entry, branch))
        setattr(entry, branch, block)
    setattr(block, "mixer" if slot == "mha" else "mlp", new)
    edited.entries[entry_idx] = entry
    return edited


def parallelize_pairs(g: DiT) -> DiT:
    """Turn blocks (2i, 2i+1) into one :class:`ParallelPair`; branches copy the originals."""
    if g.effective_depth % 2:
        raise ValueError(f"parallelize_pairs needs an even depth, got {g.effective_depth}")
    if any(isinstance(e, ParallelPair) for e in g.entries):
        raise ValueError("model already contains parallel pairs")
    out = copy.deepcopy(g)
    blocks = list(out.entries)
    out.entries = nn.ModuleList(ParallelPair(blocks[i], blocks[i + 1]) for i in range(0, len(blocks), 2))
    return out


# -- accounting ---------------------------------------------------------------


def param_count(obj: nn.Module | DiTConfig) -> int:
    """Exact trainable-scalar count of a module, or of an unbuilt all-MHA/MLP config."""
    if isinstance(obj, nn.Module):
        return sum(p.numel() for p in obj.parameters() if p.requires_grad)
    from graftkit.analysis import operator_params

    cfg = obj
    D, F, P = cfg.dim, cfg.freq_dim, cfg.patch_dim
    embed = P * D + D + F * D + D + D * D + D + (cfg.num_classes + 1) * D
    block = (
        operator_params(cfg.mixer_config(0)).total
        + operator_params(cfg.mlp_config(0)).total
        + 6 * D * D + 6 * D
    )
    final = 2 * D * D + 2 * D + D * P + P
    return embed + cfg.depth * block + final


def pair_merge_params(dim: int) -> int:
    return 2 * dim * dim + dim
