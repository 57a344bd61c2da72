"""Token and channel mixers that can stand in for a DiT block's MHA or MLP slot.

Every mixer maps ``[B, N, D] -> [B, N, D]`` so any of them can be dropped into
either slot of a block. Dense projections are stored as ``[in, out]`` matrices
and applied as ``x @ W``.
"""

from __future__ import annotations

import dataclasses
import enum
import math

import torch
from torch import nn

from graftkit import tensor as T


class Kind(str, enum.Enum):
    MHA = "MHA"
    SWA = "SWA"
    HYENA_SE = "HYENA_SE"
    HYENA_X = "HYENA_X"
    HYENA_Y = "HYENA_Y"
    MLP = "MLP"
    HYENA_X_MLP = "HYENA_X_MLP"

    @property
    def is_attention(self) -> bool:
        return self in (Kind.MHA, Kind.SWA)

    @property
    def is_hyena(self) -> bool:
        return self in (Kind.HYENA_SE, Kind.HYENA_X, Kind.HYENA_Y)

    @property
    def slot(self) -> str:
        """The block slot this kind is designed for: ``"mha"`` or ``"mlp"``."""
        return "mlp" if self in (Kind.MLP, Kind.HYENA_X_MLP) else "mha"


@dataclasses.dataclass(frozen=True)
class OperatorConfig:
    """Declarative description of one mixer.

    ``heads`` applies to attention kinds, ``kernel_size`` and ``causal`` to the
    Hyena kinds, ``window`` (half-width) to SWA and ``ratio`` to the MLP kinds.
    Unused fields are carried along but ignored.
    """

    kind: Kind
    dim: int
    heads: int = 4
    kernel_size: int = 4
    window: int = 4
    ratio: float = 4.0
    causal: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.kind.is_attention and (self.heads < 1 or self.dim % self.heads):
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.kernel_size < 1:
            raise ValueError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.window < 0:
            raise ValueError(f"window must be >= 0, got {self.window}")
        if self.ratio <= 0:
            raise ValueError(f"ratio must be > 0, got {self.ratio}")
        if self.kind in (Kind.MLP, Kind.HYENA_X_MLP) and not float(self.ratio * self.dim).is_integer():
            raise ValueError(f"ratio * dim must be an integer, got {self.ratio} * {self.dim}")
        if self.kind.is_hyena and not self.causal:
            raise ValueError("Hyena mixers only support causal short filters")

    @property
    def hidden(self) -> int:
        return int(self.ratio * self.dim)

    def replace(self, **changes) -> "OperatorConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown OperatorConfig keys: {sorted(unknown)}")
        return cls(**d)


def _normal(gen: torch.Generator, *shape: int, std: float = 0.02) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, generator=gen) * std)


def _delta_filter(gen: torch.Generator, channels: int, taps: int, std: float = 0.02) -> nn.Parameter:
    h = torch.randn(channels, taps, generator=gen) * std
    h[:, 0] += 1.0
    return nn.Parameter(h)


class TokenMixer(nn.Module):
    """Base class: holds the config and checks the ``[B, N, D]`` contract."""

    def __init__(self, config: OperatorConfig):
        super().__init__()
        self.config = config

    def _check(self, x: torch.Tensor) -> None:
        if x.dim() != 3 or x.shape[-1] != self.config.dim:
            raise ValueError(
                f"{self.config.kind.value}: expected input [B, N, {self.config.dim}], got {tuple(x.shape)}"
            )

    def extra_repr(self) -> str:
        return ", ".join(f"{k}={v}" for k, v in self.config.to_dict().items())


class Attention(TokenMixer):
    """Bidirectional softmax attention; SWA restricts keys to ``|i - j| <= window``."""

    def __init__(self, config: OperatorConfig):
        super().__init__(config)
        if not config.kind.is_attention:
            raise ValueError(f"Attention cannot be built for {config.kind.value}")
        gen = torch.Generator().manual_seed(config.seed)
        D = config.dim
        self.w_q = _normal(gen, D, D)
        self.w_k = _normal(gen, D, D)
        self.w_v = _normal(gen, D, D)
        self.w_o = _normal(gen, D, D)

    def _band(self, n: int, device) -> torch.Tensor | None:
        if self.config.kind is not Kind.SWA or self.config.window >= n - 1:
            return None
        idx = torch.arange(n, device=device)
        return (idx[:, None] - idx[None, :]).abs() <= self.config.window

    def _heads(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, N, D = x.shape
        H = self.config.heads
        qkv = T.matmul(x, T.concat([self.w_q, self.w_k, self.w_v]))
        qkv = T.transpose(T.reshape(qkv, (B, N, 3 * H, D // H)), 1, 2)  # [B, 3H, N, d]
        q, k, v = (T.slice(qkv, i * H, (i + 1) * H, dim=1) for i in range(3))
        scores = T.scale(T.bmm(q, T.transpose(k, -1, -2)), 1.0 / math.sqrt(D // H))
        weights = T.softmax(scores, mask=self._band(N, x.device))
        return weights, v

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Post-softmax attention maps, ``[B, H, N, N]``."""
        self._check(x)
        return self._heads(x)[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        B, N, D = x.shape
        weights, v = self._heads(x)
        out = T.reshape(T.transpose(T.bmm(weights, v), 1, 2), (B, N, D))
        return T.matmul(out, self.w_o)


class Hyena(TokenMixer):
    """Gated short-convolution mixer ``y = (q * conv_G(k * v)) M``.

    ``q, k, v`` are ``conv_T(xW)``, ``conv_H(xU)``, ``conv_K(xP)``. HYENA_SE keeps
    all four causal depthwise filters, HYENA_X drops ``conv_G``, HYENA_Y drops
    the three featurizer filters and keeps ``conv_G``.
    """

    def __init__(self, config: OperatorConfig):
        super().__init__(config)
        if not config.kind.is_hyena:
            raise ValueError(f"Hyena cannot be built for {config.kind.value}")
        gen = torch.Generator().manual_seed(config.seed)
        D, K = config.dim, config.kernel_size
        self.w_q = _normal(gen, D, D)
        self.w_k = _normal(gen, D, D)
        self.w_v = _normal(gen, D, D)
        self.w_o = _normal(gen, D, D)
        for name in self.filter_names:
            setattr(self, f"filter_{name}", _delta_filter(gen, D, K))
            setattr(self, f"bias_{name}", nn.Parameter(torch.zeros(D)))

    @property
    def filter_names(self) -> tuple[str, ...]:
        return {
            Kind.HYENA_SE: ("q", "k", "v", "gate"),
            Kind.HYENA_X: ("q", "k", "v"),
            Kind.HYENA_Y: ("gate",),
        }[self.config.kind]

    def _conv(self, name: str, x: torch.Tensor) -> torch.Tensor:
        if name not in self.filter_names:
            return x
        return T.causal_conv1d(x, getattr(self, f"filter_{name}"), getattr(self, f"bias_{name}"))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        D = self.config.dim
        qkv = T.matmul(x, T.concat([self.w_q, self.w_k, self.w_v]))
        q = self._conv("q", T.slice(qkv, 0, D))
        k = self._conv("k", T.slice(qkv, D, 2 * D))
        v = self._conv("v", T.slice(qkv, 2 * D, 3 * D))
        y = T.mul(q, self._conv("gate", T.mul(k, v)))
        return T.matmul(y, self.w_o)


class MLP(TokenMixer):
    """Two-layer GELU MLP with hidden width ``ratio * dim``."""

    def __init__(self, config: OperatorConfig):
        super().__init__(config)
        if config.kind is not Kind.MLP:
            raise ValueError(f"MLP cannot be built for {config.kind.value}")
        gen = torch.Generator().manual_seed(config.seed)
        D, R = config.dim, config.hidden
        self.w_1 = _normal(gen, D, R)
        self.b_1 = nn.Parameter(torch.zeros(R))
        self.w_2 = _normal(gen, R, D)
        self.b_2 = nn.Parameter(torch.zeros(D))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        h = T.gelu(T.add(T.matmul(x, self.w_1), self.b_1))
        return T.add(T.matmul(h, self.w_2), self.b_2)


class HyenaXMLP(TokenMixer):
    """Hyena-X applied along the channel axis of each token.

    Three dense projections lift every token to width ``ratio * dim``; each
    stream then runs one causal K-tap filter along its channels (shared across
    tokens), the streams are multiplied and projected back to ``dim``. Tokens
    never interact.
    """

    def __init__(self, config: OperatorConfig):
        super().__init__(config)
        if config.kind is not Kind.HYENA_X_MLP:
            raise ValueError(f"HyenaXMLP cannot be built for {config.kind.value}")
        gen = torch.Generator().manual_seed(config.seed)
        D, R, K = config.dim, config.hidden, config.kernel_size
        self.w_q = _normal(gen, D, R)
        self.w_k = _normal(gen, D, R)
        self.w_v = _normal(gen, D, R)
        self.w_o = _normal(gen, R, D)
        for name in ("q", "k", "v"):
            setattr(self, f"filter_{name}", _delta_filter(gen, 1, K))
            setattr(self, f"bias_{name}", nn.Parameter(torch.zeros(1)))

    def _channel_conv(self, name: str, x: torch.Tensor) -> torch.Tensor:
        B, N, R = x.shape
        seq = T.reshape(x, (B * N, R, 1))
        out = T.causal_conv1d(seq, getattr(self, f"filter_{name}"), getattr(self, f"bias_{name}"))
        return T.reshape(out, (B, N, R))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        R = self.config.hidden
        qkv = T.matmul(x, T.concat([self.w_q, self.w_k, self.w_v]))
        q = self._channel_conv("q", T.slice(qkv, 0, R))
        k = self._channel_conv("k", T.slice(qkv, R, 2 * R))
        v = self._channel_conv("v", T.slice(qkv, 2 * R, 3 * R))
        return T.matmul(T.mul(T.mul(q, k), v), self.w_o)


def build_operator(config: OperatorConfig) -> TokenMixer:
    """Instantiate a mixer with parameters drawn deterministically from ``config.seed``."""
    kind = config.kind
    if kind.is_attention:
        return Attention(config)
    if kind.is_hyena:
        return Hyena(config)
    if kind is Kind.MLP:
        return MLP(config)
    return HyenaXMLP(config)


def attention_weights(m: TokenMixer, x: torch.Tensor) -> torch.Tensor:
    if not isinstance(m, Attention):
        raise TypeError(f"attention_weights needs an attention mixer, got {m.config.kind.value}")
    return m.attention_weights(x)


def param_count(m: nn.Module) -> int:
    return sum(p.numel() for p in m.parameters())
