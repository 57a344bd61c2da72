"""Attention locality and closed-form FLOP / parameter accounting.

FLOP expressions count a multiply-add as two FLOPs and are evaluated exactly in
integer arithmetic. Each expression term is a named bucket tagged either
``op`` (the mixing core: softmax attention, gating, inner convolution, scan)
or ``ft`` (dense projections and featurizer convolutions). MLP-slot operators
put everything in ``op``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from fractions import Fraction
from typing import Sequence, Union

import numpy as np
import torch

from graftkit.operators import Attention, Kind, OperatorConfig


@dataclasses.dataclass(frozen=True)
class Mamba2Config:
    """Accounting-only description of a Mamba-2 mixer (no forward is implemented)."""

    dim: int
    expand: int = 2
    d_state: int = 64
    headdim: int = 64
    ngroups: int = 1
    conv_kernel: int = 4
    seed: int = 0

    kind = "MAMBA2"

    def to_dict(self) -> dict:
        return {"kind": "MAMBA2", **dataclasses.asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "Mamba2Config":
        d = dict(d)
        d.pop("kind", None)
        return cls(**d)


AnyConfig = Union[OperatorConfig, Mamba2Config]


def config_from_dict(d: dict) -> AnyConfig:
    if d.get("kind") == "MAMBA2":
        return Mamba2Config.from_dict(d)
    return OperatorConfig.from_dict(d)


def slot_of(cfg: AnyConfig) -> str:
    return "mha" if isinstance(cfg, Mamba2Config) else cfg.kind.slot


# -- FLOPs ----------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Bucket:
    name: str
    flops: int
    cls: str  # "op" or "ft"


def operator_flops(cfg: AnyConfig, seq_len: int, mlp_conv_convention: str = "featurized") -> list[Bucket]:
    """Bucketed FLOPs of one operator on a length-``seq_len`` sequence.

    ``mlp_conv_convention`` only affects HYENA_X_MLP: ``"featurized"`` charges the
    featurizer ``6LDK`` and gates ``2LD``; ``"wide_gates"`` charges no featurizer and
    gates over the expanded width, ``2LrD``.
    """
    L = seq_len
    if L < 1:
        raise ValueError(f"sequence length must be >= 1, got {L}")
    if isinstance(cfg, Mamba2Config):
        D, E, S = cfg.dim, cfg.expand, cfg.d_state
        return [
            Bucket("projections", 8 * L * D * D * E, "ft"),
            Bucket("short_conv", 6 * L * D * E, "ft"),
            Bucket("featurization", 2 * L * D * E * (1 + 2 * S) + 2 * L * D * E, "ft"),
            Bucket("scan", 2 * L * D * E * S, "op"),
            Bucket("output", 2 * L * D * D * E, "ft"),
        ]
    D, H, K, w = cfg.dim, cfg.heads, cfg.kernel_size, cfg.window
    kind = cfg.kind
    proj = [Bucket("in_proj", 6 * L * D * D, "ft")]
    out = [Bucket("out_proj", 2 * L * D * D, "ft")]
    if kind is Kind.MHA:
        return proj + [
            Bucket("attention", 4 * L * L * D, "op"),
            Bucket("softmax", 2 * H * L * L, "op"),
        ] + out
    if kind is Kind.SWA:
        span = 2 * w + 1
        return proj + [
            Bucket("attention", 4 * L * span * D, "op"),
            Bucket("softmax", 2 * H * L * span, "op"),
        ] + out
    if kind.is_hyena:
        mid = []
        if kind in (Kind.HYENA_SE, Kind.HYENA_X):
            mid.append(Bucket("featurizer", 3 * L * D * K * 2, "ft"))
        if kind in (Kind.HYENA_SE, Kind.HYENA_Y):
            mid.append(Bucket("inner_conv", L * D * K * 2, "op"))
        mid.append(Bucket("gates", L * D * 2, "op"))
        return proj + mid + out
    if kind is Kind.MLP:
        r = Fraction(cfg.ratio)
        half = 2 * r * L * D * D
        if half.denominator != 1:
            raise ValueError("MLP FLOPs must be integral; choose ratio * dim integral")
        return [Bucket("in_proj", int(half), "op"), Bucket("out_proj", int(half), "op")]
    if kind is Kind.HYENA_X_MLP:
        r = Fraction(cfg.ratio)
        dense_in, dense_out = 6 * L * D * D * r, 2 * L * D * D * r
        if mlp_conv_convention == "featurized":
            mid = [Bucket("featurizer", 3 * L * D * K * 2, "op"), Bucket("gates", L * D * 2, "op")]
        elif mlp_conv_convention == "wide_gates":
            mid = [Bucket("gates", int(2 * L * r * D), "op")]
        else:
            raise ValueError(f"unknown convention {mlp_conv_convention!r}")
        return [Bucket("dense_in", int(dense_in), "op")] + mid + [Bucket("dense_out", int(dense_out), "op")]
    raise ValueError(f"unknown operator kind {kind!r}")


def flops_by_class(buckets: Sequence[Bucket]) -> dict[str, int]:
    out = {"op": 0, "ft": 0}
    for b in buckets:
        out[b.cls] += b.flops
    return out


# -- parameters -----------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ParamCount:
    """Trainable scalars split into dense matrices, filter taps (+ their biases) and dense biases."""

    dense: int
    filters: int = 0
    bias: int = 0

    @property
    def weights(self) -> int:
        """The count used for relative parameter deltas: everything except dense-layer biases."""
        return self.dense + self.filters

    @property
    def total(self) -> int:
        return self.dense + self.filters + self.bias


def operator_params(cfg: AnyConfig) -> ParamCount:
    """Exact parameter count of an operator as built by :func:`graftkit.operators.build_operator`."""
    if isinstance(cfg, Mamba2Config):
        D, E, S, G, K = cfg.dim, cfg.expand, cfg.d_state, cfg.ngroups, cfg.conv_kernel
        inner = E * D
        nheads = inner // cfg.headdim
        conv_dim = inner + 2 * G * S
        return ParamCount(
            dense=D * (2 * inner + 2 * G * S + nheads) + inner * D,
            filters=conv_dim * (K + 1),
            bias=3 * nheads + inner,  # dt_bias, A_log, D skip, and the gated norm weight
        )
    D, K = cfg.dim, cfg.kernel_size
    kind = cfg.kind
    if kind.is_attention:
        return ParamCount(dense=4 * D * D)
    if kind.is_hyena:
        n_filters = {Kind.HYENA_SE: 4, Kind.HYENA_X: 3, Kind.HYENA_Y: 1}[kind]
        return ParamCount(dense=4 * D * D, filters=n_filters * (D * K + D))
    R = cfg.hidden
    if kind is Kind.MLP:
        return ParamCount(dense=2 * D * R, bias=R + D)
    return ParamCount(dense=4 * D * R, filters=3 * (K + 1))


# -- deltas against a baseline ----------------------------------------------------


@dataclasses.dataclass(frozen=True)
class BaselineConfig:
    """Slot-level description of the unmodified model used as the delta denominator."""

    depth: int = 28
    dim: int = 1152
    heads: int = 16
    seq_len: int = 256
    mlp_ratio: float = 4.0

    def base(self, slot: str) -> OperatorConfig:
        if slot == "mha":
            return OperatorConfig(Kind.MHA, self.dim, heads=self.heads)
        return OperatorConfig(Kind.MLP, self.dim, ratio=self.mlp_ratio)


BASELINES = {"xl2": BaselineConfig(), "xs": BaselineConfig(depth=8, dim=64, heads=4, seq_len=64)}


@dataclasses.dataclass
class FlopReport:
    baseline: BaselineConfig
    layers: list[dict]
    totals: dict[str, dict[str, int]]
    deltas: dict[str, dict[str, float]]
    convention: str = "featurized"

    def to_dict(self) -> dict:
        return {
            "baseline": dataclasses.asdict(self.baseline),
            "convention": self.convention,
            "layers": self.layers,
            "totals": self.totals,
            "deltas": self.deltas,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["slot", "delta_flops_op_pct", "delta_flops_ft_pct", "delta_param_pct"])
        for slot, d in sorted(self.deltas.items()):
            writer.writerow([slot, f"{d['flops_op']:.4f}", f"{d['flops_ft']:.4f}", f"{d['params']:.4f}"])
        return buf.getvalue()


def _pct(after: int, before: int) -> float:
    return 0.0 if before == 0 else 100.0 * (after - before) / before


def delta_report(baseline: BaselineConfig, plan, mlp_conv_convention: str = "featurized") -> FlopReport:
    """Percent change in op-class FLOPs, ft-class FLOPs and weights for each slot class the plan touches.

    Denominators are the slot-class totals over all ``baseline.depth`` layers,
    so replacing half the layers of an operator with a free one gives -50%.
    """
    if plan.depth != baseline.depth:
        raise ValueError(f"plan was built for depth {plan.depth}, baseline has depth {baseline.depth}")
    targets = {(t.layer, t.slot): t.replacement for t in plan.targets}
    for layer, _ in targets:
        if not 0 <= layer < baseline.depth:
            raise ValueError(f"plan layer {layer} is outside a depth-{baseline.depth} baseline")
    slots = sorted({slot for _, slot in targets})
    L = baseline.seq_len
    layers, totals, deltas = [], {}, {}
    for slot in slots:
        base_cfg = baseline.base(slot)
        base_b = flops_by_class(operator_flops(base_cfg, L, mlp_conv_convention))
        base_p = operator_params(base_cfg).weights
        before = {"op": 0, "ft": 0, "params": 0}
        after = {"op": 0, "ft": 0, "params": 0}
        for layer in range(baseline.depth):
            cfg = targets.get((layer, slot), base_cfg)
            if isinstance(cfg, OperatorConfig) and cfg.dim != baseline.dim:
                cfg = cfg.replace(dim=baseline.dim)
            b = flops_by_class(operator_flops(cfg, L, mlp_conv_convention))
            p = operator_params(cfg).weights
            for key, a, z in (("op", b["op"], base_b["op"]), ("ft", b["ft"], base_b["ft"]), ("params", p, base_p)):
                after[key] += a
                before[key] += z
            layers.append({
                "layer": layer,
                "slot": slot,
                "kind": cfg.kind if isinstance(cfg, Mamba2Config) else cfg.kind.value,
                "flops_op": b["op"],
                "flops_ft": b["ft"],
                "params": p,
            })
        totals[slot] = {f"before_{k}": v for k, v in before.items()} | {f"after_{k}": v for k, v in after.items()}
        deltas[slot] = {
            "flops_op": _pct(after["op"], before["op"]),
            "flops_ft": _pct(after["ft"], before["ft"]),
            "params": _pct(after["params"], before["params"]),
        }
    return FlopReport(baseline, layers, totals, deltas, mlp_conv_convention)


# -- locality -------------------------------------------------------------------


def band_locality(A, k: int) -> float:
    """Fraction of attention mass within ``|i - j| <= k``, normalised by the row count."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"attention matrix must be square, got shape {A.shape}")
    n = A.shape[0]
    if not 0 <= k <= n - 1:
        raise ValueError(f"band k must lie in [0, {n - 1}], got {k}")
    if (A < 0).any():
        raise ValueError("attention matrix has negative entries")
    idx = np.arange(n)
    band = np.abs(idx[:, None] - idx[None, :]) <= k
    return float((A * band).sum() / n)


def default_k_grid(n: int) -> list[int]:
    grid, k = [], 1
    while k < n - 1:
        grid.append(k)
        k *= 2
    return grid + [n - 1]


def diagonal_mass(A: torch.Tensor) -> torch.Tensor:
    """Mean over leading dims of ``(1/N) * sum_{|i-j|=d} A_ij`` for each offset ``d``; shape ``[N]``."""
    n = A.shape[-1]
    idx = torch.arange(n)
    dist = (idx[:, None] - idx[None, :]).abs().reshape(-1)
    flat = A.reshape(-1, n * n).to(torch.float64).mean(0)
    return torch.zeros(n, dtype=torch.float64).index_add_(0, dist, flat) / n


@dataclasses.dataclass
class LocalityReport:
    layers: list[int]
    kinds: list[str]
    k_grid: list[int]
    curves: list[list[float]]
    metadata: dict

    def value(self, layer: int, k: int) -> float:
        return self.curves[self.layers.index(layer)][self.k_grid.index(k)]

    def summary(self, k: int) -> dict[int, float]:
        return {layer: self.value(layer, k) for layer in self.layers}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LocalityReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["layer", "kind"] + [f"L_{k}" for k in self.k_grid])
        for layer, kind, curve in zip(self.layers, self.kinds, self.curves):
            writer.writerow([layer, kind] + [f"{v:.6f}" for v in curve])
        return buf.getvalue()

    def to_svg(self, width: int = 480, height: int = 320) -> str:
        """Plain SVG line plot of every layer's curve against log2(k)."""
        pad = 40
        xs = np.log2(np.maximum(self.k_grid, 1))
        span = max(xs.max() - xs.min(), 1e-9)

        def px(x, y):
            return pad + (x - xs.min()) / span * (width - 2 * pad), height - pad - y * (height - 2 * pad)

        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
            f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        ]
        for i, (layer, curve) in enumerate(zip(self.layers, self.curves)):
            hue = int(360 * i / max(len(self.layers), 1))
            pts = " ".join("{:.1f},{:.1f}".format(*px(x, y)) for x, y in zip(xs, curve))
            parts.append(f'<polyline fill="none" stroke="hsl({hue},70%,45%)" points="{pts}"><title>layer {layer}</title></polyline>')
        parts.append(f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">log2 k</text>')
        parts.append("</svg>")
        return "\n".join(parts)


def locality_profile(
    model,
    schedule,
    steps: int = 50,
    cfg_scale: float = 1.5,
    num_samples: int = 16,
    seed: int = 0,
    k_grid: Sequence[int] | None = None,
    batch_size: int = 64,
) -> LocalityReport:
    """Band-k curves for every attention layer, averaged over heads, sampling steps and samples.

    Attention maps are collected from the conditional and unconditional passes
    of classifier-free-guided DDIM sampling.
    """
    from graftkit.diffusion import sample

    blocks = model.blocks()
    attn_layers = [i for i, b in enumerate(blocks) if isinstance(b.mixer, Attention)]
    if not attn_layers:
        raise ValueError("model has no attention layers")
    n = model.config.num_tokens
    grid = list(k_grid) if k_grid is not None else default_k_grid(n)
    sums = {i: torch.zeros(n, dtype=torch.float64) for i in attn_layers}
    calls = {i: 0 for i in attn_layers}

    def make_hook(layer):
        def hook(module, inputs, output):
            with torch.no_grad():
                sums[layer] += diagonal_mass(module.attention_weights(inputs[0]))
            calls[layer] += 1

        return hook

    handles = [blocks[i].mixer.register_forward_hook(make_hook(i)) for i in attn_layers]
    try:
        classes = torch.arange(num_samples) % model.config.num_classes
        for start in range(0, num_samples, batch_size):
            sample(model, schedule, method="ddim", steps=steps, cfg_scale=cfg_scale,
                   classes=classes[start:start + batch_size], seed=seed + start)
    finally:
        for h in handles:
            h.remove()

    curves = []
    for i in attn_layers:
        cum = torch.cumsum(sums[i] / calls[i], 0)
        curves.append([float(min(cum[k], 1.0)) for k in grid])
    return LocalityReport(
        layers=attn_layers,
        kinds=[blocks[i].mixer.config.kind.value for i in attn_layers],
        k_grid=grid,
        curves=curves,
        metadata={"sampler": "ddim", "steps": steps, "cfg_scale": cfg_scale,
                  "num_samples": num_samples, "seed": seed},
    )
