"""Two-stage grafting: regress new operators onto a frozen teacher, then finetune end to end.

Stage 1 captures each target operator's input/output pairs from the teacher
under diffusion-corrupted inputs and fits the replacement to them. Stage 2
trains the edited model on a small slice of the data with the diffusion loss.
"""

from __future__ import annotations

import concurrent.futures
import copy
import dataclasses
import enum
import hashlib
import math
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from graftkit.analysis import AnyConfig, LocalityReport, Mamba2Config, config_from_dict
from graftkit.diffusion import NoiseSchedule, TrainConfig, corrupt, drop_labels, train
from graftkit.model import DiT, ParallelPair, SLOTS, replace_operator
from graftkit.operators import OperatorConfig, TokenMixer, build_operator


class Strategy(str, enum.Enum):
    FULL = "FULL"
    INTERLEAVED = "INTERLEAVED"
    TOP_LOCAL = "TOP_LOCAL"
    LOW_LOCAL = "LOW_LOCAL"
    DEEP = "DEEP"


def target_count(ratio: float, depth: int) -> int:
    """``round(ratio * depth)`` with halves rounded up (so 0.5 * 7 replaces 4 layers)."""
    return int(math.floor(ratio * depth + 0.5))


@dataclasses.dataclass(frozen=True)
class GraftTarget:
    layer: int
    slot: str
    replacement: AnyConfig

    def to_dict(self) -> dict:
        return {"layer": self.layer, "slot": self.slot, "replacement": self.replacement.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "GraftTarget":
        return cls(int(d["layer"]), d["slot"], config_from_dict(d["replacement"]))


@dataclasses.dataclass(frozen=True)
class GraftPlan:
    targets: tuple[GraftTarget, ...]
    strategy: Strategy
    ratio: float
    depth: int

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not 0 < self.ratio <= 1:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.strategy is Strategy.FULL and self.ratio != 1.0:
            raise ValueError("FULL replacement requires ratio 1.0")
        keys = [(t.layer, t.slot) for t in self.targets]
        if len(set(keys)) != len(keys):
            raise ValueError("plan targets must be unique per (layer, slot)")
        for t in self.targets:
            if not 0 <= t.layer < self.depth:
                raise ValueError(f"target layer {t.layer} out of range for depth {self.depth}")
            if t.slot not in SLOTS:
                raise ValueError(f"unknown slot {t.slot!r}")
        per_slot = {slot: sum(1 for t in self.targets if t.slot == slot) for slot in SLOTS}
        expected = target_count(self.ratio, self.depth)
        for slot, n in per_slot.items():
            if n and n != expected:
                raise ValueError(f"{n} {slot} targets but ratio {self.ratio} of depth {self.depth} needs {expected}")

    @property
    def layers(self) -> list[int]:
        return sorted({t.layer for t in self.targets})

    def to_dict(self) -> dict:
        return {"strategy": self.strategy.value, "ratio": self.ratio, "depth": self.depth,
                "targets": [t.to_dict() for t in self.targets]}

    @classmethod
    def from_dict(cls, d: dict) -> "GraftPlan":
        unknown = set(d) - {"strategy", "ratio", "depth", "targets"}
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        return cls(tuple(GraftTarget.from_dict(t) for t in d["targets"]), d["strategy"],
                   float(d["ratio"]), int(d["depth"]))


def interleaved_layers(ratio: float, depth: int) -> list[int]:
    """Replace all but ``depth - n`` evenly spaced layers, always keeping layer 0.

    Gives odd indices at 0.5 and ``i % 4 != 0`` at 0.75 for depths divisible by 4.
    """
    n = target_count(ratio, depth)
    keep_count = depth - n
    keep = {math.floor(j * depth / keep_count) for j in range(keep_count)} if keep_count else set()
    return [i for i in range(depth) if i not in keep]


def make_plan(strategy: Strategy | str, ratio: float, depth: int, slot: str, replacement: AnyConfig,
              locality: LocalityReport | None = None, k: int = 32) -> GraftPlan:
    """Choose which layers get ``replacement`` in ``slot``.

    TOP_LOCAL / LOW_LOCAL rank layers by the report's band-``k`` locality
    (highest / lowest first, ties to the lower index).
    """
    strategy = Strategy(strategy)
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    n = target_count(ratio, depth)
    if strategy is Strategy.FULL:
        layers = list(range(depth))
    elif strategy is Strategy.INTERLEAVED:
        layers = interleaved_layers(ratio, depth)
    elif strategy is Strategy.DEEP:
        layers = list(range(depth - n, depth))
    else:
        if locality is None:
            raise ValueError(f"{strategy.value} needs a locality report")
        if k not in locality.k_grid:
            raise ValueError(f"k={k} is not in the report's grid {locality.k_grid}")
        missing = set(range(depth)) - set(locality.layers)
        if missing:
            raise ValueError(f"locality report has no values for layers {sorted(missing)}")
        sign = -1.0 if strategy is Strategy.TOP_LOCAL else 1.0
        ranked = sorted(range(depth), key=lambda i: (sign * locality.value(i, k), i))
        layers = sorted(ranked[:n])
    return GraftPlan(tuple(GraftTarget(i, slot, replacement) for i in layers), strategy, ratio, depth)


# -- objectives ------------------------------------------------------------------


class ObjectiveKind(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"
    HUBER = "HUBER"


@dataclasses.dataclass(frozen=True)
class RegressionObjective:
    kind: ObjectiveKind = ObjectiveKind.L2
    delta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ObjectiveKind(self.kind))
        if self.delta <= 0:
            raise ValueError("Huber delta must be positive")

    def pointwise(self, residual: torch.Tensor) -> torch.Tensor:
        zero = torch.zeros_like(residual)
        if self.kind is ObjectiveKind.L1:
            return F.l1_loss(residual, zero, reduction="none")
        if self.kind is ObjectiveKind.L2:
            return F.mse_loss(residual, zero, reduction="none")
        return F.huber_loss(residual, zero, reduction="none", delta=self.delta)

    def __call__(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return self.pointwise(pred - target).mean()


def default_objective(slot: str) -> RegressionObjective:
    """L1 for attention slots, L2 for MLP slots."""
    return RegressionObjective(ObjectiveKind.L1 if slot == "mha" else ObjectiveKind.L2)


# -- activation capture ----------------------------------------------------------


def fingerprint(model: nn.Module) -> str:
    """SHA-256 over parameter names, shapes and bytes, in state-dict order."""
    h = hashlib.sha256()
    for name, value in model.state_dict().items():
        h.update(name.encode())
        h.update(str(tuple(value.shape)).encode())
        h.update(value.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclasses.dataclass
class ActivationDataset:
    """Input/output records of one teacher operator (or one block pair when ``slot == "pair"``).

    ``gate`` holds the per-record modulation gate when targets are
    modulation-aware; ``cond`` holds the conditioning vector for pair records.
    """

    layer: int
    slot: str
    inputs: torch.Tensor
    targets: torch.Tensor
    t: torch.Tensor
    c: torch.Tensor
    teacher_fingerprint: str
    modulation_aware: bool = False
    seed: int = 0
    gate: torch.Tensor | None = None
    cond: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.inputs)

    def metadata(self) -> dict:
        return {"layer": self.layer, "slot": self.slot, "count": len(self), "seed": self.seed,
                "modulation_aware": self.modulation_aware, "teacher_fingerprint": self.teacher_fingerprint}


def _draw_probe(teacher: DiT, data, s: NoiseSchedule, count: int, seed: int, label_dropout: bool = True):
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randint(0, len(data), (count,), generator=gen)
    z, c = data.images[idx], data.labels[idx]
    t = torch.randint(0, s.num_timesteps, (count,), generator=gen)
    eps = torch.randn(z.shape, generator=gen, dtype=z.dtype)
    if label_dropout and teacher.config.cfg_dropout > 0:
        c = drop_labels(c, teacher.config.cfg_dropout, teacher.config.num_classes, gen)
    return corrupt(s, z, t, eps), t, c


@torch.no_grad()
def capture_activations(teacher: DiT, data, layers: int | Sequence[int], slot: str, count: int,
                        seed: int = 0, modulation_aware: bool = False, schedule: NoiseSchedule | None = None,
                        batch: int = 256) -> ActivationDataset | dict[int, ActivationDataset]:
    """Record what the teacher's ``slot`` operator consumed and produced at each of ``layers``.

    One teacher pass serves all requested layers. Returns a single dataset
    for an int ``layers`` and a ``{layer: dataset}`` dict otherwise.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if slot not in SLOTS:
        raise ValueError(f"unknown slot {slot!r}")
    if modulation_aware and slot != "mha":
        raise ValueError("modulation-aware targets are defined for the mha slot only")
    single = isinstance(layers, int)
    layers = [layers] if single else list(layers)
    blocks = teacher.blocks()
    for layer in layers:
        if not 0 <= layer < len(blocks):
            raise ValueError(f"layer {layer} out of range for {len(blocks)} blocks")
    s = schedule or NoiseSchedule(teacher.config.num_timesteps)
    z_t, t, c = _draw_probe(teacher, data, s, count, seed)
    store = {layer: {"in": [], "out": [], "gate": []} for layer in layers}

    def make_hook(layer):
        def hook(module, inputs, output):
            store[layer]["in"].append(inputs[0].detach().clone())
            store[layer]["out"].append(output.detach().clone())
        return hook

    handles = [blocks[layer].slot(slot).register_forward_hook(make_hook(layer)) for layer in layers]
    teacher.eval()
    try:
        for start in range(0, count, batch):
            sl = slice(start, start + batch)
            teacher(z_t[sl], t[sl], c[sl])
            if modulation_aware:
                cond = teacher.conditioning(t[sl], c[sl])
                for layer in layers:
                    store[layer]["gate"].append(blocks[layer].modulation(cond)[2].detach().clone())
    finally:
        for h in handles:
            h.remove()

    fp = fingerprint(teacher)
    out = {}
    for layer in layers:
        inputs, targets = torch.cat(store[layer]["in"]), torch.cat(store[layer]["out"])
        gate = torch.cat(store[layer]["gate"]) if modulation_aware else None
        if gate is not None:
            targets = targets * gate[:, None, :]
        out[layer] = ActivationDataset(layer, slot, inputs, targets, t.clone(), c.clone(), fp,
                                       modulation_aware, seed, gate=gate)
    return out[layers[0]] if single else out


@torch.no_grad()
def capture_pair_activations(teacher: DiT, data, pair: int, count: int, seed: int = 0,
                             schedule: NoiseSchedule | None = None, batch: int = 256) -> ActivationDataset:
    """Records ``(x, cond) -> block_{2p+1}(block_{2p}(x))`` from a sequential teacher."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if any(isinstance(e, ParallelPair) for e in teacher.entries):
        raise ValueError("pair capture needs a sequential teacher")
    if not 0 <= 2 * pair + 1 < teacher.effective_depth:
        raise ValueError(f"pair {pair} out of range for depth {teacher.effective_depth}")
    s = schedule or NoiseSchedule(teacher.config.num_timesteps)
    z_t, t, c = _draw_probe(teacher, data, s, count, seed)
    first, second = teacher.entries[2 * pair], teacher.entries[2 * pair + 1]
    xs, ys, conds = [], [], []
    def record_in(module, inputs, output):
        xs.append(inputs[0].clone())
        conds.append(inputs[1].clone())

    def record_out(module, inputs, output):
        ys.append(output.clone())

    h1 = first.register_forward_hook(record_in)
    h2 = second.register_forward_hook(record_out)
    teacher.eval()
    try:
        for start in range(0, count, batch):
            sl = slice(start, start + batch)
            teacher(z_t[sl], t[sl], c[sl])
    finally:
        h1.remove()
        h2.remove()
    return ActivationDataset(2 * pair, "pair", torch.cat(xs), torch.cat(ys), t.clone(), c.clone(),
                             fingerprint(teacher), False, seed, cond=torch.cat(conds))


# -- stage 1 ---------------------------------------------------------------------


@dataclasses.dataclass
class DistillConfig:
    epochs: int = 100
    batch: int = 64
    lr: float = 1e-3
    clip: float = 10.0
    weight_decay: float = 0.0
    val_split: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class DistillResult:
    train_loss: list[float]  # mean minibatch objective per epoch
    val_loss: list[float]  # held-out objective; entry 0 is before training
    val_l2: list[float]  # held-out mean squared error; entry 0 is before training

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fit(module: nn.Module, predict: Callable[[torch.Tensor], torch.Tensor], targets: torch.Tensor,
         objective: RegressionObjective, cfg: DistillConfig) -> DistillResult:
    """Minimise ``objective(predict(idx), targets[idx])`` over a seeded train/val split."""
    n = len(targets)
    if n == 0:
        raise ValueError("empty activation dataset")
    if not 0 <= cfg.val_split < 1:
        raise ValueError("val_split must lie in [0, 1)")
    gen = torch.Generator().manual_seed(cfg.seed)
    perm = torch.randperm(n, generator=gen)
    n_val = int(math.floor(cfg.val_split * n))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise ValueError("no training records left after the validation split")

    @torch.no_grad()
    def evaluate() -> tuple[float, float]:
        if n_val == 0:
            return math.nan, math.nan
        obj, l2 = 0.0, 0.0
        for start in range(0, n_val, 256):
            idx = val_idx[start:start + 256]
            pred = predict(idx)
            obj += float(objective(pred, targets[idx])) * len(idx)
            l2 += float(F.mse_loss(pred, targets[idx])) * len(idx)
        return obj / n_val, l2 / n_val

    params = [p for p in module.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
    batches_per_epoch = math.ceil(len(train_idx) / cfg.batch)
    total = max(cfg.epochs * batches_per_epoch, 1)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: 0.5 * (1 + math.cos(math.pi * step / total)))

    v_obj, v_l2 = evaluate()
    result = DistillResult([], [v_obj], [v_l2])
    for epoch in range(cfg.epochs):
        order = train_idx[torch.randperm(len(train_idx), generator=gen)]
        running = 0.0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            loss = objective(predict(idx), targets[idx])
            value = float(loss.detach())
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite distillation loss at epoch {epoch}: trace {result.train_loss}")
            running += value * len(idx)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.clip)
            opt.step()
            sched.step()
        result.train_loss.append(running / len(order))
        v_obj, v_l2 = evaluate()
        result.val_loss.append(v_obj)
        result.val_l2.append(v_l2)
    return result


def distill_operator(g: TokenMixer, acts: ActivationDataset, objective: RegressionObjective | None = None,
                     cfg: DistillConfig | None = None) -> tuple[TokenMixer, DistillResult]:
    """Fit ``g`` (in place) so its output matches the recorded teacher outputs."""
    cfg = cfg or DistillConfig()
    objective = objective or default_objective(acts.slot)
    if len(acts) == 0:
        raise ValueError("empty activation dataset")
    if acts.inputs.shape[-1] != g.config.dim:
        raise ValueError(f"operator width {g.config.dim} does not match activations {acts.inputs.shape[-1]}")
    if acts.modulation_aware:
        def predict(idx):
            return g(acts.inputs[idx]) * acts.gate[idx][:, None, :]
    else:
        def predict(idx):
            return g(acts.inputs[idx])
    g.train()
    result = _fit(g, predict, acts.targets, objective, cfg)
    g.eval()
    return g, result


def distill_pair(pair: ParallelPair, acts: ActivationDataset, objective: RegressionObjective | None = None,
                 cfg: DistillConfig | None = None) -> tuple[ParallelPair, DistillResult]:
    """Fit a parallel pair (in place) to the sequential output of the two blocks it replaces."""
    if acts.cond is None:
        raise ValueError("pair distillation needs records captured with capture_pair_activations")
    objective = objective or RegressionObjective(ObjectiveKind.L2)
    pair.train()
    result = _fit(pair, lambda idx: pair(acts.inputs[idx], acts.cond[idx]), acts.targets,
                  objective, cfg or DistillConfig())
    pair.eval()
    return pair, result


def distill_many(jobs: Sequence[tuple[nn.Module, ActivationDataset, RegressionObjective | None, DistillConfig]],
                 workers: int = 1) -> list[tuple[nn.Module, DistillResult]]:
    """Run independent distillations, optionally on a thread pool; results do not depend on ``workers``."""

    def run(job):
        module, acts, objective, cfg = job
        if isinstance(module, ParallelPair):
            return distill_pair(module, acts, objective, cfg)
        return distill_operator(module, acts, objective, cfg)

    if workers <= 1:
        return [run(job) for job in jobs]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, jobs))


# -- assembly --------------------------------------------------------------------


def integrate(teacher: DiT, plan: GraftPlan, trained: Sequence[TokenMixer]) -> DiT:
    """Swap each plan target for the matching trained operator; everything else is shared with ``teacher``."""
    if len(trained) != len(plan.targets):
        raise ValueError(f"{len(trained)} operators for {len(plan.targets)} plan targets")
    if plan.depth != len(teacher.blocks()):
        raise ValueError(f"plan depth {plan.depth} does not match the model's {len(teacher.blocks())} blocks")
    g = teacher
    for target, op in zip(plan.targets, trained):
        if isinstance(target.replacement, Mamba2Config):
            raise ValueError("MAMBA2 targets are accounting-only and cannot be integrated")
        if op.config.kind is not target.replacement.kind:
            raise ValueError(f"layer {target.layer}: got {op.config.kind.value}, "
                             f"plan expects {target.replacement.kind.value}")
        g = replace_operator(g, target.layer, target.slot, op)
    return g


def fresh_operators(plan: GraftPlan) -> list[TokenMixer]:
    """Randomly initialised operators for every plan target."""
    out = []
    for t in plan.targets:
        if isinstance(t.replacement, Mamba2Config):
            raise ValueError("MAMBA2 targets are accounting-only and cannot be instantiated")
        out.append(build_operator(t.replacement))
    return out


def self_graft(teacher: DiT, slot: str, ratio: float = 1.0, strategy: Strategy | str = Strategy.FULL,
               seed: int = 0, locality: LocalityReport | None = None) -> tuple[GraftPlan, list[TokenMixer]]:
    """Plan that replaces operators with fresh copies of their own kind, re-drawn from ``seed``."""
    blocks = teacher.blocks()
    base = make_plan(strategy, ratio, len(blocks), slot, blocks[0].slot(slot).config, locality)
    targets = []
    for t in base.targets:
        own = blocks[t.layer].slot(slot).config
        targets.append(GraftTarget(t.layer, slot, own.replace(seed=1_000_003 * (seed + 1) + t.layer)))
    plan = dataclasses.replace(base, targets=tuple(targets))
    return plan, fresh_operators(plan)


def finetune(grafted: DiT, data, schedule: NoiseSchedule, fraction: float, cfg: TrainConfig,
             freeze_untouched: bool = False, plan: GraftPlan | None = None,
             subset_seed: int | None = None) -> tuple[DiT, list[float]]:
    """Train a deep copy of ``grafted`` on a seeded ``floor(fraction * n)`` subset of ``data``.

    With ``freeze_untouched`` only the plan's target operators (and any
    parallel-pair merges) are updated.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"data fraction must lie in (0, 1], got {fraction}")
    model = copy.deepcopy(grafted)
    gen = torch.Generator().manual_seed(cfg.seed if subset_seed is None else subset_seed)
    keep = int(math.floor(fraction * len(data)))
    if keep < 1:
        raise ValueError("data fraction selects no images")
    subset = data.subset(torch.randperm(len(data), generator=gen)[:keep])
    params = None
    if freeze_untouched:
        if plan is None and not any(isinstance(e, ParallelPair) for e in model.entries):
            raise ValueError("freeze_untouched needs the plan that names the grafted operators")
        params = []
        blocks = model.blocks()
        for t in plan.targets if plan is not None else ():
            params.extend(blocks[t.layer].slot(t.slot).parameters())
        for e in model.entries:
            if isinstance(e, ParallelPair):
                params.extend([e.merge_w, e.merge_b])
    return train(model, schedule, subset, cfg, params=params)


@torch.no_grad()
def make_probe(model: DiT, data, schedule: NoiseSchedule, count: int = 64, seed: int = 0):
    """A fixed set of ``(z_t, t, c)`` inputs for comparing models."""
    return _draw_probe(model, data, schedule, count, seed, label_dropout=False)


@torch.no_grad()
def end_to_end_deviation(a: DiT, b: DiT, probe) -> float:
    """Mean over probe items of the mean absolute difference between the two models' predictions."""
    z_t, t, c = probe
    a.eval()
    b.eval()
    ya, yb = a(z_t, t, c), b(z_t, t, c)
    if ya.shape != yb.shape:
        raise ValueError(f"output shapes differ: {tuple(ya.shape)} vs {tuple(yb.shape)}")
    per_item = (ya.double() - yb.double()).abs().flatten(1).mean(1)
    return float(per_item.mean())


# -- full pipeline ----------------------------------------------------------------


@dataclasses.dataclass
class GraftOutcome:
    model: DiT
    operators: list[nn.Module]
    results: list[DistillResult | None]


def graft(teacher: DiT, plan: GraftPlan, data, schedule: NoiseSchedule, records: int = 2048,
          cfg: DistillConfig | None = None, objective: RegressionObjective | None = None,
          init: str = "distill", workers: int = 1, capture_seed: int = 0) -> GraftOutcome:
    """Plan -> fresh operators -> (optionally) Stage-1 distillation -> integration.

    ``init="random"`` skips distillation and integrates the fresh operators;
    ``init="copy"`` integrates deep copies of the teacher's own operators
    (a no-op graft, useful as a control). Each target is distilled with seed ``cfg.seed + layer`` so results do not
    depend on ``workers``.
    """
    if init not in ("distill", "random", "copy"):
        raise ValueError(f"init must be 'distill', 'random' or 'copy', got {init!r}")
    if init == "copy":
        blocks = teacher.blocks()
        ops = [copy.deepcopy(blocks[t.layer].slot(t.slot)) for t in plan.targets]
        return GraftOutcome(integrate(teacher, plan, ops), ops, [None] * len(ops))
    ops = fresh_operators(plan)
    results: list[DistillResult | None] = [None] * len(ops)
    if init == "distill":
        cfg = cfg or DistillConfig()
        jobs = []
        for slot in SLOTS:
            layers = [t.layer for t in plan.targets if t.slot == slot]
            if not layers:
                continue
            acts = capture_activations(teacher, data, layers, slot, records, seed=capture_seed, schedule=schedule)
            for i, t in enumerate(plan.targets):
                if t.slot == slot:
                    jobs.append((i, (ops[i], acts[t.layer], objective, dataclasses.replace(cfg, seed=cfg.seed + t.layer))))
        done = distill_many([job for _, job in jobs], workers)
        for (i, _), (_, res) in zip(jobs, done):
            results[i] = res
    return GraftOutcome(integrate(teacher, plan, ops), ops, results)


def rewire_parallel(teacher: DiT, data, schedule: NoiseSchedule, records: int = 2048,
                    cfg: DistillConfig | None = None, objective: RegressionObjective | None = None,
                    workers: int = 1, capture_seed: int = 0, distill: bool = True) -> GraftOutcome:
    """Pair up sequential blocks and fit each parallel pair to its two-block teacher output."""
    from graftkit.model import parallelize_pairs

    model = parallelize_pairs(teacher)
    pairs = list(model.entries)
    results: list[DistillResult | None] = [None] * len(pairs)
    if distill:
        cfg = cfg or DistillConfig()
        jobs = []
        for p, pair in enumerate(pairs):
            acts = capture_pair_activations(teacher, data, p, records, seed=capture_seed, schedule=schedule)
            jobs.append((pair, acts, objective, dataclasses.replace(cfg, seed=cfg.seed + p)))
        results = [res for _, res in distill_many(jobs, workers)]
    return GraftOutcome(model, pairs, results)
