"""Command-line front end: ``graftkit <command> [--config run.json] [flags]``.

Every invocation writes into its own run directory (``--out``) the fully
resolved config, its artifacts with manifests, and a ``metrics.json`` report.
Exit status is 0 on success, 1 on invalid input and 2 on numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Literal, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from graftkit import analysis, diffusion, graft, persistence
from graftkit.model import DiTConfig, build_model
from graftkit.operators import Kind, OperatorConfig
from graftkit.tensor import NonFiniteError

log = logging.getLogger("graftkit")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
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


class ScheduleSection(_Section):
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


class DataSection(_Section):
    size: int = Field(8192, ge=1)
    seed: int = 0
    val_size: int = Field(1024, ge=1)
    val_seed: int = 1


class TrainSection(_Section):
    steps: int = Field(3000, ge=0)
    batch: int = Field(32, ge=1)
    lr: float = Field(2e-3, gt=0)
    warmup: int = Field(200, ge=0)
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    decay: Literal["constant", "cosine"] = "cosine"
    seed: int = 0


class FinetuneSection(TrainSection):
    fraction: float = Field(0.1, gt=0, le=1)
    steps: int = Field(2000, ge=0)
    batch: int = Field(16, ge=1)
    lr: float = Field(5e-4, gt=0)
    warmup: int = Field(100, ge=0)
    freeze_untouched: bool = False


class DistillSection(_Section):
    records: int = Field(2048, ge=1)
    epochs: int = Field(100, ge=0)
    batch: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    clip: float = 10.0
    weight_decay: float = 0.0
    val_split: float = Field(0.1, ge=0, lt=1)
    seed: int = 0
    objective: Optional[Literal["L1", "L2", "HUBER"]] = None
    huber_delta: float = Field(1.0, gt=0)
    capture_seed: int = 0
    workers: int = Field(1, ge=1)


class PlanSection(_Section):
    strategy: Literal["FULL", "INTERLEAVED", "TOP_LOCAL", "LOW_LOCAL", "DEEP"] = "INTERLEAVED"
    ratio: float = Field(0.5, gt=0, le=1)
    slot: Literal["mha", "mlp"] = "mha"
    kind: Literal["MHA", "SWA", "HYENA_SE", "HYENA_X", "HYENA_Y", "MLP", "HYENA_X_MLP", "MAMBA2"] = "HYENA_X"
    kernel_size: int = Field(4, ge=1)
    window: int = Field(4, ge=0)
    ratio_mlp: float = Field(4.0, gt=0)
    k: int = 32
    seed: int = 0


class SampleSection(_Section):
    method: Literal["ddim", "ddpm"] = "ddim"
    steps: int = Field(50, ge=1)
    cfg_scale: float = Field(1.5, ge=0)
    samples: int = Field(256, ge=1)
    seed: int = 0
    probe_count: int = Field(64, ge=1)


class RunConfig(_Section):
    model: ModelSection = ModelSection()
    schedule: ScheduleSection = ScheduleSection()
    data: DataSection = DataSection()
    teacher: TrainSection = TrainSection()
    distill: DistillSection = DistillSection()
    finetune: FinetuneSection = FinetuneSection()
    plan: PlanSection = PlanSection()
    eval: SampleSection = SampleSection()
    locality: SampleSection = SampleSection(samples=16)


class UsageError(ValueError):
    pass


# -- helpers ---------------------------------------------------------------------


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"])
        lines.append(f"{path}: {e['msg']}")
    return "invalid config: " + "; ".join(lines)


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for key in keys[:-1]:
        d = d.setdefault(key, {})
    d[keys[-1]] = value


def load_config(path: str | None, overrides: dict[str, object]) -> RunConfig:
    """Defaults <- JSON file <- command-line overrides (dotted keys); validated as a whole."""
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        raw = json.loads(p.read_text())
    for key, value in overrides.items():
        if value is not None:
            _set_path(raw, key, value)
    return RunConfig.model_validate(raw)


def _require(path: str | None, flag: str) -> Path:
    if not path:
        raise UsageError(f"missing required input {flag}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{flag}: no such file {path}")
    return p


def _threads(requested: int) -> int:
    cap = os.environ.get("GRAFTKIT_THREADS")
    if cap is None:
        return requested
    try:
        cap_n = int(cap)
    except ValueError:
        raise UsageError(f"GRAFTKIT_THREADS must be an integer, got {cap!r}") from None
    if cap_n < 1:
        raise UsageError("GRAFTKIT_THREADS must be >= 1")
    return min(requested, cap_n)


def _schedule(cfg: RunConfig) -> diffusion.NoiseSchedule:
    return diffusion.NoiseSchedule(**cfg.schedule.model_dump())


def _train_config(section: TrainSection) -> diffusion.TrainConfig:
    fields = {f.name for f in dataclasses.fields(diffusion.TrainConfig)}
    return diffusion.TrainConfig(**{k: v for k, v in section.model_dump().items() if k in fields})


def _distill_config(section: DistillSection) -> graft.DistillConfig:
    fields = {f.name for f in dataclasses.fields(graft.DistillConfig)}
    return graft.DistillConfig(**{k: v for k, v in section.model_dump().items() if k in fields})


def _objective(section: DistillSection) -> graft.RegressionObjective | None:
    if section.objective is None:
        return None
    return graft.RegressionObjective(section.objective, section.huber_delta)


def _replacement(cfg: RunConfig, dim: int, heads: int) -> analysis.AnyConfig:
    p = cfg.plan
    if p.kind == "MAMBA2":
        return analysis.Mamba2Config(dim, seed=p.seed)
    return OperatorConfig(Kind(p.kind), dim, heads=heads, kernel_size=p.kernel_size, window=p.window,
                          ratio=p.ratio_mlp, seed=p.seed)


class Run:
    """One output directory; echoes the resolved config on creation."""

    def __init__(self, out: str, command: str, cfg: RunConfig, inputs: dict[str, str | None]):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        resolved = {"command": command, "config": cfg.model_dump(),
                    "inputs": {k: v for k, v in inputs.items() if v is not None}}
        (self.dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    def path(self, name: str) -> Path:
        return self.dir / name

    def metrics(self, metrics: dict) -> None:
        persistence.save_report(metrics, self.path("metrics.json"), config=self.cfg.model_dump())
        print(json.dumps(metrics, indent=2, sort_keys=True))


def _val_data(cfg: RunConfig, path: str | None) -> diffusion.BlobDataset:
    if path:
        return persistence.load_dataset(_require(path, "--val-data"))
    return diffusion.BlobDataset(cfg.data.val_size, seed=cfg.data.val_seed)


def _load_plan(path: str) -> graft.GraftPlan:
    return graft.GraftPlan.from_dict(json.loads(_require(path, "--plan").read_text()))


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> None:
    run = Run(args.out, "gen-data", cfg, {})
    train = diffusion.BlobDataset(cfg.data.size, seed=cfg.data.seed, num_classes=cfg.model.num_classes,
                                  image_size=cfg.model.image_size)
    val = diffusion.BlobDataset(cfg.data.val_size, seed=cfg.data.val_seed, num_classes=cfg.model.num_classes,
                                image_size=cfg.model.image_size)
    persistence.save_dataset(train, run.path("train.grft"))
    persistence.save_dataset(val, run.path("val.grft"))
    run.metrics({"train_size": len(train), "val_size": len(val)})


def cmd_train_teacher(args, cfg: RunConfig) -> None:
    data = persistence.load_dataset(_require(args.data, "--data"))
    run = Run(args.out, "train-teacher", cfg, {"data": args.data})
    model = build_model(DiTConfig(**cfg.model.model_dump()))
    s = _schedule(cfg)
    model, losses = diffusion.train(model, s, data, _train_config(cfg.teacher))
    persistence.save_checkpoint(model, run.path("teacher.grft"), seeds={"model": cfg.model.seed, "train": cfg.teacher.seed})
    persistence.save_report({"loss": losses}, run.path("losses.json"))
    window = losses[-100:]
    val = _val_data(cfg, args.val_data)
    run.metrics({"final_window_loss": sum(window) / max(len(window), 1),
                 "val_dm_loss": diffusion.eval_loss(model, s, val)})


def cmd_locality(args, cfg: RunConfig) -> None:
    model = persistence.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    run = Run(args.out, "locality", cfg, {"checkpoint": args.checkpoint})
    loc = cfg.locality
    report = analysis.locality_profile(model, _schedule(cfg), steps=loc.steps, cfg_scale=loc.cfg_scale,
                                       num_samples=loc.samples, seed=loc.seed)
    persistence.save_report(report.to_dict(), run.path("locality.json"))
    run.path("locality.csv").write_text(report.to_csv())
    run.path("locality.svg").write_text(report.to_svg())
    k = cfg.plan.k if cfg.plan.k in report.k_grid else report.k_grid[-2]
    run.metrics({"k": k, "L_k": {str(layer): v for layer, v in report.summary(k).items()}})


def cmd_plan(args, cfg: RunConfig) -> None:
    run = Run(args.out, "plan", cfg, {"locality": args.locality})
    depth = args.depth or cfg.model.depth
    dim = args.dim or cfg.model.dim
    heads = args.heads or cfg.model.heads
    locality = None
    if args.locality:
        locality = analysis.LocalityReport.from_dict(persistence.load_report(_require(args.locality, "--locality")))
    plan = graft.make_plan(cfg.plan.strategy, cfg.plan.ratio, depth, cfg.plan.slot,
                           _replacement(cfg, dim, heads), locality, k=cfg.plan.k)
    run.path("plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
    run.metrics({"layers": plan.layers, "strategy": plan.strategy.value, "ratio": plan.ratio, "depth": plan.depth})


def _graft_outcome(args, cfg: RunConfig, init: str):
    teacher = persistence.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    data = persistence.load_dataset(_require(args.data, "--data"))
    if args.plan:
        plan = _load_plan(args.plan)
    else:
        c = teacher.config
        plan = graft.make_plan(cfg.plan.strategy, cfg.plan.ratio, len(teacher.blocks()), cfg.plan.slot,
                               _replacement(cfg, c.dim, c.heads), k=cfg.plan.k)
    workers = _threads(cfg.distill.workers)
    outcome = graft.graft(teacher, plan, data, _schedule(cfg), records=cfg.distill.records,
                          cfg=_distill_config(cfg.distill), objective=_objective(cfg.distill), init=init,
                          workers=workers, capture_seed=cfg.distill.capture_seed)
    return teacher, plan, outcome


def _distill_metrics(plan: graft.GraftPlan, outcome: graft.GraftOutcome) -> dict:
    out = []
    for t, res in zip(plan.targets, outcome.results):
        entry = {"layer": t.layer, "slot": t.slot, "kind": t.replacement.to_dict()["kind"]}
        if res is not None:
            entry |= {"initial_val_l2": res.val_l2[0], "final_val_l2": res.val_l2[-1],
                      "final_train_loss": res.train_loss[-1] if res.train_loss else None}
        out.append(entry)
    return {"targets": out}


def cmd_distill(args, cfg: RunConfig) -> None:
    run = Run(args.out, "distill", cfg, {"checkpoint": args.checkpoint, "data": args.data, "plan": args.plan})
    _, plan, outcome = _graft_outcome(args, cfg, "distill")
    tensors = {}
    for i, op in enumerate(outcome.operators):
        for name, value in op.state_dict().items():
            tensors[f"target{i}.{name}"] = value
    persistence.save_tensors(run.path("operators.grft"), tensors, "checkpoint",
                             {"plan": plan.to_dict(), "operators_only": True}, {"distill": cfg.distill.seed})
    persistence.save_checkpoint(outcome.model, run.path("grafted.grft"), extra={"plan": plan.to_dict()})
    persistence.save_report({"results": [r.to_dict() if r else None for r in outcome.results]},
                            run.path("distill_curves.json"))
    run.metrics(_distill_metrics(plan, outcome))


def cmd_graft(args, cfg: RunConfig) -> None:
    run = Run(args.out, "graft", cfg, {"checkpoint": args.checkpoint, "data": args.data, "plan": args.plan})
    teacher, plan, outcome = _graft_outcome(args, cfg, args.init)
    run.path("plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
    persistence.save_checkpoint(outcome.model, run.path("grafted.grft"), extra={"plan": plan.to_dict(), "init": args.init})
    probe = graft.make_probe(teacher, _val_data(cfg, args.val_data), _schedule(cfg), cfg.eval.probe_count, cfg.eval.seed)
    metrics = _distill_metrics(plan, outcome)
    metrics["deviation_from_teacher"] = graft.end_to_end_deviation(teacher, outcome.model, probe)
    run.metrics(metrics)


def cmd_finetune(args, cfg: RunConfig) -> None:
    model = persistence.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    data = persistence.load_dataset(_require(args.data, "--data"))
    run = Run(args.out, "finetune", cfg, {"checkpoint": args.checkpoint, "data": args.data, "plan": args.plan})
    plan = _load_plan(args.plan) if args.plan else None
    ft = cfg.finetune
    tuned, losses = graft.finetune(model, data, _schedule(cfg), ft.fraction, _train_config(ft),
                                   freeze_untouched=ft.freeze_untouched, plan=plan)
    persistence.save_checkpoint(tuned, run.path("finetuned.grft"), seeds={"finetune": ft.seed})
    persistence.save_report({"loss": losses}, run.path("losses.json"))
    run.metrics({"steps": len(losses), "images": int(ft.fraction * len(data)),
                 "val_dm_loss": diffusion.eval_loss(tuned, _schedule(cfg), _val_data(cfg, args.val_data))})


def cmd_rewire_parallel(args, cfg: RunConfig) -> None:
    teacher = persistence.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    data = persistence.load_dataset(_require(args.data, "--data"))
    run = Run(args.out, "rewire-parallel", cfg, {"checkpoint": args.checkpoint, "data": args.data})
    outcome = graft.rewire_parallel(teacher, data, _schedule(cfg), records=cfg.distill.records,
                                    cfg=_distill_config(cfg.distill), objective=_objective(cfg.distill),
                                    workers=_threads(cfg.distill.workers), capture_seed=cfg.distill.capture_seed,
                                    distill=not args.no_distill)
    persistence.save_checkpoint(outcome.model, run.path("rewired.grft"))
    from graftkit.model import param_count

    run.metrics({"depth_before": teacher.effective_depth, "depth_after": outcome.model.effective_depth,
                 "params_before": param_count(teacher), "params_after": param_count(outcome.model),
                 "pairs": [{"pair": i, "final_val_l2": r.val_l2[-1]} if r else {"pair": i}
                           for i, r in enumerate(outcome.results)]})


def cmd_flops(args, cfg: RunConfig) -> None:
    plan = _load_plan(args.plan)
    run = Run(args.out, "flops", cfg, {"plan": args.plan})
    if args.baseline not in analysis.BASELINES:
        raise UsageError(f"unknown baseline {args.baseline!r}; choose from {sorted(analysis.BASELINES)}")
    report = analysis.delta_report(analysis.BASELINES[args.baseline], plan, args.convention)
    persistence.save_report(report.to_dict(), run.path("flops.json"))
    run.path("flops.csv").write_text(report.to_csv())
    run.metrics({"baseline": args.baseline, "convention": args.convention,
                 "deltas_pct": {slot: {k: round(v, 2) for k, v in d.items()} for slot, d in report.deltas.items()}})


def cmd_eval(args, cfg: RunConfig) -> None:
    model = persistence.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    run = Run(args.out, "eval", cfg, {"checkpoint": args.checkpoint, "reference": args.reference})
    s = _schedule(cfg)
    val = _val_data(cfg, args.val_data)
    ev = cfg.eval
    classes = torch.arange(ev.samples) % model.config.num_classes
    images = diffusion.sample(model, s, ev.method, ev.steps, ev.cfg_scale, classes, seed=ev.seed)
    metrics = {"val_dm_loss": diffusion.eval_loss(model, s, val),
               "blob_accuracy": diffusion.blob_accuracy(images, classes, model.config.num_classes)}
    if args.reference:
        ref = persistence.load_checkpoint(_require(args.reference, "--reference"))
        probe = graft.make_probe(ref, val, s, ev.probe_count, ev.seed)
        metrics["deviation_from_reference"] = graft.end_to_end_deviation(ref, model, probe)
    run.metrics(metrics)


def cmd_report(args, cfg: RunConfig) -> None:
    run = Run(args.out, "report", cfg, {})
    rows = []
    for d in args.runs:
        path = Path(d) / "metrics.json"
        _require(str(path), "--runs")
        resolved = json.loads((Path(d) / "config.json").read_text()) if (Path(d) / "config.json").exists() else {}
        rows.append({"run": str(d), "command": resolved.get("command"), "metrics": persistence.load_report(path)})
    persistence.save_report({"runs": rows}, run.path("report.json"))
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["run", "command", "metric", "value"])
    for row in rows:
        for key, value in sorted(row["metrics"].items()):
            if isinstance(value, (int, float, str)):
                writer.writerow([row["run"], row["command"], key, value])
    run.path("report.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "locality": cmd_locality,
    "plan": cmd_plan,
    "distill": cmd_distill,
    "graft": cmd_graft,
    "finetune": cmd_finetune,
    "rewire-parallel": cmd_rewire_parallel,
    "flops": cmd_flops,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graftkit", description="Operator grafting workbench for toy DiTs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--out", default=f"runs/{name}", help="run directory (default: runs/<command>)")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    add("gen-data", "write the synthetic train/val datasets")
    p = add("train-teacher", "train the teacher DiT")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p = add("locality", "band-k locality profile of every attention layer")
    p.add_argument("--checkpoint", required=True)
    p = add("plan", "choose layers to replace")
    p.add_argument("--strategy", type=str.upper)
    p.add_argument("--ratio", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--slot", choices=["mha", "mlp"])
    p.add_argument("--kind", type=str.upper)
    p.add_argument("--kernel-size", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--mlp-ratio", type=float, dest="ratio_mlp")
    p.add_argument("--k", type=int)
    p.add_argument("--locality", help="locality.json from the locality command")
    for name, help in (("distill", "Stage 1 only: distill every plan target"),
                       ("graft", "plan + distill all targets + integrate")):
        p = add(name, help)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--val-data")
        p.add_argument("--plan", help="plan.json; otherwise built from the config's plan section")
        p.add_argument("--workers", type=int)
        if name == "graft":
            p.add_argument("--init", choices=["distill", "random", "copy"], default="distill")
    p = add("finetune", "Stage 2: finetune on a data fraction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--plan")
    p.add_argument("--fraction", type=float)
    p.add_argument("--steps", type=int)
    p = add("rewire-parallel", "pair blocks into parallel branches and distill each pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-distill", action="store_true")
    p = add("flops", "FLOP / parameter deltas of a plan against a baseline")
    p.add_argument("--baseline", default="xl2")
    p.add_argument("--plan", required=True)
    p.add_argument("--convention", choices=["featurized", "wide_gates"], default="featurized")
    p = add("eval", "validation loss, blob accuracy and optional deviation from a reference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--val-data")
    p.add_argument("--reference")
    p = add("report", "collect metrics.json files from run directories")
    p.add_argument("--runs", nargs="+", required=True)
    return parser


def _overrides(args) -> dict[str, object]:
    out: dict[str, object] = {}
    for flag, key in (("strategy", "plan.strategy"), ("ratio", "plan.ratio"), ("slot", "plan.slot"),
                      ("kind", "plan.kind"), ("kernel_size", "plan.kernel_size"), ("window", "plan.window"),
                      ("ratio_mlp", "plan.ratio_mlp"), ("k", "plan.k"), ("workers", "distill.workers"),
                      ("fraction", "finetune.fraction"), ("steps", "finetune.steps")):
        if getattr(args, flag, None) is not None:
            out[key] = getattr(args, flag)
    if args.seed is not None:
        for key in ("model.seed", "data.seed", "teacher.seed", "distill.seed", "distill.capture_seed",
                    "finetune.seed", "plan.seed", "eval.seed", "locality.seed"):
            out[key] = args.seed
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        # argparse signals usage errors with 2, which is reserved for numeric failure here.
        return 1 if exit_.code == 2 else exit_.code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        torch.set_num_threads(_threads(torch.get_num_threads()))
        cfg = load_config(args.config, _overrides(args))
        COMMANDS[args.command](args, cfg)
    except ValidationError as err:
        print(f"error: {_format_validation(err)}", file=sys.stderr)
        return 1
    except (diffusion.DivergenceError, FloatingPointError, NonFiniteError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
