"""Acceptance criteria, one test per criterion.

Each test records a single pass/fail line (see the ``criterion`` fixture),
collected in the "acceptance criteria" section of the terminal summary.
The model-training criteria share one session-scoped XS teacher.
"""

import copy
import dataclasses
import time

import numpy as np
import pytest
import torch

from graftkit import tensor as T
from graftkit.analysis import BASELINES, band_locality, delta_report
from graftkit.diffusion import BlobDataset, NoiseSchedule, TrainConfig, blob_accuracy, eval_loss, sample, train
from graftkit.graft import (
    DistillConfig, RegressionObjective, capture_activations, distill_many, distill_operator, finetune, graft,
    integrate, make_plan, rewire_parallel, self_graft,
)
from graftkit.model import PROFILES, build_model, pair_merge_params, param_count, parallelize_pairs
from graftkit.operators import Kind, OperatorConfig, build_operator
from graftkit.persistence import load_checkpoint, save_activations, save_checkpoint

from helpers import inputs, randomize, run_blocks

XS = PROFILES["xs"]

# Reference recipe for the training criteria. Thresholds are the stated criteria.
TEACHER = TrainConfig(steps=3000, batch=32, lr=2e-3, warmup=200, decay="cosine", seed=0)
FINETUNE = TrainConfig(steps=2000, batch=16, lr=5e-4, warmup=100, decay="cosine", seed=0)
DISTILL = DistillConfig(epochs=100, batch=64, lr=1e-3, clip=10.0, val_split=0.1, seed=0)
RECORDS = 2048
ACC_SAMPLES = 128


def accuracy(model, seed=0):
    classes = torch.arange(ACC_SAMPLES) % model.config.num_classes
    images = sample(model, NoiseSchedule(), "ddim", 50, 1.5, classes, seed=seed)
    return blob_accuracy(images, classes)


@pytest.fixture(scope="session")
def reference():
    return {"schedule": NoiseSchedule(), "data": BlobDataset(8192, seed=0), "val": BlobDataset(1024, seed=1)}


@pytest.fixture(scope="session")
def teacher(reference):
    start = time.perf_counter()
    model, losses = train(build_model(XS), reference["schedule"], reference["data"], TEACHER)
    model.eval()
    return {
        "model": model,
        "losses": losses,
        "seconds": time.perf_counter() - start,
        "val": eval_loss(model, reference["schedule"], reference["val"]),
        "accuracy": accuracy(model),
    }


def pipeline(teacher_model, plan, reference, objective=None, fraction=0.1):
    """Stage 1 (distill every target) followed by Stage 2 (finetune on a data fraction)."""
    outcome = graft(teacher_model, plan, reference["data"], reference["schedule"], records=RECORDS, cfg=DISTILL,
                    objective=objective)
    tuned, _ = finetune(outcome.model, reference["data"], reference["schedule"], fraction, FINETUNE)
    return tuned.eval()


# -- cost side --------------------------------------------------------------------

XL2_DELTAS = {
    # kind: {ratio: (op, ft, param)}; None marks a cell the criterion does not cover.
    "HYENA_SE": {0.5: (-49.52, 0.13, 0.22), 0.75: (-74.27, 0.20, None), 1.0: (-99.03, 0.26, None)},
    "HYENA_X": {0.5: (-49.90, 0.13, 0.16), 0.75: (-74.85, 0.20, None), 1.0: (-99.81, 0.26, None)},
    "HYENA_Y": {0.5: (-49.52, 0.00, 0.05), 0.75: (-74.27, 0.00, None), 1.0: (-99.03, 0.00, None)},
    "SWA": {0.5: (-48.24, 0.00, None), 0.75: (-72.36, 0.00, None), 1.0: (-96.48, 0.00, None)},
}
MLP_ROWS = {3.0: {0.5: -12.5, 0.75: -18.75, 1.0: -25.0}, 6.0: {0.5: 25.0, 0.75: 37.5, 1.0: 50.0}}


def _plan(replacement, ratio, slot):
    return make_plan("FULL" if ratio == 1.0 else "INTERLEAVED", ratio, 28, slot, replacement)


def test_criterion_1_xl2_cost_reproduction(criterion):
    start = time.perf_counter()
    base = BASELINES["xl2"]
    misses, checked = [], 0
    for kind, rows in XL2_DELTAS.items():
        cfg = OperatorConfig(Kind(kind), 1152, heads=16, kernel_size=4, window=4)
        for ratio, expected in rows.items():
            got = delta_report(base, _plan(cfg, ratio, "mha")).deltas["mha"]
            for key, want in zip(("flops_op", "flops_ft", "params"), expected):
                if want is None:
                    continue
                checked += 1
                if abs(got[key] - want) > 0.01:
                    misses.append(f"{kind}@{ratio} {key} {got[key]:.4f} vs {want}")
    for r, rows in MLP_ROWS.items():
        cfg = OperatorConfig(Kind.MLP, 1152, ratio=r)
        for ratio, want in rows.items():
            got = delta_report(base, _plan(cfg, ratio, "mlp")).deltas["mlp"]
            for key, target in (("params", want), ("flops_op", want), ("flops_ft", 0.0)):
                checked += 1
                if abs(got[key] - target) > 0.01:
                    misses.append(f"MLP r={r}@{ratio} {key} {got[key]:.4f} vs {target}")
    seconds = time.perf_counter() - start
    passed = not misses and seconds < 1.0
    criterion(1, "XL/2 cost deltas within 0.01 pp", passed,
              f"{checked - len(misses)}/{checked} cells match; {seconds:.2f}s; misses={misses}")
    assert passed


def test_criterion_2_band_locality_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, monotone, full_band = 0.0, True, True
    for _ in range(200):
        A = rng.random((16, 16))
        k = int(rng.integers(0, 16))
        brute = sum(A[i, j] for i in range(16) for j in range(16) if abs(i - j) <= k) / 16
        worst = max(worst, abs(band_locality(A, k) - brute))
        P = A / A.sum(1, keepdims=True)
        curve = [band_locality(P, kk) for kk in range(16)]
        monotone &= all(b >= a for a, b in zip(curve, curve[1:]))
        full_band &= abs(curve[-1] - 1.0) <= 1e-12
    seconds = time.perf_counter() - start
    passed = worst <= 1e-9 and monotone and full_band and seconds < 1.0
    criterion(2, "band-k locality oracle", passed,
              f"max |diff| {worst:.1e}; monotone={monotone}; L_(N-1)=1: {full_band}; {seconds:.2f}s")
    assert passed


def test_criterion_3_gradient_integrity(criterion):
    start = time.perf_counter()
    failures, checks = [], 0
    with T.precision("float64"):
        for kind in Kind:
            for shape in ((1, 3, 4), (2, 5, 8), (3, 4, 12)):
                b, n, d = shape
                m = build_operator(OperatorConfig(kind, d, heads=2, ratio=2, window=1, kernel_size=3, seed=n)).double()
                g = torch.Generator().manual_seed(d)
                x = torch.randn(shape, generator=g, dtype=torch.float64)
                w = torch.randn(shape, generator=g, dtype=torch.float64)
                targets = [("input", lambda v: (m(v) * w).sum(), x)]
                for name, p in m.named_parameters():
                    targets.append((name, lambda v, name=name: (torch.func.functional_call(m, {name: v}, (x,)) * w).sum(),
                                    p.detach().clone()))
                for name, f, at in targets:
                    ok, err = T.grad_check(f, at, h=1e-5, tol=1e-4)
                    checks += 1
                    if not ok:
                        failures.append(f"{kind.value}{shape}:{name} {err:.1e}")
        for batch in (1, 2, 3):
            m = randomize(build_model(XS).double(), seed=batch)
            z, t, c = inputs(m.config, batch, seed=batch, dtype=torch.float64)
            # A random projection keeps gradients well above finite-difference roundoff.
            w = torch.randn(z.shape, generator=torch.Generator().manual_seed(100 + batch), dtype=torch.float64)
            ok, err = T.grad_check(lambda v: (m(v, t, c) * w).sum(), z, max_coords=32, seed=batch)
            checks += 1
            if not ok:
                failures.append(f"XS batch {batch}: input {err:.1e}")
            for name, p in m.named_parameters():
                ok, err = T.grad_check(
                    lambda v, name=name: (torch.func.functional_call(m, {name: v}, (z, t, c)) * w).sum(),
                    p.detach().clone(), max_coords=4, seed=batch)
                checks += 1
                if not ok:
                    failures.append(f"XS batch {batch}: {name} {err:.1e}")
    seconds = time.perf_counter() - start
    passed = not failures and seconds < 120
    criterion(3, "grad_check, 64-bit, h=1e-5, rtol 1e-4", passed,
              f"{checks - len(failures)}/{checks} checks pass; {seconds:.1f}s; failures={failures[:5]}")
    assert passed


def test_criterion_4_operator_reductions(criterion):
    start = time.perf_counter()
    g = torch.Generator().manual_seed(4)
    x = torch.randn(3, 9, 8, generator=g)
    mha = build_operator(OperatorConfig(Kind.MHA, 8, heads=2, seed=1))
    swa_gap = max((build_operator(OperatorConfig(Kind.SWA, 8, heads=2, window=w, seed=1))(x) - mha(x)).abs().max().item()
                  for w in (8, 12))

    se = build_operator(OperatorConfig(Kind.HYENA_SE, 8, seed=2))
    hx = build_operator(OperatorConfig(Kind.HYENA_X, 8, seed=2))
    with torch.no_grad():
        for m in (se, hx):
            for n in m.filter_names:
                f = getattr(m, f"filter_{n}")
                f.zero_()
                f[:, 0] = 1.0
            for name in ("w_q", "w_k", "w_v", "w_o"):
                getattr(m, name).copy_(getattr(se, name))
    closed = ((x @ se.w_q) * (x @ se.w_k) * (x @ se.w_v)) @ se.w_o
    hyena_gap = max((se(x) - closed).abs().max().item(), (hx(x) - closed).abs().max().item())

    causal = True
    for kind in (Kind.HYENA_SE, Kind.HYENA_X, Kind.HYENA_Y):
        m = build_operator(OperatorConfig(kind, 8, kernel_size=3, seed=3))
        for s in range(8):
            x2 = x.clone()
            x2[:, s + 1:] = torch.randn(3, 8 - s, 8, generator=g)
            causal &= torch.equal(m(x)[:, : s + 1], m(x2)[:, : s + 1])
    seconds = time.perf_counter() - start
    passed = swa_gap <= 1e-6 and hyena_gap <= 1e-6 and causal and seconds < 10
    criterion(4, "operator reductions", passed,
              f"SWA vs MHA {swa_gap:.1e}; Hyena delta vs closed form {hyena_gap:.1e}; causal exact={causal}; "
              f"{seconds:.1f}s")
    assert passed


# -- quality side (desk scale) -------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_self_grafting_recovery(criterion, teacher, reference):
    start = time.perf_counter()
    model = teacher["model"]
    window = float(np.mean(teacher["losses"][-100:]))
    a = window < 0.25 and teacher["accuracy"] >= 0.9

    plan, fresh = self_graft(model, "mha", 1.0, "FULL", seed=0)
    random_acc = accuracy(integrate(model, plan, fresh).eval())
    b = random_acc < 0.5

    recovered = pipeline(model, plan, reference, RegressionObjective("L1"))
    val = eval_loss(recovered, reference["schedule"], reference["val"])
    acc = accuracy(recovered)
    c = val <= 1.10 * teacher["val"] and acc >= 0.85 * teacher["accuracy"]

    seconds = teacher["seconds"] + time.perf_counter() - start
    passed = a and b and c and seconds <= 30 * 60
    criterion(5, "self-grafting recovery", passed,
              f"(a) window loss {window:.4f}, accuracy {teacher['accuracy']:.3f}: {a}; "
              f"(b) random-init accuracy {random_acc:.3f}: {b}; "
              f"(c) val {val:.4f} vs teacher {teacher['val']:.4f} (ratio {val / teacher['val']:.3f}), "
              f"accuracy {acc:.3f} (ratio {acc / teacher['accuracy']:.3f}): {c}; {seconds / 60:.1f} min")
    assert passed


@pytest.mark.slow
def test_criterion_6_objective_direction(criterion, teacher, reference):
    start = time.perf_counter()
    model = teacher["model"]
    layers = [6, 7]
    held_out = {}
    for slot in ("mha", "mlp"):
        acts = capture_activations(model, reference["data"], layers, slot, RECORDS, seed=0,
                                   schedule=reference["schedule"])
        for layer in layers:
            own = model.blocks()[layer].slot(slot).config
            for kind in ("L1", "L2"):
                op = build_operator(own.replace(seed=7_000 + layer))
                _, res = distill_operator(op, acts[layer], RegressionObjective(kind), DISTILL)
                held_out[(slot, layer, kind)] = res.val_l2[-1]
    mha_ok = [l for l in layers if held_out[("mha", l, "L1")] <= held_out[("mha", l, "L2")]]
    mlp_ok = [l for l in layers if held_out[("mlp", l, "L2")] <= held_out[("mlp", l, "L1")]]
    seconds = time.perf_counter() - start
    passed = bool(mha_ok) and bool(mlp_ok) and seconds < 600
    detail = "; ".join(f"{s}{l}: L1 {held_out[(s, l, 'L1')]:.3e} L2 {held_out[(s, l, 'L2')]:.3e}"
                       for s in ("mha", "mlp") for l in layers)
    criterion(6, "objective choice direction (held-out L2)", passed,
              f"L1<=L2 on mha layers {mha_ok}; L2<=L1 on mlp layers {mlp_ok}; {detail}; {seconds / 60:.1f} min")
    assert passed


@pytest.mark.slow
def test_criterion_7_depth_to_width(criterion, teacher, reference):
    start = time.perf_counter()
    xl = PROFILES["xl2"]
    counts = (parallelize_pairs(build_model(XS)).effective_depth == 4 and xl.depth // 2 == 14
              and round(14 * pair_merge_params(xl.dim) / 1e6, 1) == 37.2
              and round((param_count(xl) + 14 * pair_merge_params(xl.dim)) / 1e6) == 712)

    with T.precision("float64"):
        tiny = dataclasses.replace(XS, depth=4, dim=16, heads=2, image_size=8, num_classes=4, freq_dim=16)
        base = randomize(build_model(tiny).double(), scale=0.3)
        z, t, c = inputs(tiny, 2, dtype=torch.float64)

        def gap(s):
            m = copy.deepcopy(base)
            with torch.no_grad():
                for blk in m.blocks():
                    for chunk in (2, 5):
                        blk.ada_w[:, chunk * 16:(chunk + 1) * 16] *= s
                        blk.ada_b[chunk * 16:(chunk + 1) * 16] *= s
            _, h_seq = run_blocks(m, z, t, c)
            _, h_par = run_blocks(parallelize_pairs(m), z, t, c)
            return (h_seq - h_par).abs().max().item()

        errs = [gap(s) for s in (0.04, 0.02, 0.01)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    first_order = min(ratios) >= 3.5

    model = teacher["model"]
    outcome = rewire_parallel(model, reference["data"], reference["schedule"], records=RECORDS, cfg=DISTILL)
    tuned, _ = finetune(outcome.model, reference["data"], reference["schedule"], 0.25, FINETUNE)
    val = eval_loss(tuned, reference["schedule"], reference["val"])
    recovered = val <= 1.15 * teacher["val"]
    seconds = time.perf_counter() - start
    passed = counts and first_order and recovered and seconds <= 30 * 60
    criterion(7, "depth to width restructuring", passed,
              f"counts={counts}; first-order error ratios {ratios[0]:.2f}, {ratios[1]:.2f}; "
              f"val {val:.4f} vs teacher {teacher['val']:.4f} (ratio {val / teacher['val']:.3f}); "
              f"{seconds / 60:.1f} min")
    assert passed


@pytest.mark.slow
def test_criterion_8_interleaved_vs_deep(criterion, teacher, reference):
    hyena = OperatorConfig(Kind.HYENA_X, XS.dim, kernel_size=4, seed=0)
    vals = {}
    for strategy in ("INTERLEAVED", "DEEP"):
        plan = make_plan(strategy, 0.5, XS.depth, "mha", hyena)
        vals[strategy] = eval_loss(pipeline(teacher["model"], plan, reference), reference["schedule"],
                                   reference["val"])
    passed = vals["INTERLEAVED"] <= vals["DEEP"]
    criterion(8, "interleaved vs deep (expected direction, single seed)", passed,
              f"interleaved val {vals['INTERLEAVED']:.4f}; deep val {vals['DEEP']:.4f}", soft=True)
    if not passed:
        pytest.xfail("soft criterion: interleaved plan did not beat DEEP at the reference seed")


def test_criterion_9_determinism_and_persistence(criterion, tmp_path):
    start = time.perf_counter()
    s = NoiseSchedule()
    data = BlobDataset(256, seed=0)
    cfg = TrainConfig(steps=5, batch=16, lr=1e-3, warmup=0)
    runs = [train(build_model(XS), s, data, cfg) for _ in range(2)]
    traces = np.array(runs[0][1]).tobytes() == np.array(runs[1][1]).tobytes()

    classes = torch.arange(8)
    samples = (sample(runs[0][0], s, "ddpm", 10, 1.5, classes, seed=3).numpy().tobytes()
               == sample(runs[1][0], s, "ddpm", 10, 1.5, classes, seed=3).numpy().tobytes())

    for i, (m, _) in enumerate(runs):
        save_checkpoint(m, tmp_path / f"m{i}.grft")
        save_activations(capture_activations(m, data, 2, "mha", 64, seed=1, schedule=s), tmp_path / f"a{i}.grft")
    artifacts = all((tmp_path / f"{p}0.grft").read_bytes() == (tmp_path / f"{p}1.grft").read_bytes() for p in "ma")

    loaded = load_checkpoint(tmp_path / "m0.grft")
    z, t, c = inputs(XS, 4, seed=5)
    with torch.no_grad():
        roundtrip = torch.equal(loaded(z, t, c), runs[0][0].eval()(z, t, c))

    acts = capture_activations(runs[0][0], data, [1, 3, 5], "mha", 128, seed=2, schedule=s)
    small = dataclasses.replace(DISTILL, epochs=3)

    def jobs():
        return [(build_operator(OperatorConfig(Kind.HYENA_X, 64, seed=l)), acts[l], None,
                 dataclasses.replace(small, seed=l)) for l in (1, 3, 5)]

    seq, par = distill_many(jobs(), workers=1), distill_many(jobs(), workers=3)
    degree = all(ra == rb and all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
                 for (a, ra), (b, rb) in zip(seq, par))
    seconds = time.perf_counter() - start
    passed = traces and samples and artifacts and roundtrip and degree and seconds < 300
    criterion(9, "determinism and persistence", passed,
              f"traces={traces}; samples={samples}; artifacts={artifacts}; checkpoint round trip={roundtrip}; "
              f"parallel-degree independence={degree}; {seconds:.1f}s")
    assert passed
