"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances are pinned here as module constants.  Run on its own with
``pytest tests/test_acceptance.py -v``; the summary lines appear in the
"acceptance criteria" section at the end of the run.
"""

import hashlib
import io
import json
import contextlib
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import central_difference, naive_forward, random_small_model

from tinydronet.analysis import (
    ActivationTrace, LayerTrace, RuntimeCalibration, compare_models, count_macs, count_params,
    dumps_trace, estimate_runtime, gamma_sweep, loads_trace, structural_sparsity,
)
from tinydronet.cli import main
from tinydronet.engine import (
    Executor, LossConfig, backward, beta_schedule, forward, hard_mine_topk, init_weights, loss,
    synth_dataset, train_toy,
)
from tinydronet.engine.data import as_arrays
from tinydronet.family import FamilyConfig, build_dronet, family
from tinydronet.graph import TensorShape
from tinydronet.memplan import bypass_overlap_report, plan_dynamic, plan_incremental
from tinydronet.serialize import dumps_model, dumps_weights, loads_weights, model_from_dict

# ---------------------------------------------------------- tolerances

C1_BASELINE_MMAC = (40.3, 41.9)
C1_TINY_MMAC = (1.45, 1.55)
C1_TINY_CONV0_MACS = 1_000_000

C2_BASELINE_KB = (314, 326)
C2_TINY_KB = (6.2, 6.6)
C2_MIN_SIZE_RATIO = 49
C2_MAC_RATIO = (26, 28.5)

C3_INCREMENTAL_BASELINE_KB = (850, 890)
C3_INCREMENTAL_TINY_KB = (103, 107)
C3_DYNAMIC_BASELINE_KB = (392, 408)
C3_DYNAMIC_TINY_KB = (79.5, 80.7)
C3_TINY_BYPASS_OVERLAP_B = 10_000

C4_SAVING_KB = (230, 320)
C4_SAVING_MMAC = (28, 40)

C5_CYCLES_PER_MAC = 0.733
C5_POWER_W = 0.034
C5_LATENCY_REL = 0.05
C5_ENERGY_REL = 0.10
C5_POINTS = {100e6: (11.3e-3, 0.38e-3), 175e6: (6.3e-3, 0.63e-3)}

C6_FORWARD_MODELS = 50
C6_FORWARD_REL = 1e-5
C6_GRAD_MODELS = 10
C6_GRAD_REL = 1e-3
C6_GRAD_ABS_FLOOR = 1e-8  # below this both gradients count as zero
C6_TOPK_VECTORS = 1000
C6_BUDGET_S = 120

C7_CAPTURE_SAMPLES = 10

C8_SAMPLES = 200
C8_IMAGE = 64
C8_EPOCHS = 100
C8_LR = 5e-2
C8_SEED = 0
C8_BUDGET_S = 300


def record(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def within(value, bounds):
    return bounds[0] <= value <= bounds[1]


def rel_close(value, target, rel):
    return abs(value - target) <= rel * abs(target)


# ------------------------------------------------------------ 1: MACs

def test_criterion_1_mac_oracle():
    base = count_macs(family(1, True))
    tiny = count_macs(family(0.125, False))
    checks = [
        within(base.total / 1e6, C1_BASELINE_MMAC),
        within(tiny.total / 1e6, C1_TINY_MMAC),
        tiny.per_layer["conv0"] == C1_TINY_CONV0_MACS,
    ]
    detail = (f"baseline {base.total / 1e6:.3f} MMAC in {C1_BASELINE_MMAC}, tiny {tiny.total / 1e6:.3f} MMAC "
              f"in {C1_TINY_MMAC}, tiny conv0 {tiny.per_layer['conv0']:,} == {C1_TINY_CONV0_MACS:,}")
    assert record(1, all(checks), detail)


# ------------------------------------------------------------ 2: size

def test_criterion_2_size_oracle():
    base, tiny = count_params(family(1, True)), count_params(family(0.125, False))
    ratios = compare_models(family(1, True), family(0.125, False))
    checks = [
        within(base.total_bytes / 1e3, C2_BASELINE_KB),
        within(tiny.total_bytes / 1e3, C2_TINY_KB),
        ratios["size_ratio"] >= C2_MIN_SIZE_RATIO,
        within(ratios["mac_ratio"], C2_MAC_RATIO),
    ]
    detail = (f"baseline {base.total_bytes / 1e3:.3f} kB in {C2_BASELINE_KB}, tiny {tiny.total_bytes / 1e3:.3f} kB "
              f"in {C2_TINY_KB}, size ratio {ratios['size_ratio']:.2f} >= {C2_MIN_SIZE_RATIO}, "
              f"mac ratio {ratios['mac_ratio']:.2f} in {C2_MAC_RATIO}")
    assert record(2, all(checks), detail)


# ------------------------------------------------------- 3: allocators

def test_criterion_3_allocator_oracles():
    base, tiny, tiny_byp = family(1, True), family(0.125, False), family(0.125, True)
    inc_b, inc_t = plan_incremental(base), plan_incremental(tiny)
    dyn_b, dyn_t = plan_dynamic(base, "streamed"), plan_dynamic(tiny, "streamed")
    overlap = bypass_overlap_report(tiny_byp)
    checks = [
        within(inc_b.peak_bytes / 1e3, C3_INCREMENTAL_BASELINE_KB),
        within(inc_t.peak_bytes / 1e3, C3_INCREMENTAL_TINY_KB),
        within(dyn_b.peak_bytes / 1e3, C3_DYNAMIC_BASELINE_KB) and dyn_b.peak_layer == "pool0",
        within(dyn_t.peak_bytes / 1e3, C3_DYNAMIC_TINY_KB) and dyn_t.peak_layer == "conv0",
        max(overlap.values()) == C3_TINY_BYPASS_OVERLAP_B,
    ]
    detail = (f"incremental {inc_b.peak_bytes:,} / {inc_t.peak_bytes:,} B, "
              f"dynamic {dyn_b.peak_bytes:,} B at {dyn_b.peak_layer} / {dyn_t.peak_bytes:,} B at {dyn_t.peak_layer}, "
              f"tiny bypass overlap {max(overlap.values()):,} B")
    assert record(3, all(checks), detail)


# --------------------------------------------------------- 4: gamma deltas

def test_criterion_4_gamma_deltas():
    rows = [r for r in gamma_sweep() if r["gamma"] < 1]
    checks, parts = [], []
    for row in rows:
        kb_saved, mmac_saved = row["scaling_saving_bytes"] / 1e3, row["scaling_saving_macs"] / 1e6
        checks.append(within(kb_saved, C4_SAVING_KB) and within(mmac_saved, C4_SAVING_MMAC))
        parts.append(f"gamma {row['gamma']}: {kb_saved:.1f} kB / {mmac_saved:.2f} MMAC")
    detail = "; ".join(parts) + f" (bounds {C4_SAVING_KB} kB, {C4_SAVING_MMAC} MMAC)"
    assert len(rows) == 3
    assert record(4, all(checks), detail)


# ------------------------------------------------------------ 5: runtime

TINY_MACS = count_macs(family(0.125, False)).total


def _estimate(clock):
    return estimate_runtime(TINY_MACS, RuntimeCalibration(C5_CYCLES_PER_MAC, clock, C5_POWER_W))


@pytest.mark.parametrize("clock", sorted(C5_POINTS))
def test_criterion_5_latency(clock):
    target = C5_POINTS[clock][0]
    est = _estimate(clock)
    ok = rel_close(est.latency_s, target, C5_LATENCY_REL)
    assert record("5 latency", ok, f"{clock / 1e6:.0f} MHz: {est.latency_s * 1e3:.3f} ms vs "
                                   f"{target * 1e3:g} ms +-{C5_LATENCY_REL:.0%} ({est.fps:.1f} fps)")


@pytest.mark.parametrize("clock", sorted(C5_POINTS))
def test_criterion_5_energy(clock):
    # energy = power * latency with the single prescribed average power
    target = C5_POINTS[clock][1]
    est = _estimate(clock)
    ok = rel_close(est.energy_j, target, C5_ENERGY_REL)
    assert record("5 energy", ok, f"{clock / 1e6:.0f} MHz: {est.energy_j * 1e3:.3f} mJ vs "
                                  f"{target * 1e3:g} mJ +-{C5_ENERGY_REL:.0%}")


# ------------------------------------------------------------- 6: engine

def _grad_rel_error(model, seed):
    rng = np.random.default_rng(seed)
    weights = {k: v.astype(np.float64) for k, v in init_weights(model, seed).items()}
    n, k, epoch, cfg = 4, 3, 60, LossConfig()
    images = rng.random((n, *model.input_shape.as_list()))
    st, ct = rng.uniform(-1, 1, n), (rng.random(n) < 0.5).astype(float)
    ref = backward(model, weights, (images, st, ct), epoch, cfg, np.float64, k=k)
    selected = ref.loss.selected_indices

    def total():
        state = Executor(model, weights, np.float64).run(images)
        return loss(state.steering, state.prob, st, ct, epoch, cfg, k=k, selected=selected).total

    worst = 0.0
    for name in sorted(weights):
        for _ in range(2):
            index = tuple(int(rng.integers(d)) for d in weights[name].shape)
            numeric = central_difference(total, weights[name], index, step=1e-6)
            analytic = float(ref.gradients[name][index])
            scale = max(abs(numeric), abs(analytic))
            if scale > C6_GRAD_ABS_FLOOR:
                worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def test_criterion_6_engine_correctness():
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    forward_worst = 0.0
    for i in range(C6_FORWARD_MODELS):
        m = random_small_model(rng, max_channels=6, max_size=14)
        w = init_weights(m, seed=i)
        img = rng.random(m.input_shape.as_list())
        out = forward(m, w, img)
        steer, prob, _ = naive_forward(m, w, img)
        for got, want in ((out["steering"], steer), (out["collision_prob"], prob)):
            forward_worst = max(forward_worst, abs(got - want) / max(abs(want), 1e-6))
    forward_ok = forward_worst <= C6_FORWARD_REL

    grad_rng = np.random.default_rng(7)
    grad_models = [random_small_model(grad_rng, max_channels=4, max_size=12) for _ in range(C6_GRAD_MODELS - 1)]
    grad_models.append(build_dronet(FamilyConfig(0.125, True, TensorShape(1, 16, 16))))
    grad_worst = max(_grad_rel_error(m, i) for i, m in enumerate(grad_models))
    grad_ok = grad_worst <= C6_GRAD_REL

    cfg = LossConfig()
    betas = [beta_schedule(e, cfg) for e in range(1, cfg.total_epochs + 1)]
    beta_ok = all(b == 0 for b in betas[:10]) and all(a <= b for a, b in zip(betas, betas[1:]))

    topk_rng = np.random.default_rng(11)
    topk_ok = True
    for _ in range(C6_TOPK_VECTORS):
        n = int(topk_rng.integers(1, 65))
        losses = np.round(topk_rng.random(n) * 10, int(topk_rng.integers(0, 3)))  # rounding forces ties
        k = int(topk_rng.integers(1, n + 1))
        picked = hard_mine_topk(losses, k)
        rest = np.setdiff1d(np.arange(n), picked)
        topk_ok &= len(np.unique(picked)) == k and set(picked.tolist()) <= set(range(n))
        if rest.size:
            topk_ok &= losses[picked].min() >= losses[rest].max()
            # among equal losses at the cut, the lowest indices win
            cut = losses[picked].min()
            topk_ok &= not np.any(rest[losses[rest] == cut] < picked[losses[picked] == cut].max())
    elapsed = time.perf_counter() - started
    ok = forward_ok and grad_ok and beta_ok and bool(topk_ok) and elapsed < C6_BUDGET_S
    detail = (f"forward worst rel {forward_worst:.2e} <= {C6_FORWARD_REL} over {C6_FORWARD_MODELS} models, "
              f"gradient worst rel {grad_worst:.2e} <= {C6_GRAD_REL} over {C6_GRAD_MODELS} models, "
              f"beta ok={beta_ok}, top-k ok={bool(topk_ok)} over {C6_TOPK_VECTORS} vectors, {elapsed:.1f} s")
    assert record(6, ok, detail)


# ----------------------------------------------------------- 7: sparsity

def _fixture_trace(counts):
    trace = ActivationTrace()
    trace.layers["x"] = LayerTrace(len(counts), 5, np.array(counts, np.uint64))
    return trace


def test_criterion_7_sparsity_exactness():
    fixtures = {0: [4, 1, 2, 3], 25: [4, 0, 2, 3], 100: [0, 0, 0, 0]}
    exact = {pct: structural_sparsity(_fixture_trace(c))["x"] for pct, c in fixtures.items()}
    fixtures_ok = all(value == Fraction(pct) for pct, value in exact.items())

    model = build_dronet(FamilyConfig(0.125, True, TensorShape(1, 48, 48)))
    weights = init_weights(model, 3)
    images = as_arrays(synth_dataset(C7_CAPTURE_SAMPLES, seed=3, image_size=48))[0]
    trace = ActivationTrace()
    for img in images:
        forward(model, weights, img, capture=True, trace=trace)
    values = Executor(model, weights).run(images).values
    post_hoc = {name: (values[name] > 0).sum(axis=(0, 2, 3)).tolist() for name in trace.layers}
    capture_ok = all(trace.layers[n].counts.tolist() == post_hoc[n] for n in post_hoc) and \
        trace.samples_seen == C7_CAPTURE_SAMPLES
    detail = (f"fixtures {', '.join(f'{p}% -> {float(v)}%' for p, v in exact.items())}; capture equals post-hoc "
              f"counts on {C7_CAPTURE_SAMPLES} samples over {len(post_hoc)} layers: {capture_ok}")
    assert record(7, fixtures_ok and capture_ok, detail)


# -------------------------------------------------------- 8: overfitting

def test_criterion_8_overfitting_direction():
    started = time.perf_counter()
    data = synth_dataset(C8_SAMPLES, seed=C8_SEED, image_size=C8_IMAGE)
    cfg = LossConfig(total_epochs=C8_EPOCHS)
    gaps = {}
    for gamma in (1, Fraction(1, 8)):
        model = build_dronet(FamilyConfig(gamma, True, TensorShape(1, C8_IMAGE, C8_IMAGE)))
        result = train_toy(model, init_weights(model, C8_SEED), data, cfg, lr=C8_LR, seed=C8_SEED)
        final = result.curves.rows[-1]
        gaps[gamma] = final["val_bce"] - final["train_bce"]
    elapsed = time.perf_counter() - started
    ok = gaps[1] >= gaps[Fraction(1, 8)] and elapsed < C8_BUDGET_S
    detail = (f"final val-train BCE gap gamma=1 {gaps[1]:.4f} >= gamma=0.125 {gaps[Fraction(1, 8)]:.4f}, "
              f"{elapsed:.0f} s < {C8_BUDGET_S} s")
    assert record(8, ok, detail)


# -------------------------------------------------------- 9: determinism

def _cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue()


def _digest_dir(path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(path.iterdir()) if p.is_file()}


def test_criterion_9_determinism(tmp_path):
    from tinydronet.serialize import save_model, save_weights

    tiny, base = family(0.125, True), family(1, True)
    save_model(tiny, tmp_path / "tiny.json")
    save_model(base, tmp_path / "base.json")
    save_weights(init_weights(tiny, 1), tmp_path / "w.tpdw")
    np.save(tmp_path / "img.npy", np.random.default_rng(1).random((1, 200, 200)).astype(np.float32))
    (tmp_path / "train.json").write_text(json.dumps({
        "gamma": 0.125, "image_size": 16, "epochs": 11, "batch_size": 8, "seed": 5,
        "dataset": {"synthetic": {"n": 16}},
    }))

    def commands(tag):
        t = str(tmp_path)
        return {
            "describe": ["describe", f"{t}/tiny.json"],
            "scale": ["scale", f"{t}/base.json", "--to", "0.25"],
            "prune": ["prune", f"{t}/tiny.json"],
            "macs": ["macs", f"{t}/base.json"],
            "size": ["size", f"{t}/tiny.json"],
            "compare": ["compare", f"{t}/base.json", f"{t}/tiny.json"],
            "memplan": ["memplan", f"{t}/tiny.json", "--headroom", "512k", "--csv", f"{t}/{tag}_plan.csv"],
            "infer": ["infer", f"{t}/tiny.json", "--weights", f"{t}/w.tpdw", "--image", f"{t}/img.npy",
                      "--capture", f"{t}/{tag}_trace.tpdt"],
            "sparsity": ["sparsity", f"{t}/a_trace.tpdt"],
            "train": ["train", f"{t}/train.json", "--out", f"{t}/{tag}_train"],
            "estimate": ["estimate", f"{t}/tiny.json", "--clock", "175e6"],
            "synth": ["synth", "--n", "6", "--image-size", "16", "--seed", "2", "--out", f"{t}/{tag}_data"],
        }

    runs = {}
    for tag in ("a", "b"):
        results = {}
        for name, argv in commands(tag).items():
            code, out = _cli(argv)
            results[name] = (code, out.replace(f"{tag}_", "X_"))
        results["files"] = (
            (tmp_path / f"{tag}_plan.csv").read_bytes(), (tmp_path / f"{tag}_trace.tpdt").read_bytes(),
            _digest_dir(tmp_path / f"{tag}_train"), _digest_dir(tmp_path / f"{tag}_data"),
            _digest_dir(tmp_path / f"{tag}_data" / "images"),
        )
        runs[tag] = results
    codes_ok = all(result[0] == 0 for name, result in runs["a"].items() if name != "files")
    cli_ok = runs["a"] == runs["b"]

    model_ok = all(model_from_dict(json.loads(dumps_model(m))) == m for m in (tiny, base))
    weights = init_weights(base, 9)
    blob = dumps_weights(weights)
    weights_ok = dumps_weights(loads_weights(blob, base)) == blob and loads_weights(blob) == weights
    trace_blob = runs["a"]["files"][1]
    trace_ok = dumps_trace(loads_trace(trace_blob)) == trace_blob
    ok = codes_ok and cli_ok and model_ok and weights_ok and trace_ok
    detail = (f"{len(commands('a'))} commands exit 0: {codes_ok}, byte-identical reruns: {cli_ok}; "
              f"round-trips model {model_ok}, weights {weights_ok}, trace {trace_ok}")
    assert record(9, ok, detail)
