"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into an "acceptance criteria" section of the
pytest terminal summary. Training-heavy criteria share module-scoped runs.
"""

import dataclasses
import math
import statistics
import time

import numpy as np
import pytest
import torch

from conftest import record, run_pipeline
from trajxfer.core import GeoPoint, MaskKind, ModelConfig, TaskInstance
from trajxfer.data import SynthRegionSpec, filter_lengths, generate_region, three_hop_resample, translate_region
from trajxfer.geo import StubProvider, haversine
from trajxfer.model import Featurizer, batch_loss, forward_instances
from trajxfer.moe import GateStats, noisy_topk_gate
from trajxfer.tasks import make_tp_input, make_tr_input, make_tte_input, metrics, pretrain_mask, tr_kept_indices
from trajxfer.train import (
    ExperimentConfig,
    TrainState,
    build_model,
    evaluate,
    evaluation_instances,
    finetune,
    mean_loss,
    predict,
    pretrain,
    train_loop,
)
from trajxfer.trie import phi, rotary_thetas, rotate, rotation_matrix

D_TEXT = 64

# small pretraining setup shared by the trainability and specialization criteria
TRAIN_CFG = dict(d=64, n_layers=2, n_heads=4, n_experts=4, top_k=2, d_text=D_TEXT, batch_size=64, lr=2e-3,
                 phi_init_std=10.0)
TRAIN_STEPS = 300
MASK_DRAWS = 2  # independent masks of every trajectory per step
PROBE_DRAWS = 4  # fixed masks per trajectory in the loss probe


def synth(seed, n_trajectories, offset=(0.0, 0.0), **kw):
    base = SynthRegionSpec().bounds
    bounds = (base[0] + offset[0], base[1] + offset[1], base[2] + offset[0], base[3] + offset[1])
    ctx, trajs = generate_region(SynthRegionSpec(seed=seed, n_trajectories=n_trajectories, bounds=bounds, **kw))
    ctx.attach_embeddings(StubProvider(D_TEXT))
    return ctx, filter_lengths([three_hop_resample(t) for t in trajs])


# ------------------------------------------------------------------------ 1

def relative_logit(q, k, xy_i, xy_j, W, head_dim):
    """q^T R(W (p_j - p_i)) k with R built from scratch in float64."""
    j = np.arange(1, head_dim // 2 + 1)
    ang = (W @ (xy_j - xy_i)) * 10000.0 ** (-2.0 * j / head_dim)
    rk = np.empty(head_dim)
    rk[0::2] = np.cos(ang) * k[0::2] - np.sin(ang) * k[1::2]
    rk[1::2] = np.sin(ang) * k[0::2] + np.cos(ang) * k[1::2]
    return float(q @ rk)


def test_criterion_01_trie_relative_identity():
    start = time.time()
    rng = np.random.default_rng(1)
    worst = {torch.float64: 0.0, torch.float32: 0.0}
    for _ in range(1000):
        dh = 2 * int(rng.integers(1, 17))
        d = dh
        e_i, e_j = rng.standard_normal(d), rng.standard_normal(d)
        Wq, Wk = rng.standard_normal((dh, d)) / math.sqrt(d), rng.standard_normal((dh, d)) / math.sqrt(d)
        W = rng.standard_normal((dh // 2, 2))
        xy_i, xy_j = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        ref = relative_logit(Wq @ e_i, Wk @ e_j, xy_i, xy_j, W, dh)
        for dt in worst:
            t = lambda a: torch.tensor(a, dtype=dt)
            th = rotary_thetas(dh, dtype=dt)
            qi = rotate(t(Wq @ e_i), phi(t(xy_i), t(W)), th)
            kj = rotate(t(Wk @ e_j), phi(t(xy_j), t(W)), th)
            worst[dt] = max(worst[dt], abs(float(qi @ kj) - ref))
    elapsed = time.time() - start
    ok = worst[torch.float64] <= 1e-8 and worst[torch.float32] <= 1e-4 and elapsed < 10
    assert record(1, ok, f"fp64 max {worst[torch.float64]:.2e} (<=1e-8), fp32 max {worst[torch.float32]:.2e} "
                         f"(<=1e-4), {elapsed:.1f}s (<10s)")


# ------------------------------------------------------------------------ 2

def test_criterion_02_rotation_isometry():
    rng = np.random.default_rng(2)
    norm_err = orth_err = 0.0
    for _ in range(500):
        m = int(rng.integers(1, 33))
        v = torch.tensor(rng.standard_normal(2 * m))
        ang = phi(torch.tensor(rng.uniform(-5, 5, 2)), torch.tensor(rng.standard_normal((m, 2)) * 10))
        th = rotary_thetas(2 * m, dtype=torch.float64)
        norm_err = max(norm_err, abs(float(rotate(v, ang, th).norm() - v.norm())))
        R = rotation_matrix(ang, th)
        orth_err = max(orth_err, float((R.T @ R - torch.eye(2 * m, dtype=torch.float64)).abs().max()))
    ok = norm_err <= 1e-6 and orth_err <= 1e-6
    assert record(2, ok, f"norm err {norm_err:.1e}, R^T R - I {orth_err:.1e} (both <=1e-6)")


# ------------------------------------------------------------------------ 3

def test_criterion_03_translation_equivariance():
    ctx, trajs = synth(5, 24, n_pois=300)
    cfg = ModelConfig(d=32, n_layers=2, n_heads=2, n_experts=4, top_k=2, d_text=D_TEXT, batch_size=16, seed=5)
    state = train_loop(TrainState.fresh(build_model(cfg), 5), Featurizer(ctx, cfg), trajs, pretrain_mask, 3)
    model = state.model.eval()
    ctx2, moved = translate_region(ctx, trajs, 0.5, 0.3)
    inst_a = [make_tr_input(t, 4) for t in trajs]
    inst_b = [make_tr_input(t, 4) for t in moved]
    fa, fb = Featurizer(ctx, cfg), Featurizer(ctx2, cfg)
    pa, pb = predict(model, fa, inst_a), predict(model, fb, inst_b)
    diff = max(abs(a - b) for x, y in zip(pa, pb) for p, q in zip(x, y) for a, b in zip(p.xy_hat, q.xy_hat))
    flipped = [
        sum(fa.ctx.neighbor_ids(p.loc, 100.0) != fb.ctx.neighbor_ids(q.loc, 100.0) for p, q in zip(t.points, u.points))
        for t, u in zip(trajs, moved)
    ]
    clean = [
        abs(a - b) for x, y, f in zip(pa, pb, flipped) if f == 0 for p, q in zip(x, y) for a, b in zip(p.xy_hat, q.xy_hat)
    ]
    ok = diff <= 1e-5
    assert record(3, ok, f"max |xy_hat shift| {diff:.2e} deg (<=1e-5); {sum(flipped)}/{sum(len(t) for t in trajs)} "
                         f"points change their 100 m neighbour set; on the {len([f for f in flipped if not f])} "
                         f"trajectories without such a change the max shift is {max(clean, default=0.0):.2e} deg")


# ------------------------------------------------------------------------ 4

def test_criterion_04_gating_invariants():
    rng = np.random.default_rng(4)
    gen = torch.Generator().manual_seed(4)
    bad_count = 0
    sum_err = softmax_err = 0.0
    deterministic = True
    for call in range(10_000):
        C = int(rng.integers(1, 9))
        k = int(rng.integers(1, C + 1))
        d = int(rng.integers(1, 9))
        u = torch.tensor(rng.standard_normal((3, d)))
        W, Wn = torch.tensor(rng.standard_normal((d, C))), torch.tensor(rng.standard_normal((d, C)))
        g = noisy_topk_gate(u, W, Wn, k, train_mode=bool(call % 2), generator=gen)
        bad_count += int(((g > 0).sum(-1) != min(k, C)).sum())
        sum_err = max(sum_err, float((g.sum(-1) - 1).abs().max()))
        if call % 2 == 0:
            deterministic &= torch.equal(g, noisy_topk_gate(u, W, Wn, k))
            full = noisy_topk_gate(u, W, Wn, C)
            softmax_err = max(softmax_err, float((full - torch.softmax(u @ W, -1)).abs().max()))
    ok = bad_count == 0 and sum_err <= 1e-7 and deterministic and softmax_err <= 1e-7
    assert record(4, ok, f"wrong support {bad_count}, sum err {sum_err:.1e}, eval bit-exact {deterministic}, "
                         f"k=C vs softmax {softmax_err:.1e}")


# ------------------------------------------------------------------------ 5

def test_criterion_05_gradient_check():
    start = time.time()
    ctx, trajs = synth(1, 20, n_pois=200)
    cfg = ModelConfig(d=8, n_heads=2, n_layers=1, n_experts=2, top_k=1, d_text=D_TEXT, n_freq=8, dtype="float64",
                      seed=1)
    model = build_model(cfg).eval()
    four = [t for t in trajs if len(t) >= 4][:2]
    rng = np.random.default_rng(5)
    inst = [pretrain_mask(type(t)(t.id, t.points[:4]), rng) for t in four]
    fz = Featurizer(ctx, cfg)
    batch = fz(inst, torch.float64)

    def loss():
        return batch_loss(model(batch), batch, cfg.spatial_loss_weight)

    model.zero_grad()
    loss().backward()
    params = [(n, p) for n, p in model.named_parameters() if p.grad is not None and torch.count_nonzero(p.grad) > 0]
    sizes = np.array([p.numel() for _, p in params], dtype=float)
    h, worst = 1e-5, 0.0
    with torch.no_grad():
        for _ in range(100):
            name, p = params[rng.choice(len(params), p=sizes / sizes.sum())]
            idx = int(rng.integers(p.numel()))
            flat = p.view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = loss().item()
            flat[idx] = orig - h
            down = loss().item()
            flat[idx] = orig
            num, ana = (up - down) / (2 * h), p.grad.view(-1)[idx].item()
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    elapsed = time.time() - start
    ok = worst <= 1e-4 and elapsed < 120
    assert record(5, ok, f"max relative error {worst:.2e} over 100 coordinates (<=1e-4), {elapsed:.1f}s (<120s)")


# ------------------------------------------------------------------------ 6

def test_criterion_06_loss_locality():
    ctx, trajs = synth(6, 10, n_pois=200)
    cfg = ModelConfig(d=16, n_heads=2, n_layers=1, n_experts=2, top_k=1, d_text=D_TEXT, n_freq=8, seed=6)
    model = build_model(cfg).eval()
    fz = Featurizer(ctx, cfg)
    rng = np.random.default_rng(6)
    inst = [pretrain_mask(t, rng) for t in trajs[:6]]
    out, batch = forward_instances(model, fz, inst)
    base = batch_loss(out, batch, cfg.spatial_loss_weight)
    perturbed = dataclasses.replace(batch, xy_target=batch.xy_target.clone(), t_target=batch.t_target.clone())
    noise = torch.randn_like(batch.xy_target) * 10
    perturbed.xy_target[~batch.xy_on] += noise[~batch.xy_on]
    perturbed.t_target[~batch.t_on] += 1e3
    again = batch_loss(out, perturbed, cfg.spatial_loss_weight)
    identical = again.item() == base.item()

    # hand-computed 3-point case: NONE, SPATIAL with 1 milli-degree error, FULL with 2 milli-degree and 3-minute errors
    from trajxfer.model import reconstruction_loss

    xy = torch.tensor([[0.5, 0.5], [1e-3, 0.0], [0.0, 2e-3]], dtype=torch.float64)
    th = torch.tensor([[9.0] * 4, [0.0] * 4, [0.0, 0.0, 0.0, 3.0]], dtype=torch.float64)
    hand = reconstruction_loss(xy, th, torch.zeros(3, 2, dtype=torch.float64), torch.tensor([False, True, True]),
                               torch.zeros(3, 4, dtype=torch.float64), torch.tensor([False, False, True]), 1e6).item()
    expected = (1.0 + 4.0 + math.sqrt(9.0 + 1e-8)) / 2
    ok = identical and abs(hand - expected) <= 1e-12
    assert record(6, ok, f"unmasked-target perturbation bit-identical {identical}; 3-point case {hand:.12f} "
                         f"vs hand {expected:.12f}")


# ------------------------------------------------------------------ 7 and 13

@pytest.fixture(scope="module")
def pretrain_runs():
    """Criterion-7 training for seeds 0..4 (7 uses 0..2, 13 uses all five)."""
    runs = {}
    for seed in range(5):
        ctx, trajs = synth(seed, 40)
        trajs = trajs[:32]
        cfg = ModelConfig(**TRAIN_CFG, seed=seed)
        model = build_model(cfg)
        fz = Featurizer(ctx, cfg)
        probe = evaluation_instances(list(trajs) * PROBE_DRAWS, pretrain_mask, 999)
        initial = mean_loss(model, fz, probe, 128)
        start = time.time()
        state = train_loop(TrainState.fresh(model, seed), fz, list(trajs) * MASK_DRAWS, pretrain_mask,
                           TRAIN_STEPS, max_steps=TRAIN_STEPS)
        elapsed = time.time() - start
        runs[seed] = dict(ctx=ctx, trajs=trajs, model=state.model, steps=state.step, elapsed=elapsed,
                          ratio=mean_loss(state.model, fz, probe, 128) / initial)
    return runs


@pytest.mark.slow
def test_criterion_07_trainability(pretrain_runs):
    runs = [pretrain_runs[s] for s in range(3)]
    ok = all(r["ratio"] <= 0.10 and r["steps"] <= 300 and r["elapsed"] <= 300 for r in runs)
    detail = ", ".join(f"seed {s}: {r['ratio']:.3f} in {r['steps']} steps/{r['elapsed']:.0f}s" for s, r in enumerate(runs))
    assert record(7, ok, f"final/initial loss (<=0.10, 300 steps, 300s): {detail}")


@pytest.mark.slow
def test_criterion_13_expert_specialization(pretrain_runs, tmp_path):
    tvs, sums_ok, parsed = [], True, True
    for seed, run in pretrain_runs.items():
        stats = GateStats.empty(run["model"].cfg.n_experts)
        visible = [TaskInstance.from_trajectory(t, [MaskKind.NONE] * len(t)) for t in run["trajs"]]
        predict(run["model"], Featurizer(run["ctx"], run["model"].cfg), visible, gates=stats)
        path = tmp_path / f"gates_{seed}.csv"
        path.write_text(stats.to_csv())
        table = GateStats.read_csv(path.read_text())
        parsed &= set(table) == {"high", "medium", "low"}
        for c, row in table.items():
            if stats.tokens(c):
                sums_ok &= abs(row.sum() - 1) <= 1e-6
        parsed &= stats.tokens("high") > 0 and stats.tokens("low") > 0
        tvs.append(stats.total_variation("high", "low"))
    med = statistics.median(tvs)
    ok = med > 0.05 and sums_ok and parsed
    assert record(13, ok, f"median high-vs-low TV {med:.3f} (>0.05) over {[round(t, 3) for t in tvs]}; "
                          f"report parses {parsed}, rows sum to 1 {sums_ok}")


# ------------------------------------------------------------------------ 8

def test_criterion_08_adapter_conformance():
    from conftest import line_traj

    N, F, T = MaskKind.NONE, MaskKind.FULL, MaskKind.TEMPORAL
    checks = []
    for n in (6, 10, 33):
        inst = make_tp_input(line_traj(n))
        checks.append(list(inst.mask.kinds) == [N] * (n - 5) + [F] * 5)
    for n in (9, 10, 17, 40):
        for rho in (4, 8, 16):
            kept = list(range(0, n, rho))
            if kept[-1] != n - 1:
                kept.append(n - 1)
            inst = make_tr_input(line_traj(n), rho)
            checks.append(tr_kept_indices(n, rho) == kept)
            checks.append([i for i, k in enumerate(inst.mask.kinds) if k is N] == kept)
            checks.append(all(k is F for i, k in enumerate(inst.mask.kinds) if i not in kept))
    inst = make_tte_input(line_traj(12, dt=30))
    checks.append(len(inst) == 2 and list(inst.mask.kinds) == [N, T])
    checks.append(inst.temporal_targets[1][3] == pytest.approx(11 * 30 / 60))
    # the invariant is enforced at construction: rebuild every instance through the validating constructor
    for i in (make_tp_input(line_traj(8)), make_tr_input(line_traj(8), 4), inst):
        checks.append(TaskInstance(i.traj_id, i.input_points, i.mask, i.target_locs, i.target_times, i.t_ref) == i)
    ok = all(checks)
    assert record(8, ok, f"{sum(checks)}/{len(checks)} TP/TR/TTE structure checks hold")


# ------------------------------------------------------------------------ 9

def test_criterion_09_task_transfer_without_retraining():
    ctx, trajs = synth(9, 30, n_pois=300)
    cfg = ExperimentConfig(model=ModelConfig(d=32, n_heads=2, n_layers=1, n_experts=4, top_k=2, d_text=D_TEXT,
                                             batch_size=16, seed=9), pretrain_epochs=2)
    model = pretrain(cfg, ctx, trajs[:20]).model
    digest = model.param_digest()
    vals, digests = {}, []
    for task in ("tp", "tr", "tte"):
        rep = evaluate(model, ctx, trajs[20:], task, tr_ratio=4)
        vals[task] = {m: v for m, v, _ in rep.rows if m in ("RMSE", "MAE", "MAPE")}
        digests.append(model.param_digest())
    finite = all(math.isfinite(v) for d in vals.values() for v in d.values())
    same = all(d == digest for d in digests)
    ok = finite and same
    summary = "; ".join(f"{t} RMSE {v['RMSE']:.1f}" for t, v in vals.items())
    assert record(9, ok, f"parameter hash unchanged across TP/TR/TTE {same}; finite metrics {finite} ({summary})")


# ----------------------------------------------------------------------- 10

TRANSFER_CFG = dict(d=64, n_layers=2, n_heads=4, n_experts=4, top_k=2, d_text=D_TEXT, batch_size=32, lr=2e-3,
                    phi_init_std=10.0)
TRANSFER_STEPS = (300, 300)  # pretraining, then TR fine-tuning, both on region A


@pytest.mark.slow
def test_criterion_10_zero_shot_region_transfer():
    margins, detail = [], []
    for seed in range(5):
        ctx_a, trajs_a = synth(seed, 120)
        ctx_b, trajs_b = synth(seed + 1000, 60, offset=(0.5, 0.3))
        cfg = ExperimentConfig(model=ModelConfig(**TRANSFER_CFG, seed=seed), pretrain_epochs=10_000,
                               finetune_epochs=10_000, max_steps=TRANSFER_STEPS[0])
        model = pretrain(cfg, ctx_a, trajs_a).model
        ft = dataclasses.replace(cfg, max_steps=TRANSFER_STEPS[1])
        finetune(ft, model, "tr", ctx_a, trajs_a)
        rep = evaluate(model, ctx_b, trajs_b, "tr", tr_ratio=4)
        model_rmse, lin_rmse = rep.value("RMSE"), rep.value("RMSE_linear")
        margins.append(lin_rmse - model_rmse)
        detail.append(f"{model_rmse:.1f}/{lin_rmse:.1f}")
    med = statistics.median(margins)
    ok = med > 0
    assert record(10, ok, f"TR rho=4 on region B, model/linear RMSE m per seed: {', '.join(detail)}; "
                          f"median margin {med:.1f} m (>0)")


# ----------------------------------------------------------------------- 11

def test_criterion_11_length_extrapolation():
    ctx, trajs = synth(11, 30, n_pois=300)
    cfg = ModelConfig(d=32, n_heads=2, n_layers=1, n_experts=4, top_k=2, d_text=D_TEXT, batch_size=16, seed=11,
                      max_len=32)
    short = filter_lengths(trajs, 5, cfg.max_len)
    state = train_loop(TrainState.fresh(build_model(cfg), 11), Featurizer(ctx, cfg), short, pretrain_mask, 2)
    _, raw = generate_region(SynthRegionSpec(seed=11, n_trajectories=30, n_pois=300))
    long = [type(t)(t.id, t.points[:96]) for t in raw if len(t) >= 96][:4]
    inst = [make_tr_input(t, 4) for t in long] + [make_tp_input(t) for t in long]
    preds = predict(state.model, Featurizer(ctx, cfg), inst)
    finite = all(math.isfinite(v) for p in preds for q in p for v in (*q.xy_hat, *q.t_hat))
    ok = len(long) > 0 and finite and all(len(p) == 96 for p in preds)
    assert record(11, ok, f"trained on n<=32 ({max(len(t) for t in short)} max), {len(inst)} length-96 instances, "
                          f"all outputs finite {finite}")


# ----------------------------------------------------------------------- 12

def test_criterion_12_metrics_oracle():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 50))
        pred, true = rng.uniform(1, 60, n), rng.uniform(1, 60, n)
        got = metrics(pred.tolist(), true.tolist(), "time")
        e = [p - t for p, t in zip(pred, true)]
        ref = {
            "RMSE": math.sqrt(math.fsum(x * x for x in e) / n),
            "MAE": math.fsum(abs(x) for x in e) / n,
            "MAPE": 100.0 * math.fsum(abs(x) / t for x, t in zip(e, true)) / n,
        }
        worst = max(worst, *(abs(got[k] - ref[k]) / abs(ref[k]) for k in ref))
    meridian = haversine(GeoPoint(0, 0), GeoPoint(0, 1))
    equator = haversine(GeoPoint(0, 0), GeoPoint(1, 0))
    quarter = haversine(GeoPoint(0, 0), GeoPoint(90, 0))
    closed = 6_371_000 * math.pi / 180
    geo_err = max(abs(meridian - closed), abs(equator - closed), abs(quarter - 90 * closed))
    ok = worst <= 1e-9 and geo_err <= 0.01
    assert record(12, ok, f"max relative metric error {worst:.1e} (<=1e-9); haversine closed-form error "
                          f"{geo_err:.1e} m (<=0.01)")


# ----------------------------------------------------------------------- 14

def test_criterion_14_pipeline_determinism(tmp_path):
    a = run_pipeline(tmp_path / "a", seed=14)
    b = run_pipeline(tmp_path / "b", seed=14)
    same = a.read_bytes() == b.read_bytes()
    gates_same = (tmp_path / "a/gates.csv").read_bytes() == (tmp_path / "b/gates.csv").read_bytes()
    ok = same and gates_same
    assert record(14, ok, f"metric reports byte-identical {same}, gate reports byte-identical {gates_same}")
