"""Acceptance criteria, one test each, at the contracted tolerances and time budgets.

Run ``pytest tests/test_acceptance.py -v`` to get the PASS/FAIL summary block.
"""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from oracles import ads_reference, loss_reference, plan_reference, r_ver_reference, repetition_reference
from rapo.batching import TruncationConfig, ads_resample, filter_groups, truncation_monitor
from rapo.gradcheck import check_gradients
from rapo.imgseg import Dims, PlannerConfig, plan
from rapo.policy_opt import (
    ClipConfig,
    TabularSoftmaxPolicy,
    TokenBatch,
    entropy_gate,
    pg_term,
    policy_gradient,
    rapo_loss,
    vanilla_pg_term,
)
from rapo.rewards import ReflectionBounds, r_ver, reflect_reward
from rapo.sim import TrainConfig, compare_samplers, run_training
from rapo.trajectory import AnnotatedTrace, Marker, Rollout, Segment

criterion = pytest.mark.criterion


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def _detail(request, text):
    request.node.user_properties.append(("detail", text))


# 1 -------------------------------------------------------------------------

@criterion(1, "r_ver piecewise exactness")
def test_c01_r_ver_exact(request):
    rng = np.random.default_rng(1)
    worst = 0.0
    with Timer() as t:
        fixed = ReflectionBounds(2, 10)
        for v in range(16):
            worst = max(worst, abs(r_ver(v, fixed) - r_ver_reference(v, 2, 10)))
        for _ in range(5000):
            lo = int(rng.integers(0, 20))
            hi = lo + int(rng.integers(0, 20))
            b = ReflectionBounds(lo, hi, "dynamic")
            for v in range(0, hi + 3):
                worst = max(worst, abs(r_ver(v, b) - r_ver_reference(v, lo, hi)))
    _detail(request, f"max |err| {worst:.1e}, {t.elapsed:.2f}s")
    assert worst <= 1e-12
    assert t.elapsed < 1.0


# 2 -------------------------------------------------------------------------

def _random_trace(rng):
    n = int(rng.integers(0, 12))
    first = None if n == 0 or rng.random() < 0.3 else int(rng.integers(0, n))
    segs = []
    for i in range(n):
        if i == first:
            segs.append(Segment("a", Marker.FIRST_ANSWER))
        elif (first is None or i > first) and rng.random() < 0.5:
            segs.append(Segment("v", Marker.VERIFY))
        else:
            segs.append(Segment("x", Marker.NONE))
    return AnnotatedTrace(tuple(segs), first)


@criterion(2, "reflection reward range and decomposition")
def test_c02_reflect_range(request):
    rng = np.random.default_rng(2)
    lo_seen, hi_seen = 3.0, 0.0
    with Timer() as t:
        for _ in range(5000):
            lo = int(rng.integers(0, 6))
            bounds = (ReflectionBounds(2, 10) if rng.random() < 0.5
                      else ReflectionBounds(lo, lo + int(rng.integers(0, 6)), "dynamic"))
            trace = None if rng.random() < 0.05 else _random_trace(rng)
            rb = reflect_reward(trace, int(rng.integers(0, 2)), bounds)
            total = rb.r_reflect
            assert 0.0 <= total <= 3.0
            assert total == rb.r_ans + rb.r_ver + rb.r_acc
            lo_seen, hi_seen = min(lo_seen, total), max(hi_seen, total)
    _detail(request, f"observed range [{lo_seen}, {hi_seen}], {t.elapsed:.2f}s")
    assert t.elapsed < 1.0


# 3 -------------------------------------------------------------------------

class _Group:
    __slots__ = ("pass_rate",)

    def __init__(self, p):
        self.pass_rate = p


@criterion(3, "ADS resampling conformance vs brute force")
def test_c03_ads(request):
    rng = np.random.default_rng(3)
    with Timer() as t:
        for _ in range(1000):
            G = int(rng.integers(2, 17))
            n = int(rng.integers(1, 160))
            rates = (rng.integers(0, G + 1, size=n) / G).tolist()
            groups = [_Group(p) for p in rates]
            kept, _ = filter_groups(groups)
            if not kept:
                continue
            mbs = int(rng.integers(1, 65))
            batch = ads_resample(kept, mbs)
            kept_rates = [g.pass_rate for g in kept]
            target, dups = ads_reference(kept_rates, mbs)
            assert len(batch) == target == math.ceil(len(kept) / mbs) * mbs
            assert all(0 < g.pass_rate < 1 for g in batch.groups)
            assert list(batch.source) == list(range(len(kept))) + dups
    _detail(request, f"1000 batches, {t.elapsed:.2f}s")
    assert t.elapsed < 10.0


# 4 -------------------------------------------------------------------------

@criterion(4, "bounded term for non-positive advantages")
def test_c04_bounded(request):
    clip = ClipConfig()
    rng = np.random.default_rng(4)
    with Timer() as t:
        r = rng.uniform(0, 100, size=200_000)
        r[r == 0] = 100.0
        r[:3] = [1e-12, 100.0, 1 + clip.eps_high]
        adv = -rng.uniform(0, 10, size=r.size)
        adv[:2] = [-10.0, 0.0]
        term = pg_term(r, adv, clip)
        ok = np.all(np.abs(term) <= (1 + clip.eps_high) * np.abs(adv) + 1e-12)
        opt, van = pg_term(50.0, -1.0, clip), vanilla_pg_term(50.0, -1.0, clip)
    _detail(request, f"witness r=50 adv=-1: optimized {opt:.2f} vs vanilla {van:.2f}, "
                     f"{t.elapsed:.2f}s")
    assert ok
    assert abs(van) >= 10 * abs(opt)
    assert t.elapsed < 1.0


# 5 -------------------------------------------------------------------------

@criterion(5, "entropy gate count and loss vs double loop")
def test_c05_gate_and_loss(request):
    rng = np.random.default_rng(5)
    worst = 0.0
    with Timer() as t:
        rows = []
        for _ in range(1000):
            n = int(rng.integers(1, 300))
            h = np.round(rng.exponential(size=n), 1)  # coarse values force ties
            mask = entropy_gate(h)[1]
            assert int(mask.sum()) == (n + 4) // 5  # ceil(0.2 n) in integers
            rows.append((np.exp(rng.normal(scale=0.4, size=n)), h, mask))
        for i in range(0, len(rows), 8):
            chunk = rows[i:i + 8]
            adv = rng.normal(size=len(chunk))
            batch = TokenBatch([c[0] for c in chunk], adv, [c[1] for c in chunk],
                               [c[2] for c in chunk])
            ref = loss_reference([c[0].tolist() for c in chunk], adv.tolist(),
                                 [c[2].tolist() for c in chunk], 0.2, 0.28)
            worst = max(worst, abs(rapo_loss(batch) - ref))
    _detail(request, f"max |J - ref| {worst:.1e}, {t.elapsed:.2f}s")
    assert worst <= 1e-10
    assert t.elapsed < 5.0


# 6 -------------------------------------------------------------------------

@criterion(6, "analytic gradient vs central finite differences")
def test_c06_gradcheck(request):
    with Timer() as t:
        errors = check_gradients(seed=7, trials=100)
        pol = TabularSoftmaxPolicy(np.zeros((1, 3)))
        lp = float(pol.log_probs()[0, 1])
        old = lp - math.log(2.0)  # ratio 2 > 1 + eps_high
        ro = Rollout("q", (1,), "", (old,), (old,), (1.0,), states=(0,))
        saturated = policy_gradient(pol, [ro], [-1.5])
    _detail(request, f"max rel err {max(errors):.1e} over 100 policies, {t.elapsed:.1f}s")
    assert max(errors) < 1e-5
    assert np.all(saturated == 0.0)
    assert t.elapsed < 30.0


# 7 -------------------------------------------------------------------------

@criterion(7, "repetition monitor vs naive occurrence counter")
def test_c07_truncation(request):
    rng = np.random.default_rng(7)
    truncated = 0
    with Timer() as t:
        for _ in range(10_000):
            ce = int(rng.integers(1, 17))
            n = int(rng.integers(1, 6))
            thr = int(rng.integers(1, 7))
            alpha = int(rng.integers(1, 4))
            stream = rng.integers(0, alpha, size=int(rng.integers(0, 4 * ce + 1))).tolist()
            got = [(c, d.value) for c, d in truncation_monitor(stream, TruncationConfig(ce, n, thr))]
            ref = repetition_reference(stream, ce, n, thr)
            assert got == ref, (stream, ce, n, thr)
            truncated += bool(ref) and ref[-1][1] == "truncate"
    _detail(request, f"10000 streams, {truncated} truncated, {t.elapsed:.1f}s")
    assert t.elapsed < 30.0


# 8 -------------------------------------------------------------------------

@criterion(8, "grid planner vs exhaustive enumeration")
def test_c08_planner(request):
    rng = np.random.default_rng(8)
    enc = Dims(448, 448)
    with Timer() as t:
        worked = [(plan(Dims(1344, 448), enc), (3, 1, False)),
                  (plan(Dims(100, 100), enc), (1, 1, True)),
                  (plan(Dims(448, 448), enc), (1, 1, False))]
        for p, want in worked:
            assert (p.m, p.n, p.fallback) == want
        taus = [0.1, 0.25, 0.5, 0.75, 1.0]
        fallbacks = 0
        for _ in range(10_000):
            W, H = (int(x) for x in rng.integers(1, 4000, size=2))
            Wv, Hv = (int(x) for x in rng.integers(64, 1024, size=2))
            tau = taus[int(rng.integers(0, len(taus)))]
            p = plan(Dims(W, H), Dims(Wv, Hv), PlannerConfig(tau=tau))
            assert (p.m, p.n, p.fallback) == plan_reference(W, H, Wv, Hv, tau)
            fallbacks += p.fallback
    _detail(request, f"10000 inputs ({fallbacks} fallbacks), {t.elapsed:.1f}s")
    assert t.elapsed < 10.0


# 9 -------------------------------------------------------------------------

@criterion(9, "end-to-end reflection dynamics on the toy environment")
def test_c09_rirm_dynamics(request):
    cfg = TrainConfig(seed=7)
    assert cfg.env.n_prompts == 64 and cfg.steps <= 500
    with Timer() as t:
        res = run_training(cfg)
    m = res.metrics
    q = len(m) // 4
    final_acc = float(np.mean([r["accuracy"] for r in m[-10:]]))
    v_first = float(np.mean([r["mean_verify_count"] for r in m[:q]]))
    v_last = float(np.mean([r["mean_verify_count"] for r in m[-q:]]))
    tok0 = m[0]["mean_tokens_correct"]
    tok_end = float(np.mean([r["mean_tokens_correct"] for r in m[-10:]]))
    reduction = 1 - tok_end / tok0
    _detail(request, f"acc {final_acc:.3f}, verify {v_first:.2f}->{v_last:.2f}, "
                     f"tokens/correct {tok0:.2f}->{tok_end:.2f} ({reduction:.0%}), "
                     f"{t.elapsed:.0f}s")
    assert res.status == "completed" and len(m) == cfg.steps
    assert final_acc >= 0.9
    assert v_last <= v_first
    assert reduction >= 0.30
    assert t.elapsed < 300


# 10 ------------------------------------------------------------------------

MIXED = {"steps": 40, "env": {"difficulty": ["trivial", "easy", "medium", "hard"]}}


@criterion(10, "ADS needs fewer rollouts per trained group than 3x oversampling")
def test_c10_sampler_efficiency(request):
    with Timer() as t:
        report = compare_samplers(TrainConfig.from_dict(MIXED))
    ads = report["ads"]["rollouts_per_trained_group"]
    base = report["oversample"]["rollouts_per_trained_group"]
    _detail(request, f"ADS {ads:.2f} vs oversample {base:.2f} rollouts/group, {t.elapsed:.0f}s")
    assert ads < base
    assert t.elapsed < 300


# 11 ------------------------------------------------------------------------

def _run_cli(args, hashseed):
    env = {**os.environ, "PYTHONHASHSEED": str(hashseed), "RAPO_LOG_LEVEL": "error"}
    proc = subprocess.run([sys.executable, "-m", "rapo", *args], env=env, capture_output=True)
    assert proc.returncode == 0, proc.stderr.decode()
    return proc.stdout


@criterion(11, "byte-identical CLI output on repeat runs")
def test_c11_determinism(request, tmp_path):
    traj = tmp_path / "traj.jsonl"
    rows = []
    for pid, gt in (("a", "42"), ("b", "7")):
        for k, body in enumerate(("ANS:{g} VERIFY", "ANS:1", "ANS:{g}", "x VERIFY ANS:{g}")):
            text = "<think>" + body.format(g=gt) + "</think>ANS:" + (gt if k != 1 else "1")
            rows.append({"prompt_id": pid, "text": text + "<|end_of_sentence|>",
                         "tokens": [1, 2, 3], "logprob_old": [-0.1, -0.2, -0.3],
                         "entropy": [0.3, 0.2, 0.1], "finish": "stopped"})
    traj.write_text("".join(json.dumps(r) + "\n" for r in rows))
    rcfg = tmp_path / "reward.json"
    rcfg.write_text(json.dumps({"prompts": {"a": {"ground_truth": "42"},
                                            "b": {"ground_truth": "7"}}}))
    reports = tmp_path / "reports.jsonl"
    reports.write_bytes(_run_cli(["reward", "--config", str(rcfg), "--in", str(traj)], 0))
    adscfg = tmp_path / "ads.json"
    adscfg.write_text('{"mbs": 4}')
    grid = tmp_path / "grid.jsonl"
    grid.write_text("[1344, 448, 448, 448, 0.5]\n[100, 100, 448, 448, 0.5]\n"
                    "[1000, 333, 448, 448, 0.5]\n")
    sim = tmp_path / "sim.json"
    sim.write_text(json.dumps({"batch": {"gbs": 16, "mbs": 8, "G": 8}, "steps": 6}))

    commands = [
        ["reward", "--config", str(rcfg), "--in", str(traj)],
        ["ads", "--config", str(adscfg), "--in", str(reports)],
        ["plan-grid", "--in", str(grid)],
        ["train-sim", "--config", str(sim), "--seed", "3"],
        ["compare-samplers", "--config", str(sim), "--seed", "3", "--steps", "3"],
        ["check-grad", "--seed", "7", "--trials", "10"],
    ]
    with Timer() as t:
        same = [_run_cli(c, 1) == _run_cli(c, 2) for c in commands]
    _detail(request, f"{sum(same)}/{len(commands)} commands identical, {t.elapsed:.1f}s")
    assert all(same)
    assert t.elapsed < 60
