"""Acceptance criteria 1-9, each checked at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in the pytest
terminal summary under "acceptance criteria".
"""

import math
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from adasp.bench import make_sequence, paired_decode_speedup
from adasp.kernels import make_rng
from adasp.metrics import kv_bytes, layer_flops, max_batch, reduction_rate, rtf
from adasp.policies import build_merge_plan, weighted_merge
from adasp.runtime import ModelConfig, ModelWeights, RunTimings
from adasp.schedule import (
    layer_entropy,
    make_constant_schedule,
    make_decay_schedule,
    select_layer,
    transfer_entropy,
)

import oracles

TESTS = Path(__file__).parent


def test_criterion_1_merge_matches_cluster_oracle(acceptance_log):
    rng = make_rng(101)
    worst, singleton_bad, n = 0.0, 0, 1200
    t0 = time.perf_counter()
    for _ in range(n):
        L = int(rng.integers(2, 33))
        D = int(rng.integers(1, 9))
        k = int(rng.integers(0, L))
        audio = rng.standard_normal((L, D))
        # coarse rounding makes score ties common
        p = np.round(rng.uniform(-1, 1, L - 1), 1)
        omega = rng.uniform(0.01, 5.0, L)
        plan = build_merge_plan(p, k)
        got = weighted_merge(audio, plan, omega)
        want = oracles.brute_force_merge(audio, oracles.topk_lower_index(list(p), k), omega)
        worst = max(worst, float(np.abs(got.hidden - want).max()))
        for row, tag in zip(got.hidden, got.kept_positions):
            if len(tag) == 1 and not np.array_equal(row, audio[tag[0]]):
                singleton_bad += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and singleton_bad == 0 and elapsed < 10
    acceptance_log(1, "merge-oracle equivalence", ok,
                   f"{n} instances, max err {worst:.1e}, singleton mismatches {singleton_bad}, {elapsed:.2f}s")
    assert ok


def test_criterion_2_cluster_formation(acceptance_log):
    plan = build_merge_plan([0.9, 0.8, 0.1, 0.95, 0.2], 3)
    example_ok = plan.clusters == [(0, 1, 2), (3, 4)]
    rng = make_rng(202)
    bad = 0
    for _ in range(1500):
        m = int(rng.integers(1, 40))
        p = np.round(rng.uniform(-1, 1, m), int(rng.integers(0, 3)))
        k = int(rng.integers(0, m + 1))
        plan = build_merge_plan(p, k)
        conserved = sum(len(c) - 1 for c in plan.clusters) == k
        same = plan.clusters == oracles.clusters_by_union_find(oracles.topk_lower_index(list(p), k), m + 1)
        bad += not (conserved and same)
    ok = example_ok and bad == 0
    acceptance_log(2, "cluster formation", ok, f"worked example {'ok' if example_ok else 'WRONG'}, 1500 random P, {bad} bad")
    assert ok


def test_criterion_3_flops_closed_form(acceptance_log):
    rng = make_rng(303)
    worst, non_monotone = 0.0, 0
    for _ in range(2000):
        k = float(rng.uniform(0, 1))
        n = int(rng.integers(1, 8192))
        d = int(rng.integers(1, 1024))
        m = int(rng.integers(1, 8192))
        direct = 1 - layer_flops(n * (1 - k), d, m) / layer_flops(n, d, m)
        worst = max(worst, abs(reduction_rate(k, n, d, m) - direct))
        if 0 < k < 1:
            # forward difference in n, integer and fractional step
            non_monotone += not reduction_rate(k, n + 1, d, m) > reduction_rate(k, n, d, m)
            non_monotone += not reduction_rate(k, n * 1.001, d, m) > reduction_rate(k, n, d, m)
    ok = worst <= 1e-12 and non_monotone == 0
    acceptance_log(3, "FLOPs closed form", ok, f"max |closed - direct| {worst:.1e}, dRate/dn <= 0 at {non_monotone} points")
    assert ok


@pytest.mark.slow
def test_criterion_4_speedup_grows_with_length(acceptance_log):
    weights = ModelWeights.init(ModelConfig(), seed=0)
    results = {}
    for audio_len in (1024, 2048):
        seq = make_sequence(weights, seed=0, audio_len=audio_len, text_len=32)
        results[audio_len] = paired_decode_speedup(weights, seq, k_tokens=audio_len // 2, layer=0,
                                                   steps=256, repeats=5)
    s1, s2 = results[1024].speedup, results[2048].speedup
    ok = s2 > s1 and s2 >= 1.2
    acceptance_log(4, "length-scaling direction", ok,
                   f"speedup 1024: {s1:.3f}x ({results[1024].baseline_tps:.1f} -> {results[1024].reduced_tps:.1f} tok/s), "
                   f"2048: {s2:.3f}x ({results[2048].baseline_tps:.1f} -> {results[2048].reduced_tps:.1f} tok/s)")
    assert ok


def test_criterion_5_kv_capacity(acceptance_log):
    cfg = ModelConfig(num_layers=32, hidden_dim=256, ffn_dim=1024, num_heads=8)
    n = 2048
    baseline = kv_bytes(cfg, [n] * cfg.num_layers)
    budget = 10 * baseline  # ten full-length sequences fit
    ratios = {}
    for op in range(cfg.num_layers // 4):
        lengths = [n] * (op + 1) + [n // 2] * (cfg.num_layers - op - 1)
        ratios[op] = Fraction(max_batch(budget, kv_bytes(cfg, lengths)), max_batch(budget, baseline))
    ok = ratios[0] >= Fraction(19, 10)
    shown = ", ".join(f"L{op}={float(r):.2f}" for op, r in ratios.items())
    acceptance_log(5, "KV-capacity analogue", ok, f"batch 10 -> {int(ratios[0] * 10)} at operation layer 0; {shown}")
    assert ok


def test_criterion_6_entropy_and_te(acceptance_log, six_layer_weights):
    w = six_layer_weights
    last = w.config.num_layers - 1
    rng = make_rng(606)
    seq = oracles.random_sequence(rng, w.config.hidden_dim, 10, 3)
    zero_k = all(transfer_entropy(w, seq, layer, 0) == 0.0 for layer in range(last + 1))
    zero_last = transfer_entropy(w, seq, last, 4) == 0.0

    perm_err = 0.0
    for _ in range(200):
        f = rng.standard_normal((int(rng.integers(1, 30)), int(rng.integers(2, 20))))
        perm_err = max(perm_err, abs(layer_entropy(f) - layer_entropy(f[rng.permutation(f.shape[0])])))

    seqs = [make_sequence(w, s, 12, 3) for s in (1, 2)]
    picks = {(sel, tuple(rep.te.items())) for sel, rep in (select_layer(w, seqs, None, 4) for _ in range(10))}

    candidates = [1, 2, 3, 5]
    fast = {c: transfer_entropy(w, seq, c, 4) for c in candidates}
    slow = oracles.naive_transfer_entropy(w, seq.embeddings, seq.audio_len, candidates, 4)
    dual_err = max(abs(fast[c] - slow[c]) for c in candidates)

    ok = zero_k and zero_last and perm_err <= 1e-12 and len(picks) == 1 and dual_err <= 1e-9
    acceptance_log(6, "entropy/TE suite", ok,
                   f"TE(k=0)=0 {zero_k}, TE(final)=0 {zero_last}, perm err {perm_err:.1e}, "
                   f"select_layer distinct outcomes {len(picks)}, dual TE err {dual_err:.1e}")
    assert ok


def test_criterion_7_schedules(acceptance_log):
    examples = (make_decay_schedule(12, 0, 4).budgets == (6, 4, 2, 0)
                and make_constant_schedule(12, 0, 4).budgets == (3, 3, 3, 3))
    checked = bad = 0
    for layers in range(1, 17):
        for start in range(layers):
            for k in range(65):
                c = make_constant_schedule(k, start, layers)
                bad += c.total != k or any(c.budgets[:start])
                checked += 1
                if layers - start >= 2:
                    d = make_decay_schedule(k, start, layers)
                    bad += d.total != k or d.budgets[-1] != 0 or any(d.budgets[:start])
                    checked += 1
    ok = examples and bad == 0
    acceptance_log(7, "scheduler suite", ok, f"examples {'ok' if examples else 'WRONG'}, {checked} schedules, {bad} bad")
    assert ok


def test_criterion_8_runtime_invariants(acceptance_log):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(TESTS / "test_runtime.py")],
        capture_output=True, text=True, cwd=TESTS.parent,
    )
    elapsed = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and elapsed < 60
    acceptance_log(8, "runtime invariants", ok, f"{tail} (wall {elapsed:.1f}s)")
    assert ok, proc.stdout[-2000:]


def test_criterion_9_rtf_rows(acceptance_log):
    a = rtf(RunTimings(6.72, 23.55, 240.0, 1))
    b = rtf(RunTimings(6.48, 11.89, 240.0, 1))
    ok = math.isclose(a, 0.126, abs_tol=1e-3) and math.isclose(b, 0.077, abs_tol=1e-3)
    acceptance_log(9, "RTF arithmetic", ok, f"{a:.4f} (want 0.126), {b:.4f} (want 0.077)")
    assert ok
