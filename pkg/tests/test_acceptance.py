"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 6 and 7 train the full pipeline on synthetic cohorts and take roughly
twenty minutes on one CPU core.
"""
import time

import numpy as np
import pytest
import torch

from ctpa_pe.consistency import DEFAULT_RULES, PredictionSet, enforce, validate
from ctpa_pe.evaluate import roc_auc
from ctpa_pe.labels import STUDY_LABELS
from ctpa_pe.loss import LabelWeights, total_study_loss
from ctpa_pe.stage2 import AttentionParams, AttentionPooling, attention_pool
from ctpa_pe.windowing import DEFAULT_WINDOWS, apply_window

from oracles import attention_bruteforce, mann_whitney_auc, rules_satisfied, study_loss_bruteforce

SEEDS = (0, 1, 2)


def test_criterion_1_attention_oracle(criterion):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = worst_sum = 0.0
    single_ok = True
    for i in range(1000):
        n, m, r = int(rng.integers(1, 9)), int(rng.integers(2, 9)), int(rng.integers(1, 6))
        p = AttentionParams(rng.normal(0, 1, (r, m)), rng.normal(0, 2, r))
        h = rng.normal(0, 2, (n, m))
        res = attention_pool(p, h)
        a_ref, bag_ref = attention_bruteforce(p.V.tolist(), p.w.tolist(), h.tolist(), dps=30)
        worst = max(worst, np.abs(res.weights - a_ref).max(), np.abs(res.bag - bag_ref).max())
        worst_sum = max(worst_sum, abs(res.weights.sum() - 1.0))
        if n == 1:
            single_ok &= res.weights.tolist() == [1.0]
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and worst_sum <= 1e-6 and single_ok and elapsed < 10
    criterion(1, ok, f"max err {worst:.1e}, max |sum-1| {worst_sum:.1e}, n=1 exact {single_ok}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_loss_oracle(criterion):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    invariant = True
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        w = LabelWeights(dict(zip(STUDY_LABELS, rng.uniform(0, 1, 9))), float(rng.uniform(0, 1)))
        iy, ip = rng.integers(0, 2, n), rng.uniform(0, 1, n)
        sy, sp = rng.integers(0, 2, 9), rng.uniform(0, 1, 9)
        got = float(total_study_loss(iy, ip, sy, sp, w).total)
        want = study_loss_bruteforce(iy.tolist(), ip.tolist(), sy.tolist(), sp.tolist(), w.study_vector(), w.image_weight)
        worst = max(worst, abs(got - want))
        zeros = np.zeros(n, int)
        a = float(total_study_loss(zeros, ip, sy, sp, w).total)
        b = float(total_study_loss(zeros, rng.uniform(0, 1, n), sy, sp, w).total)
        invariant &= a == b
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and invariant and elapsed < 10
    criterion(2, ok, f"max err {worst:.1e}, all-negative invariance {invariant}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_gradient_check(criterion):
    torch.manual_seed(3)
    n, m, r = 3, 8, 4
    pool = AttentionPooling(m, r).double()
    image_head = torch.nn.Linear(m, 1).double()
    study_head = torch.nn.Linear(m, 9).double()
    h = torch.randn(n, m, dtype=torch.float64, requires_grad=True)
    image_y = torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64)
    study_y = torch.tensor(np.eye(9)[2] + np.eye(9)[6], dtype=torch.float64)
    weights = LabelWeights(dict(zip(STUDY_LABELS, np.linspace(0.1, 0.9, 9))), 0.5)

    def loss_fn():
        _, z = pool(h)
        ip = torch.sigmoid(image_head(h).squeeze(-1))
        sp = torch.sigmoid(study_head(z))
        return total_study_loss(image_y, ip, study_y, sp, weights).total

    params = [h, pool.V, pool.w]
    grads = torch.autograd.grad(loss_fn(), params)
    worst = 0.0
    eps = 1e-6
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                dn = loss_fn().item()
                flat[i] = old
                fd = (up - dn) / (2 * eps)
                worst = max(worst, abs(fd - gflat[i].item()) / max(abs(fd), abs(gflat[i].item()), 1e-8))
    ok = worst <= 1e-4
    criterion(3, ok, f"max relative gradient error {worst:.1e}")
    assert ok


def test_criterion_4_consistency_soundness(criterion):
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    pool = np.r_[np.linspace(0, 1, 21), 0.499, 0.501]
    labels_of = {r.id: set(r.labels) for r in DEFAULT_RULES}
    sound = idempotent = minimal = True
    for _ in range(10_000):
        k = int(rng.integers(1, 6))
        image = rng.uniform(0, 1, k) if rng.random() < 0.5 else rng.choice(pool, k)
        study = rng.uniform(0, 1, 9) if rng.random() < 0.5 else rng.choice(pool, 9)
        p = PredictionSet(image, study)
        fixed = enforce(p)
        sound &= validate(fixed).is_consistent and rules_satisfied(fixed.image_probs, fixed.as_dict())
        idempotent &= np.array_equal(enforce(fixed).study_probs, fixed.study_probs)
        touched = {STUDY_LABELS[i] for i in np.flatnonzero(fixed.study_probs != p.study_probs)}
        allowed = set().union(*(labels_of[v.rule_id] for v in validate(p).violations))
        minimal &= touched <= allowed
    elapsed = time.perf_counter() - t0
    ok = sound and idempotent and minimal and elapsed < 30
    criterion(4, ok, f"sound {sound}, idempotent {idempotent}, rule-local {minimal}, {elapsed:.1f}s")
    assert ok


def test_criterion_5_windowing(criterion):
    grid = np.arange(-1024, 3072)
    monotone = clamped = True
    for spec in DEFAULT_WINDOWS:
        v = apply_window(grid, spec)
        monotone &= bool(np.all(np.diff(v) >= 0))
        clamped &= bool(np.all((v >= 0) & (v <= 1)))
        below = grid <= spec.level - spec.width / 2
        above = grid >= spec.level + spec.width / 2
        clamped &= bool(np.all(v[below] == 0) and np.all(v[above] == 1))
    defaults = [(w.level, w.width) for w in DEFAULT_WINDOWS] == [(-600, 1500), (100, 700), (40, 400)]
    ok = monotone and clamped and defaults
    criterion(5, ok, f"monotone {monotone}, clamp {clamped}, defaults {defaults}")
    assert ok


def test_criterion_8_auc_oracle(criterion):
    rng = np.random.default_rng(808)
    worst = 0.0
    for i in range(500):
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = rng.integers(0, 5, n) / 4.0 if i % 2 else rng.uniform(0, 1, n)
        worst = max(worst, abs(roc_auc(y, s).auc - mann_whitney_auc(y.tolist(), s.tolist())))
    ok = worst <= 1e-12
    criterion(8, ok, f"max |AUC - Mann-Whitney| {worst:.1e} over 500 instances (half with ties)")
    assert ok


# --------------------------------------------------------------------------
# synthetic end-to-end experiments


@pytest.fixture(scope="module")
def benchmarks():
    from ctpa_pe.benchmark import run_benchmark

    torch.set_num_threads(1)
    return {seed: run_benchmark(seed) for seed in SEEDS}


def test_criterion_6_synthetic_end_to_end(benchmarks, criterion):
    res = benchmarks[0]
    auc = res.auc["attention"]
    lat = {k: auc[k] for k in ("leftsided", "rightsided", "central")}
    ok = (
        auc["pe_present"] >= 0.95
        and all(v is not None and v >= 0.85 for v in lat.values())
        and res.attention_ratio > 2.0
        and res.cam_hit_rate >= 0.8
        and res.seconds < 30 * 60
    )
    lat_text = ", ".join(f"{k} {v:.3f}" for k, v in lat.items())
    criterion(6, ok, f"PE AUC {auc['pe_present']:.3f}; {lat_text}; attention ratio {res.attention_ratio:.1f}; "
                     f"CAM inside>outside {res.cam_hit_rate:.1%} of {res.cam_slices} slices; {res.seconds / 60:.1f} min")
    assert ok


def test_criterion_7_ablation_direction(benchmarks, criterion):
    def mean_auc(variant, label):
        return float(np.mean([benchmarks[s].auc[variant][label] for s in SEEDS]))

    s1, mean, att = (mean_auc(v, "pe_present") for v in ("stage1_only", "mean", "attention"))
    per_seed = "; ".join(
        f"seed {s}: " + "/".join(f"{benchmarks[s].auc[v]['pe_present']:.3f}" for v in ("stage1_only", "mean", "attention"))
        for s in SEEDS
    )
    ok = s1 < mean <= att and att > mean
    criterion(7, ok, f"PE AUC averaged over seeds stage1-only {s1:.3f} < mean-pooled {mean:.3f} < attention {att:.3f} "
                     f"({per_seed})")
    assert ok
