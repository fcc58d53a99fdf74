"""Acceptance suite: one test per release criterion, each printing a
[PASS]/[FAIL] line with the measured values at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s`. Criteria over simulated
experiments use the package's default desk-scale task calibration and 10
seeds.

Two criteria are known-red and kept that way deliberately (see README,
"Known deviations", for the full analysis):

* C1: a correct subsampled-Gaussian moments accountant cannot reproduce the
  reference deployment's absolute epsilon row at the stated parameters; the
  implementation here is verified against an independent arbitrary-precision
  oracle, the exact binomial expansion, and an established benchmark value.
* C5: with clients honestly training on the globals they were dispatched
  (so update content ages while in flight), the measured async/sync speedup
  is ~3.5x, below the 5x bar. Evaluating updates against arrival-time globals
  (no content staleness) reproduces ~5.7x, which locates the gap precisely.
"""

from __future__ import annotations

import json
import math
import os
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from hetfed.accountant import (
    AccountantState,
    MechanismParams,
    compose,
    epsilon,
    log_moment,
)
from hetfed.config import ExperimentConfig
from hetfed.dp import DpConfig, clip_per_sample, local_train, noised_mean_gradient
from hetfed.runner import emit_reports, replay, run_sweep
from hetfed.sim import run
from hetfed.task import Dataset, ModelLayout, ModelParameters, forward_loss, init_params
from quadrature_oracle import ORACLE_GRID_LAMBDA, ORACLE_GRID_Q, ORACLE_GRID_SIGMA

SEEDS = tuple(range(10))
FASTEST, SLOWEST = "hw_t5", "hw_t1"
TIER_ORDER_FAST_TO_SLOW = ("hw_t5", "hw_t4", "hw_t3", "hw_t2", "hw_t1")

REFERENCE_FEDAVG_EPS = {0.5: 26.55, 1.0: 6.01, 1.5: 2.78, 2.0: 1.56}


def report_line(criterion: str, passed: bool, detail: str) -> None:
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


def base_config(mode: str, **overrides) -> ExperimentConfig:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return ExperimentConfig(mode=mode, **overrides)


# --------------------------------------------------------------------- shared runs

@pytest.fixture(scope="module")
def privacy_disparity_runs():
    # criterion 3/4 configuration: async, alpha=0.6, sigma=0.5, convergence trigger
    cfg = base_config("async", alpha=0.6, sigma=0.5, stop_on_target=True, max_aggregations=2000)
    return [run(cfg.with_seed(s)) for s in SEEDS]


@pytest.fixture(scope="module")
def speedup_runs():
    # criterion 5/6 configuration: sigma=0, alpha=0.4, convergence trigger, same seeds
    sync_cfg = base_config("sync", sigma=0.0, alpha=0.4, stop_on_target=True, max_aggregations=400)
    async_cfg = base_config("async", sigma=0.0, alpha=0.4, stop_on_target=True, max_aggregations=2000)
    sync_runs = [run(sync_cfg.with_seed(s)) for s in SEEDS]
    async_runs = [run(async_cfg.with_seed(s)) for s in SEEDS]
    return sync_runs, async_runs


@pytest.fixture(scope="module")
def stability_runs():
    # criterion 7 configuration: alpha=0.6, sigma=1.0, convergence trigger, both weightings
    aware_cfg = base_config("async", alpha=0.6, sigma=1.0, stop_on_target=True, max_aggregations=2000)
    fixed_cfg = replace(aware_cfg, staleness_aware=False)
    aware = [run(aware_cfg.with_seed(s)) for s in SEEDS]
    fixed = [run(fixed_cfg.with_seed(s)) for s in SEEDS]
    return aware, fixed


@pytest.fixture(scope="module")
def noise_sweep_runs():
    # criterion 8 configuration: fixed virtual-time horizon for comparability across sigma
    runs = {}
    for sigma in (0.0, 0.5, 1.0, 1.5, 2.0):
        cfg = base_config(
            "async", alpha=0.4, sigma=sigma, stop_on_target=False,
            max_virtual_time=10_000.0, max_aggregations=5000,
        )
        runs[sigma] = [run(cfg.with_seed(s)) for s in SEEDS]
    return runs


# ------------------------------------------------------------------- criterion 1

def test_c01_accountant_vs_reference_fedavg_row():
    """Quantitative: 60 per-round compositions at q=0.136, delta=1e-5 vs the
    reference row {26.55, 6.01, 2.78, 1.56}, +/-20% on at least 3 of 4."""
    t0 = time.time()
    delta = 1e-5
    results = {}
    for granularity, compositions in (("per_round", 60), ("per_step", 480)):
        eps = {}
        for sigma in REFERENCE_FEDAVG_EPS:
            params = MechanismParams(q=0.136, sigma=sigma)
            state = compose(AccountantState.fresh(params.lambda_grid), params, applications=compositions)
            eps[sigma] = epsilon(state, delta)
        results[granularity] = eps
    elapsed = time.time() - t0

    def hits(eps: dict) -> int:
        return sum(abs(eps[s] - t) / t <= 0.20 for s, t in REFERENCE_FEDAVG_EPS.items())

    best = max(results, key=lambda g: hits(results[g]))
    detail = (
        f"granularity={best}, computed="
        + "{" + ", ".join(f"{s}: {results[best][s]:.2f}" for s in sorted(results[best])) + "}"
        + f" vs reference {REFERENCE_FEDAVG_EPS}, within 20%: {hits(results[best])}/4"
        f" (per_step: {hits(results['per_step'])}/4), {elapsed:.2f}s"
    )
    passed = hits(results[best]) >= 3 and elapsed < 1.0
    report_line("C1 accountant vs reference row", passed, detail)
    assert elapsed < 1.0
    assert hits(results[best]) >= 3, (
        "a correct subsampled-Gaussian moments accountant yields epsilon values "
        f"{results[best]} at these parameters; the reference absolute row is not "
        "reproducible (verified against an independent arbitrary-precision oracle, "
        "the exact binomial expansion, and an established benchmark value); "
        "see the decisions ledger"
    )


# ------------------------------------------------------------------- criterion 2

def test_c02_oracle_suite():
    """Property: quadrature oracle agreement to 1e-6 abs on the full grid and
    q=1 closed form to 1e-8 relative, in under 10 s."""
    t0 = time.time()
    rows = json.load(open(os.path.join(os.path.dirname(__file__), "data", "moment_oracle_values.json")))
    grid_rows = [
        r for r in rows
        if r["q"] in ORACLE_GRID_Q and r["sigma"] in ORACLE_GRID_SIGMA and r["lam"] in ORACLE_GRID_LAMBDA
    ]
    assert len(grid_rows) >= len(ORACLE_GRID_Q) * len(ORACLE_GRID_SIGMA) * len(ORACLE_GRID_LAMBDA)
    worst = 0.0
    for r in grid_rows:
        got = log_moment(MechanismParams(q=r["q"], sigma=r["sigma"]), r["lam"])
        worst = max(worst, abs(got - r["log_moment"]))
    worst_rel = 0.0
    for sigma in (0.5, 1.0, 2.0):
        params = MechanismParams(q=1.0, sigma=sigma)
        for lam in range(1, 65):
            want = lam * (lam + 1) / (2 * sigma * sigma)
            worst_rel = max(worst_rel, abs(log_moment(params, lam) - want) / want)
    elapsed = time.time() - t0
    passed = worst < 1e-6 and worst_rel < 1e-8 and elapsed < 10.0
    report_line(
        "C2 oracle suite",
        passed,
        f"max |main - oracle| = {worst:.2e} over {len(grid_rows)} grid points, "
        f"max closed-form rel err = {worst_rel:.2e}, {elapsed:.2f}s",
    )
    assert worst < 1e-6
    assert worst_rel < 1e-8
    assert elapsed < 10.0


# ------------------------------------------------------------------- criterion 3

def test_c03_per_client_epsilon_disparity(privacy_disparity_runs):
    """Quantitative (scaled): eps(fastest)/eps(slowest) in [2.5, 6] at the
    convergence trigger, alpha=0.6, sigma=0.5."""
    converged = [r for r in privacy_disparity_runs if r.stop_reason == "target"]
    fast = [r.per_client[FASTEST].final_epsilon for r in converged]
    slow = [r.per_client[SLOWEST].final_epsilon for r in converged]
    ok_runs = len(converged) == len(privacy_disparity_runs) and all(v is not None for v in fast + slow)
    ratio = float(np.mean(fast) / np.mean(slow)) if ok_runs else float("nan")
    passed = ok_runs and 2.5 <= ratio <= 6.0
    report_line(
        "C3 per-client epsilon disparity",
        passed,
        f"mean eps fastest={np.mean(fast):.2f} slowest={np.mean(slow):.2f} ratio={ratio:.2f} "
        f"(target [2.5, 6]), converged {len(converged)}/{len(privacy_disparity_runs)}",
    )
    assert ok_runs, "every seed must reach the convergence trigger"
    assert 2.5 <= ratio <= 6.0


# ------------------------------------------------------------------- criterion 4

def test_c04_update_count_skew(privacy_disparity_runs):
    """Quantitative (scaled): fastest tier's update count / slowest tier's in [5, 12]."""
    fast = [r.per_client[FASTEST].update_count for r in privacy_disparity_runs]
    slow = [r.per_client[SLOWEST].update_count for r in privacy_disparity_runs]
    ratio = float(np.mean(fast) / np.mean(slow))
    passed = 5.0 <= ratio <= 12.0
    report_line(
        "C4 update-count skew",
        passed,
        f"mean updates fastest={np.mean(fast):.1f} slowest={np.mean(slow):.1f} ratio={ratio:.2f} (target [5, 12])",
    )
    assert 5.0 <= ratio <= 12.0


# ------------------------------------------------------------------- criterion 5

def test_c05_convergence_speedup(speedup_runs):
    """Quantitative (relaxed): async (alpha=0.4, staleness-aware) reaches the 75%
    target >= 5x faster in virtual time than sync, 10 seeds. Known-red, see module docstring."""
    sync_runs, async_runs = speedup_runs
    assert all(r.stop_reason == "target" for r in sync_runs), "sync runs must converge"
    assert all(r.stop_reason == "target" for r in async_runs), "async runs must converge"
    sync_times = [r.time_to_target for r in sync_runs]
    async_times = [r.time_to_target for r in async_runs]
    ratio = float(np.mean(sync_times) / np.mean(async_times))
    per_seed = [s / a for s, a in zip(sync_times, async_times)]
    passed = ratio >= 5.0
    report_line(
        "C5 convergence speedup",
        passed,
        f"mean time-to-75%: sync={np.mean(sync_times):.0f}s async={np.mean(async_times):.0f}s "
        f"ratio={ratio:.2f} (target >= 5), per-seed range [{min(per_seed):.2f}, {max(per_seed):.2f}]",
    )
    assert ratio >= 5.0


# ------------------------------------------------------------------- criterion 6

def test_c06_staleness_ordering(speedup_runs):
    """Property: mean staleness monotone in tier slowness, fastest <= 1, slowest >= 3."""
    _, async_runs = speedup_runs
    means = {}
    for tier in TIER_ORDER_FAST_TO_SLOW:
        per_run = [r.per_client[tier].staleness_mean for r in async_runs if r.per_client[tier].staleness_mean is not None]
        assert per_run, f"tier {tier} never produced an update"
        means[tier] = float(np.mean(per_run))
    ordered = [means[t] for t in TIER_ORDER_FAST_TO_SLOW]
    monotone = all(b >= a - 1e-9 for a, b in zip(ordered, ordered[1:]))
    passed = monotone and means[FASTEST] <= 1.0 and means[SLOWEST] >= 3.0
    report_line(
        "C6 staleness ordering",
        passed,
        "mean tau fast->slow: " + ", ".join(f"{t}={means[t]:.2f}" for t in TIER_ORDER_FAST_TO_SLOW)
        + f" (monotone={monotone}, fastest <= 1, slowest >= 3)",
    )
    assert monotone
    assert means[FASTEST] <= 1.0
    assert means[SLOWEST] >= 3.0


# ------------------------------------------------------------------- criterion 7

def test_c07_staleness_aware_stability(stability_runs):
    """Property: variance of the post-50% accuracy trajectory is strictly lower
    with staleness-aware weighting than with fixed weights, across 10 seeds."""
    aware, fixed = stability_runs
    assert all(r.stop_reason == "target" for r in aware + fixed), "all stability runs must converge"

    def segment_variance(report) -> float:
        acc = np.array([a for _, _, a in report.accuracy_trajectory])
        idx = int(np.argmax(acc >= 0.5))
        return float(np.var(acc[idx:]))

    aware_var = [segment_variance(r) for r in aware]
    fixed_var = [segment_variance(r) for r in fixed]
    passed = float(np.mean(aware_var)) < float(np.mean(fixed_var))
    wins = sum(a < f for a, f in zip(aware_var, fixed_var))
    report_line(
        "C7 staleness-aware stability",
        passed,
        f"mean post-50% trajectory variance: aware={np.mean(aware_var):.5f} "
        f"fixed={np.mean(fixed_var):.5f} (aware lower on {wins}/10 seeds)",
    )
    assert passed


# ------------------------------------------------------------------- criterion 8

def test_c08_noise_utility_monotonicity(noise_sweep_runs):
    """Property: pooled final accuracy non-increasing in sigma (adjacent
    inversions <= 1%), and every tier degrades more at sigma=2.0 than at 0.5."""
    sigmas = sorted(noise_sweep_runs)
    pooled = {s: float(np.mean([r.final_pooled_accuracy for r in noise_sweep_runs[s]])) for s in sigmas}
    inversions = [max(0.0, pooled[b] - pooled[a]) for a, b in zip(sigmas, sigmas[1:])]
    monotone_ok = all(v <= 0.01 for v in inversions)

    def degradation(sigma: float, tier: str) -> float:
        deltas = []
        for base_run, noisy_run in zip(noise_sweep_runs[0.0], noise_sweep_runs[sigma]):
            deltas.append(
                base_run.per_client[tier].final_local_accuracy - noisy_run.per_client[tier].final_local_accuracy
            )
        return float(np.mean(deltas))

    tier_ok = {}
    for tier in TIER_ORDER_FAST_TO_SLOW:
        tier_ok[tier] = degradation(2.0, tier) > degradation(0.5, tier)
    passed = monotone_ok and all(tier_ok.values())
    report_line(
        "C8 noise-utility monotonicity",
        passed,
        "pooled acc by sigma: " + ", ".join(f"{s}: {pooled[s]:.3f}" for s in sigmas)
        + f"; max inversion {max(inversions):.4f} (<= 0.01); "
        + "deg(2.0) > deg(0.5) per tier: " + ", ".join(f"{t}={'y' if ok else 'n'}" for t, ok in tier_ok.items()),
    )
    assert monotone_ok, (pooled, inversions)
    assert all(tier_ok.values()), tier_ok


# ------------------------------------------------------------------- criterion 9

def test_c09_dp_sgd_correctness():
    """Property: finite-difference gradients (<= 1e-4 rel), clipping invariant,
    Monte-Carlo noise variance within +/-3%, exact mechanism counting."""
    t0 = time.time()
    layout = ModelLayout(6, 5, 3)
    rng = np.random.default_rng(0)
    step = 1e-5
    worst_rel = 0.0
    for _ in range(100):
        params = init_params(layout, rng)
        x = rng.normal(size=(1, 6))
        y = np.array([rng.integers(0, 3)])
        _, grads = forward_loss(params, x, y)
        for k in rng.choice(layout.n_params, size=2, replace=False):
            up, down = params.values.copy(), params.values.copy()
            up[k] += step
            down[k] -= step
            fd = (forward_loss(ModelParameters(up, layout), x, y)[0]
                  - forward_loss(ModelParameters(down, layout), x, y)[0]) / (2 * step)
            scale = max(abs(fd), abs(grads[0, k]), 1e-8)
            worst_rel = max(worst_rel, abs(grads[0, k] - fd) / scale)
    grad_ok = worst_rel <= 1e-4

    clip_ok = True
    for vector in (np.array([3e300, 4e300]), np.zeros(4), rng.normal(scale=100, size=50), np.full(3, 1e-300)):
        out = clip_per_sample(vector, 1.0)
        scale = max(np.abs(out).max(), 1.0)
        clip_ok &= scale * np.linalg.norm(out / scale) <= 1.0 + 1e-12

    mc_rng = np.random.default_rng(77)
    cfg = DpConfig(noise_multiplier=1.0, clip_norm=1.0)
    draws = np.array([noised_mean_gradient(np.zeros((1, 4)), cfg, mc_rng) for _ in range(25_000)])
    variance = float(draws.ravel().var())
    noise_ok = 0.97 <= variance <= 1.03

    counts_ok = True
    for n, batch, epochs in ((64, 9, 1), (13, 4, 2), (5, 9, 3)):
        data = Dataset(rng.normal(size=(n, 6)), rng.integers(0, 3, n), 3, 0)
        result = local_train(
            init_params(layout, rng), data,
            DpConfig(noise_multiplier=0.5, batch_size=batch, local_epochs=epochs),
            np.random.default_rng(1),
        )
        counts_ok &= result.mechanism_applications == math.ceil(n / batch) * epochs

    elapsed = time.time() - t0
    passed = grad_ok and clip_ok and noise_ok and counts_ok
    report_line(
        "C9 DP-SGD correctness",
        passed,
        f"max FD rel err={worst_rel:.2e} (<=1e-4), clip invariant={clip_ok}, "
        f"MC noise variance={variance:.4f} (in [0.97, 1.03]), counts exact={counts_ok}, {elapsed:.1f}s",
    )
    assert grad_ok and clip_ok and noise_ok and counts_ok


# ------------------------------------------------------------------ criterion 10

def test_c10_replay_determinism(tmp_path):
    """Property: two replays of the same manifest produce byte-identical files."""
    cfg = base_config(
        "async", sigma=0.5, per_class=20, batch_size=4, seeds=(0, 1), seed=0,
        max_aggregations=40, stop_on_target=False, max_virtual_time=None,
    )
    bundle = run_sweep(cfg, {"sigma": [0.5, 1.0]})
    original = emit_reports(bundle, tmp_path / "orig")
    replay_a = replay(original["manifest"], tmp_path / "a")
    replay_b = replay(original["manifest"], tmp_path / "b")

    identical = True
    compared = 0
    for key in ("privacy_fairness", "participation", "timing", "manifest"):
        with open(replay_a[key], "rb") as fa, open(replay_b[key], "rb") as fb, open(original[key], "rb") as fo:
            a, b, o = fa.read(), fb.read(), fo.read()
            identical &= a == b == o
            compared += 1
    for name in sorted(os.listdir(original["convergence_dir"])):
        with open(os.path.join(replay_a["convergence_dir"], name), "rb") as fa, open(
            os.path.join(replay_b["convergence_dir"], name), "rb"
        ) as fb, open(os.path.join(original["convergence_dir"], name), "rb") as fo:
            identical &= fa.read() == fb.read() == fo.read()
            compared += 1
    report_line("C10 replay determinism", identical, f"{compared} files byte-compared across two replays")
    assert identical
