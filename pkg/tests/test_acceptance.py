"""Acceptance criteria A1-A9.

Each test records a one-line verdict (printed live and repeated in the pytest
terminal summary).  Run standalone with ``python tests/test_acceptance.py``.
"""

import math
import sys
import time
from functools import cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from acceptance_report import lines, record

from isa_anh.cli import main as cli_main
from isa_anh.experiments import hsic_ablation, identifiability_sweep, run_apc
from isa_anh.hsic import hsic_biased, permutation_pvalue
from isa_anh.synthgen import (
    GaussianSegmentSpec,
    GaussianSourceModel,
    apply_mixing,
    check_separability,
    invert_mixing,
    make_mixing,
    random_segment_spec,
)
from isa_anh.trainer import gradient_audit

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
SEEDS = (0, 1, 2, 3, 4)


def naive_trace_hsic(Yj, Yk, sj, sk):
    """tr(K H L H) / N^2 with explicitly built K, L and H."""
    N = len(Yj)
    K = np.empty((N, N))
    L = np.empty((N, N))
    for p in range(N):
        for q in range(N):
            K[p, q] = math.exp(-float(((Yj[p] - Yj[q]) ** 2).sum()) / (2 * sj * sj))
            L[p, q] = math.exp(-float(((Yk[p] - Yk[q]) ** 2).sum()) / (2 * sk * sk))
    H = np.eye(N) - np.full((N, N), 1.0 / N)
    return float(np.trace(K @ H @ L @ H)) / (N * N)


def test_a1_hsic_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        N = int(rng.integers(2, 65))
        dj, dk = (int(v) for v in rng.integers(1, 9, size=2))
        Yj, Yk = rng.normal(size=(N, dj)), rng.normal(size=(N, dk))
        sj, sk = rng.uniform(0.5, 4.0, size=2)
        worst = max(worst, abs(hsic_biased(Yj, Yk, sj, sk).value - naive_trace_hsic(Yj, Yk, sj, sk)))
    closed = 0.0
    for _ in range(20):
        dj, dk = rng.uniform(0.1, 3.0, size=2)
        a, b = math.exp(-dj * dj / 2), math.exp(-dk * dk / 2)
        est = hsic_biased(np.array([[0.0], [dj]]), np.array([[0.0], [dk]]), 1.0, 1.0).value
        closed = max(closed, abs(est - (1 - a) * (1 - b) / 4))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-10 and closed <= 1e-12 and secs < 10
    detail = f"max |fast - naive| = {worst:.1e} (<= 1e-10), N=2 closed form {closed:.1e} (<= 1e-12), {secs:.1f}s"
    assert record("A1", ok, detail)


def test_a2_permutation_test():
    t0 = time.perf_counter()
    Y = np.random.default_rng(0).normal(size=(256, 2))
    p_dep = permutation_pvalue(Y, Y, 99, np.random.default_rng(1))
    kept = 0
    for trial in range(50):
        rng = np.random.default_rng(100 + trial)
        p = permutation_pvalue(rng.normal(size=(256, 2)), rng.normal(size=(256, 2)), 99, rng)
        kept += p > 0.05
    secs = time.perf_counter() - t0
    ok = p_dep <= 0.01 and kept >= 45 and secs < 120
    detail = f"dependent p = {p_dep:.2f} (<= 0.01), independent p > 0.05 in {kept}/50 (>= 45), {secs:.0f}s"
    assert record("A2", ok, detail)


def test_a3_gradient_audit():
    t0 = time.perf_counter()
    report = gradient_audit()
    secs = time.perf_counter() - t0
    worst = max(report.errors.values())
    ok = report.passed and worst <= 1e-4 and len(report.errors) == 5 and secs < 60
    parts = ", ".join(f"{k} {v:.1e}" for k, v in report.errors.items())
    assert record("A3", ok, f"max rel error {worst:.1e} (<= 1e-4): {parts}; {secs:.0f}s")


@cache
def identifiability_runs(lambda_hsic: float):
    t0 = time.perf_counter()
    runs = identifiability_sweep(SEEDS, lambda_hsic)
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_a4_identifiability():
    runs, secs = identifiability_runs(0.02)
    good = [r for r in runs if r.score >= 0.85 and r.margin >= 0.30]
    ok = len(good) >= 4 and secs < 600 and all(r.steps <= 5000 for r in runs)
    scores = " ".join(f"{r.score:.3f}/{r.baseline:.3f}" for r in runs)
    detail = f"{len(good)}/5 seeds with score >= 0.85 and >= baseline + 0.30 (need 4); score/baseline {scores}; {secs:.0f}s"
    assert record("A4", ok, detail)


@pytest.mark.slow
def test_a5_hsic_ablation():
    on, secs_on = identifiability_runs(0.02)
    off, secs_off = identifiability_runs(0.0)
    result = hsic_ablation(on, off)
    secs = secs_on + secs_off
    ok = result.mean_delta < 0 and secs < 1200
    deltas = " ".join(f"{d:+.3f}" for *_, d in result.per_seed)
    detail = f"mean delta |pearson| (lambda 0.02 - 0) = {result.mean_delta:+.4f} (< 0); per seed {deltas}; {secs:.0f}s"
    assert record("A5", ok, detail)


def test_a6_separability():
    t0 = time.perf_counter()
    labels = list(range(1, 10))
    flat = GaussianSourceModel(GaussianSegmentSpec(np.zeros((9, 2, 2)), np.ones((9, 2, 2))))
    rng = np.random.default_rng(6)
    const_sep = check_separability(flat, rng.normal(size=4), rng.normal(size=2), labels, tol=1e-8).separable
    spec = random_segment_spec(2, 2, 9, rng)
    model = GaussianSourceModel(spec)
    hits = sum(
        check_separability(model, rng.normal(size=4), rng.normal(size=2), spec.labels, tol=1e-8).separable
        for _ in range(100)
    )
    secs = time.perf_counter() - t0
    ok = not const_sep and hits >= 99 and secs < 10
    detail = f"constant eta separable={const_sep} (want False), random spec separable on {hits}/100 (>= 99), {secs:.1f}s"
    assert record("A6", ok, detail)


@pytest.mark.slow
def test_a7_apc_sanity():
    t0 = time.perf_counter()
    res = run_apc(0)
    secs = time.perf_counter() - t0
    ok = res.improvement >= 0.20 and res.steps <= 2000 and secs < 300
    detail = (
        f"held-out L1 {res.model_loss:.2f} vs copy-last {res.copy_last_loss:.2f}: "
        f"{res.improvement:.1%} better (>= 20%) after {res.steps} steps, {secs:.0f}s"
    )
    assert record("A7", ok, detail)


def test_a8_cli_determinism(tmp_path):
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        code = cli_main(["train", "--config", str(FIXTURES / "tiny.toml"), "--out", str(out), "--seed", "11"])
        assert code == 0
        outs.append(out)
    a, b = outs
    same_log = (a / "run.jsonl").read_bytes() == (b / "run.jsonl").read_bytes()
    names = sorted(p.name for p in (a / "checkpoints").iterdir())
    same_ckpt = names == sorted(p.name for p in (b / "checkpoints").iterdir()) and all(
        (a / "checkpoints" / n).read_bytes() == (b / "checkpoints" / n).read_bytes() for n in names
    )
    ok = same_log and same_ckpt and len(names) > 0
    assert record("A8", ok, f"run logs identical={same_log}, {len(names)} checkpoints identical={same_ckpt}")


def test_a9_mixing_roundtrip():
    rng = np.random.default_rng(9)
    worst = 0.0
    for depth in (1, 2, 3):
        for nd in (2, 4, 8):
            f = make_mixing(nd, depth, 10.0, rng)
            s = rng.normal(size=(1000, nd)) * rng.uniform(0.1, 3.0)
            worst = max(worst, float(np.abs(invert_mixing(f, apply_mixing(f, s)) - s).max()))
    assert record("A9", worst <= 1e-6, f"max round-trip error {worst:.1e} over 9 mixings x 1000 probes, L <= 3 (<= 1e-6)")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    print("\n".join(lines()))
    sys.exit(code)
