"""Acceptance criteria for the package, one test per criterion.

Every test prints a single ``[PASS]`` / ``[FAIL]`` line with the measured
value and its threshold; the lines are repeated in the pytest terminal
summary. Run ``python tests/test_acceptance.py`` for the lines alone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pytest

from qpf.diffusive import MICROSECOND, eta_family, qubit_fluorescence_preset, simulate_records
from qpf.discrete import apply_partial, outcome_probabilities, random_kraus_map, reset_map, sample_outcome
from qpf.estimation import EstimationTask, parallel_loglik, run_estimation, submartingale_diagnostic
from qpf.operators import random_density
from qpf.suites import PLUS, Check, eta_discrimination, maxlike, positivity, random_discrete_task, step_halving

SEEDS = range(20)
RESULTS: list[str] = []


@dataclass(frozen=True)
class Outcome:
    name: str
    checks: tuple[Check, ...]
    elapsed: float
    budget: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks) and self.elapsed < self.budget

    def line(self) -> str:
        parts = [
            f"{c.name} = {c.measured:.6g} (need {c.threshold:.6g}{'' if c.passed else ', missed'})"
            + (f" [{c.detail}]" if c.detail else "")
            for c in self.checks
        ]
        parts.append(f"runtime {self.elapsed:.1f}s (limit {self.budget:g}s)")
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.name}: " + "; ".join(parts)


def _timed(name: str, budget: float, checks: list[Check], elapsed: float) -> Outcome:
    return Outcome(name, tuple(checks), elapsed, budget)


def _report(outcome: Outcome) -> None:
    line = outcome.line()
    RESULTS.append(line)
    print(line)
    assert outcome.passed, line


def criterion_1() -> Outcome:
    t = time.perf_counter()
    checks = [Check(c.name.split(": ")[1], c.passed, c.measured, c.threshold) for c in positivity(seed=0, n=10_000)]
    return _timed("1 positivity at coarse steps", 10, checks, time.perf_counter() - t)


def criterion_2() -> Outcome:
    t = time.perf_counter()
    _, gaps, ratios = step_halving(seed=0, n_seeds=100)
    ratio = float(ratios.min())
    check = Check("halving ratio", ratio >= 2.5, ratio, 2.5,
                  "gaps " + ", ".join(f"{g:.3e}" for g in gaps))
    return _timed("2 integrator equivalence, step halving", 30, [check], time.perf_counter() - t)


def criterion_3() -> Outcome:
    t = time.perf_counter()
    family = eta_family((0.10, 0.26))
    dt = 0.2 * MICROSECOND
    matched = submartingale_diagnostic(family, 0.26, 2000, 20, PLUS, PLUS, seed=0, dt=dt)
    mixed = submartingale_diagnostic(family, 0.26, 2000, 20, PLUS, np.eye(2) / 2, seed=1, dt=dt)
    checks = [
        Check("matched pi margin", matched.pi.passed, matched.pi.margin, 0.0),
        Check("mismatched pi*F margin", mixed.pi_fidelity.passed, mixed.pi_fidelity.margin, 0.0),
    ]
    return _timed("3 sub-martingale, qubit r=2", 120, checks, time.perf_counter() - t)


@lru_cache(maxsize=None)
def coarse_grid_traces():
    return tuple(eta_discrimination(0.26, (0.10, 0.26, 0.40), seed, checkpoint_every=250) for seed in SEEDS)


def criterion_4() -> Outcome:
    t = time.perf_counter()
    finals = np.array([trace.final.pi[1] for trace in coarse_grid_traces()])
    hits = int(np.sum(finals > 0.99))
    check = Check("seeds with pi(0.26) > 0.99", hits >= 19, hits, 19,
                  "final pi " + " ".join(f"{p:.4f}" for p in finals))
    return _timed("4 coarse grid discrimination, 2000 records", 300, [check], time.perf_counter() - t)


def criterion_5() -> Outcome:
    t = time.perf_counter()
    traces = [eta_discrimination(0.2425, (0.240, 0.245), seed) for seed in SEEDS]
    flagged = sum(not trace.discriminated for trace in traces)
    below = sum(trace.final.pi.max() < 0.95 for trace in traces)
    checks = [
        Check("seeds with max pi < 0.95", below >= 15, below, 15),
        Check("seeds flagged undiscriminated", flagged == below, flagged, below),
    ]
    return _timed("5 fine grid non-discrimination", 300, checks, time.perf_counter() - t)


def criterion_6() -> Outcome:
    t = time.perf_counter()
    checks = [Check("max log-odds error", c.passed, c.measured, c.threshold) for c in maxlike(seed=0, n_tasks=50)]
    return _timed("6 maxlike identity, 50 discrete tasks", 5, checks, time.perf_counter() - t)


def criterion_7() -> Outcome:
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_reset = 0.0
    for dim in (2, 3, 4):
        sigma = random_density(dim, rng)
        kmap = reset_map(sigma)
        for _ in range(20):
            out = apply_partial(kmap, 1, random_density(dim, rng, rank=int(rng.integers(1, dim + 1))))
            worst_reset = max(worst_reset, float(np.max(np.abs(out - sigma))))
    records = simulate_records(qubit_fluorescence_preset(eta=0.26), 200, 50, 0.2 * MICROSECOND, PLUS, seed=3)
    tasks = [EstimationTask(eta_family((0.10, 0.26, 0.40)), records, {0: PLUS})]
    for _ in range(5):
        family, prior, states, recs = random_discrete_task(rng)
        tasks.append(EstimationTask(family, recs, states, prior))
    worst_par = 0.0
    for task in tasks:
        sequential = run_estimation(task).final.loglik
        for workers in (1, 2, 8):
            worst_par = max(worst_par, float(np.max(np.abs(parallel_loglik(task, workers) - sequential))))
    checks = [
        Check("reset error", worst_reset <= 1e-10, worst_reset, 1e-10),
        Check("parallel vs sequential", worst_par <= 1e-12, worst_par, 1e-12),
    ]
    return _timed("7 concatenation and reset", 10, checks, time.perf_counter() - t)


def criterion_8() -> Outcome:
    t = time.perf_counter()
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        dim, m = int(rng.integers(2, 5)), int(rng.integers(1, 5))
        kmap = random_kraus_map(dim, m, rng, ops_per_outcome=int(rng.integers(1, 4)))
        rho = random_density(dim, rng)
        total = sum(np.trace(apply_partial(kmap, y, rho)).real for y in range(1, m + 1))
        worst = max(worst, abs(total - 1.0))
    kmap = random_kraus_map(3, 4, rng)
    rho = random_density(3, rng)
    p = outcome_probabilities(kmap, rho)
    n = 100_000
    counts = np.bincount([sample_outcome(kmap, rho, rng)[0] for _ in range(n)], minlength=5)[1:]
    z = float(np.max(np.abs(counts / n - p) / np.sqrt(p * (1 - p) / n)))
    checks = [
        Check("completeness defect", worst <= 1e-9, worst, 1e-9),
        Check("max frequency z-score", z <= 3.0, z, 3.0),
    ]
    return _timed("8 completeness and sampling", 20, checks, time.perf_counter() - t)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 9)])
def test_criterion(criterion):
    _report(criterion())


def test_median_posterior_grows_with_records():
    # record counts double between comparisons
    counts = [250, 500, 1000, 2000]
    pis = np.array([[cp.pi[1] for cp in trace.checkpoints if cp.records_processed in counts]
                    for trace in coarse_grid_traces()])
    median = np.median(pis, axis=0)
    assert np.all(np.diff(median) >= 0), median


if __name__ == "__main__":
    for criterion in CRITERIA:
        print(criterion().line(), flush=True)
