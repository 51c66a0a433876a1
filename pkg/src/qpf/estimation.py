"""Batch parameter estimation over many measurement records.

Records are processed as one logical concatenated trajectory: each
hypothesis state is reset to the record's known initial state at every
record boundary while the hypothesis probabilities carry over. Because of
the resets, the accumulated log-likelihood factorizes over records, which is
what lets :func:`parallel_loglik` split the work.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from numbers import Real
from typing import Mapping, Sequence, Union

import numpy as np

from qpf.diffusive import (
    ContinuousRecord,
    ParameterizedFamily,
    batch_filter,
    batch_logliks,
    simulate_records,
)
from qpf.discrete import (
    DiscreteFamily,
    DiscreteRecord,
    batch_filter_step,
    batch_sample_step,
    log_normalize,
    record_loglik,
)
from qpf.errors import (
    InvalidConfiguration,
    InvalidParameter,
    MalformedRecord,
    NonScalarParameter,
    UnknownInitialState,
)
from qpf.operators import as_density, fidelity_batch

DISCRIMINATION_THRESHOLD = 0.95

Family = Union[ParameterizedFamily, DiscreteFamily]
Record = Union[ContinuousRecord, DiscreteRecord]


@dataclass(frozen=True, eq=False)
class EstimationTask:
    family: Family
    records: Sequence[Record]
    initial_states: Mapping
    prior: np.ndarray | None = None

    def __post_init__(self):
        r = self.family.r
        prior = np.full(r, 1.0 / r) if self.prior is None else np.asarray(self.prior, dtype=float)
        if prior.shape != (r,) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise InvalidParameter("prior must be r non-negative numbers summing to 1")
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def labels(self) -> tuple:
        return self.family.labels

    @property
    def log_prior(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.prior)


@dataclass(frozen=True)
class Checkpoint:
    records_processed: int
    pi: np.ndarray
    loglik: np.ndarray


@dataclass(frozen=True, eq=False)
class PosteriorTrace:
    labels: tuple
    checkpoints: tuple[Checkpoint, ...]
    floors: np.ndarray

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]

    @property
    def winner(self):
        """Label with the largest final probability; ties go to the lowest index."""
        return self.labels[int(np.argmax(self.final.pi))]

    @property
    def discriminated(self) -> bool:
        return bool(self.final.pi.max() >= DISCRIMINATION_THRESHOLD)


def _initial_state(task: EstimationTask, rec: Record) -> np.ndarray:
    try:
        return as_density(task.initial_states[rec.initial_state_id], name="initial state")
    except KeyError:
        raise UnknownInitialState(f"unknown initial state id {rec.initial_state_id!r}") from None


def _check_record(task: EstimationTask, index: int, rec: Record) -> None:
    fam = task.family
    if isinstance(fam, ParameterizedFamily):
        if not isinstance(rec, ContinuousRecord):
            raise MalformedRecord(f"record {index} is not a continuous record")
        if len(rec) and rec.increments.shape[1] != fam.n_measured:
            raise MalformedRecord(
                f"record {index} has {rec.increments.shape[1]} channels, family measures {fam.n_measured}"
            )
    elif not isinstance(rec, DiscreteRecord):
        raise MalformedRecord(f"record {index} is not a discrete record")


def record_logliks(task: EstimationTask, indices: Sequence[int] | None = None):
    """Per-record log-likelihood matrix ``(n, r)`` and floor counts for the given records.

    Continuous records are grouped by ``(length, dt)`` and filtered as
    vectorized batches; the row order follows ``indices``.
    """
    indices = range(len(task.records)) if indices is None else indices
    indices = list(indices)
    r = task.family.r
    ll = np.zeros((len(indices), r))
    floors = np.zeros((len(indices), r), dtype=np.int64)
    for row, i in enumerate(indices):
        _check_record(task, i, task.records[i])
    if isinstance(task.family, ParameterizedFamily):
        groups: dict[tuple, list[int]] = {}
        for row, i in enumerate(indices):
            rec = task.records[i]
            groups.setdefault((len(rec), rec.dt), []).append(row)
        for (length, dt), rows in groups.items():
            if length == 0:
                continue
            recs = [task.records[indices[row]] for row in rows]
            inc = np.stack([rec.increments for rec in recs])
            rho0 = np.stack([_initial_state(task, rec) for rec in recs])
            ll[rows], floors[rows] = batch_logliks(task.family, inc, dt, rho0)
    else:
        for row, i in enumerate(indices):
            rec = task.records[i]
            ll[row], floors[row] = record_loglik(task.family.models, rec.outcomes, _initial_state(task, rec))
    return ll, floors


def _ordered_fold(ll: np.ndarray) -> np.ndarray:
    """Running sums over records in index order (left fold, no pairwise summation)."""
    return np.cumsum(ll, axis=0)


def run_estimation(task: EstimationTask, checkpoint_every: int = 1, workers: int = 1) -> PosteriorTrace:
    """Filter all records in order and report the posterior every ``checkpoint_every`` records.

    The first checkpoint (``records_processed == 0``) is the prior; the last
    one is always the full record set. ``workers`` only changes how the
    per-record likelihoods are computed, never the result.
    """
    if not task.records:
        raise InvalidConfiguration("no records to process")
    if checkpoint_every < 1:
        raise InvalidConfiguration("checkpoint_every must be >= 1")
    ll, floors = _loglik_matrix(task, workers)
    running = _ordered_fold(ll)
    n = len(task.records)
    marks = list(range(checkpoint_every, n + 1, checkpoint_every))
    if not marks or marks[-1] != n:
        marks.append(n)
    log_prior = task.log_prior
    checkpoints = [Checkpoint(0, task.prior.copy(), np.zeros(task.family.r))]
    for m in marks:
        total = running[m - 1]
        checkpoints.append(Checkpoint(m, np.exp(log_normalize(log_prior + total)), total.copy()))
    return PosteriorTrace(task.labels, tuple(checkpoints), floors.sum(axis=0))


def default_workers() -> int:
    env = os.environ.get("QPF_WORKERS")
    return int(env) if env else 1


def _loglik_matrix(task: EstimationTask, workers: int):
    workers = max(1, min(int(workers), len(task.records)))
    if workers == 1:
        return record_logliks(task)
    chunks = np.array_split(np.arange(len(task.records)), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: record_logliks(task, c), chunks))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def parallel_loglik(task: EstimationTask, workers: int | None = None) -> np.ndarray:
    """Total log-likelihood vector, computed on contiguous record chunks in a thread pool.

    Chunk results are concatenated in record order and folded exactly as in
    :func:`run_estimation`. ``workers`` defaults to ``$QPF_WORKERS`` or 1.
    """
    if not task.records:
        raise InvalidConfiguration("no records to process")
    workers = default_workers() if workers is None else workers
    return _ordered_fold(_loglik_matrix(task, workers)[0])[-1]


@dataclass(frozen=True)
class SeriesCheck:
    """Ensemble statistics of one scalar process and its sub-martingale verdict.

    ``margin`` is the smallest ``mean increment + 3 standard errors`` over
    all steps; the series passes when it is non-negative.
    """

    mean: np.ndarray
    stderr: np.ndarray
    margin: float

    @property
    def passed(self) -> bool:
        return self.margin >= 0.0


def _series_check(x: np.ndarray, n_sigma: float = 3.0) -> SeriesCheck:
    n = x.shape[0]
    mean = x.mean(axis=0)
    stderr = x.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(x.shape[1])
    if x.shape[1] < 2:
        return SeriesCheck(mean, stderr, 0.0)
    inc = np.diff(x, axis=1)
    inc_se = inc.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(inc.shape[1])
    # exact-zero increments (degenerate families) must not fail on rounding noise
    margin = float(np.min(inc.mean(axis=0) + n_sigma * inc_se + 1e-12))
    return SeriesCheck(mean, stderr, margin)


@dataclass(frozen=True)
class SubmartingaleReport:
    truth: object
    pi: SeriesCheck
    fidelity: SeriesCheck
    pi_fidelity: SeriesCheck

    @property
    def passed(self) -> bool:
        return self.pi.passed and self.pi_fidelity.passed and self.fidelity.passed


def submartingale_diagnostic(
    family: Family,
    truth,
    n_traj: int,
    length: int,
    rho0_true,
    rho0_filter=None,
    seed: int = 0,
    dt: float | None = None,
    truth_model=None,
) -> SubmartingaleReport:
    """Monte Carlo check that the true hypothesis' probability tends to increase.

    Simulates ``n_traj`` trajectories under ``truth`` (a label of ``family``,
    or ``truth_model`` if given), runs the particle filter on each from
    ``rho0_filter`` and tests ``pi``, ``F(rho_true, rho_truth_hyp)`` and
    their product for non-decreasing ensemble means within three standard
    errors at every step.
    """
    if truth not in family.labels:
        raise InvalidConfiguration(f"truth {truth!r} is not one of the hypotheses")
    if n_traj < 1 or length < 0:
        raise InvalidConfiguration("n_traj must be >= 1 and length >= 0")
    l_hat = family.labels.index(truth)
    model = family.models[l_hat] if truth_model is None else truth_model
    rho0_true = as_density(rho0_true)
    rho0_filter = rho0_true if rho0_filter is None else as_density(rho0_filter)
    r, d = family.r, family.dim

    if isinstance(family, ParameterizedFamily):
        if dt is None:
            raise InvalidConfiguration("a time step is required for diffusive families")
        recs, true_states = simulate_records(model, n_traj, length, dt, rho0_true, seed, return_states=True)
        inc = np.stack([rec.increments for rec in recs]) if n_traj else None
        pis, states = batch_filter(family, inc, dt, np.broadcast_to(rho0_filter, (n_traj, d, d)))
        pi_hat = pis[:, :, l_hat]
        rho_hat = states[:, :, l_hat]
    else:
        uniforms = np.stack(
            [
                np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,))).random(length)
                for i in range(n_traj)
            ]
        )
        rho_true = np.broadcast_to(rho0_true, (n_traj, d, d)).copy()
        rhos = np.broadcast_to(rho0_filter, (n_traj, r, d, d)).copy()
        log_pi = np.full((n_traj, r), -np.log(r))
        true_states = np.empty((n_traj, length + 1, d, d), dtype=complex)
        rho_hat = np.empty_like(true_states)
        pi_hat = np.empty((n_traj, length + 1))
        true_states[:, 0], rho_hat[:, 0], pi_hat[:, 0] = rho_true, rhos[:, l_hat], np.exp(log_pi[:, l_hat])
        for k in range(1, length + 1):
            y, rho_true = batch_sample_step(model.at(k), rho_true, uniforms[:, k - 1])
            step_ll = np.empty((n_traj, r))
            for l, hyp in enumerate(family.models):
                rhos[:, l], step_ll[:, l], _ = batch_filter_step(hyp.at(k), y, rhos[:, l])
            log_pi = log_normalize(log_pi + step_ll)
            true_states[:, k], rho_hat[:, k], pi_hat[:, k] = rho_true, rhos[:, l_hat], np.exp(log_pi[:, l_hat])

    n, T1 = true_states.shape[:2]
    fid = fidelity_batch(
        true_states.reshape(-1, d, d), rho_hat.reshape(-1, d, d)
    ).reshape(n, T1)
    return SubmartingaleReport(truth, _series_check(pi_hat), _series_check(fid), _series_check(pi_hat * fid))


@dataclass(frozen=True)
class GridRefinement:
    candidates: tuple[float, ...]
    winner: float
    discriminated: bool
    half_spacing: float


def refine_grid(
    trace: PosteriorTrace,
    candidates: Sequence[float] | None = None,
    shrink: float = 0.5,
    bounds: tuple[float, float] = (0.0, 1.0),
) -> GridRefinement:
    """Equally spaced grid of the same size centred on the winner, ``shrink`` times narrower.

    The window is shifted (or, if wider than ``bounds``, cut) so that it stays
    inside the physical range. ``half_spacing`` is the half grid spacing of
    the grid that produced ``trace``, the resolution of its winner.
    """
    candidates = trace.labels if candidates is None else tuple(candidates)
    if not all(isinstance(c, Real) for c in candidates):
        raise NonScalarParameter("grid refinement needs scalar parameter values")
    values = np.array(candidates, dtype=float)
    if np.any(np.diff(values) <= 0):
        raise NonScalarParameter("candidate values must be strictly increasing")
    if not 0.0 < shrink < 1.0:
        raise InvalidParameter("shrink must lie in (0, 1)")
    winner = float(values[int(np.argmax(trace.final.pi))])
    r = len(values)
    span = float(values[-1] - values[0]) * shrink
    half_spacing = float(values[-1] - values[0]) / (2 * (r - 1)) if r > 1 else 0.0
    lo, hi = winner - span / 2, winner + span / 2
    if hi - lo >= bounds[1] - bounds[0]:
        lo, hi = bounds
    elif lo < bounds[0]:
        lo, hi = bounds[0], bounds[0] + span
    elif hi > bounds[1]:
        lo, hi = bounds[1] - span, bounds[1]
    grid = np.linspace(lo, hi, r) if r > 1 else np.array([winner])
    grid = np.round(grid, 12)
    return GridRefinement(tuple(float(g) for g in grid), winner, trace.discriminated, half_spacing)
