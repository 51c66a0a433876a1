"""Discrete-time measurement models and the particle quantum filter.

A partial Kraus map ``K_y(rho) = sum_mu M_mu^y rho M_mu^y^H`` is stored as one
``(n_mu, d, d)`` operator stack per outcome. Outcomes are labelled ``1..m``
and time steps ``k = 1..T``, both 1-based as in the usual Markov-chain
notation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from qpf.errors import (
    DimensionMismatch,
    InvalidParameter,
    OutcomeOutOfRange,
    UnknownInitialState,
    VanishingTrace,
)
from qpf.operators import VANISHING_TRACE, as_density, dag, hermitian_part, normalize, trace

COMPLETENESS_TOL = 1e-9
LIKELIHOOD_FLOOR = 1e-300
LOG_FLOOR = float(np.log(LIKELIHOOD_FLOOR))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PartialKrausMap:
    """Family of partial Kraus maps indexed by outcome ``y = 1..m``.

    ``ops[y - 1]`` holds the operators ``M_mu^y`` stacked along axis 0.
    Completeness ``sum_{mu,y} M^H M = I`` is checked on construction.
    """

    ops: tuple[np.ndarray, ...]

    def __post_init__(self):
        stacks = []
        for y, group in enumerate(self.ops, start=1):
            group = np.asarray(group, dtype=complex)
            if group.ndim == 2:
                group = group[None]
            if group.ndim != 3 or group.shape[1] != group.shape[2]:
                raise DimensionMismatch(f"outcome {y}: operators must be square, got {group.shape}")
            stacks.append(_frozen(group))
        if not stacks:
            raise InvalidParameter("a partial Kraus map needs at least one outcome")
        if len({s.shape[1] for s in stacks}) != 1:
            raise DimensionMismatch("all Kraus operators must share one dimension")
        object.__setattr__(self, "ops", tuple(stacks))
        defect = self.completeness() - np.eye(self.dim)
        if np.max(np.abs(defect)) > COMPLETENESS_TOL:
            raise InvalidParameter(
                f"Kraus operators are not complete (max defect {np.max(np.abs(defect)):.2e})"
            )

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[Sequence[np.ndarray]]) -> "PartialKrausMap":
        return cls(tuple(np.asarray(list(group), dtype=complex) for group in outcomes))

    @property
    def dim(self) -> int:
        return self.ops[0].shape[1]

    @property
    def n_outcomes(self) -> int:
        return len(self.ops)

    def completeness(self) -> np.ndarray:
        return sum(np.einsum("kji,kjl->il", g.conj(), g) for g in self.ops)

    @cached_property
    def _stack(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ops = np.concatenate(self.ops)
        starts = np.cumsum([0] + [len(g) for g in self.ops[:-1]])
        return ops, dag(ops), starts

    def branches(self, rho: np.ndarray) -> np.ndarray:
        """All ``K_y(rho)`` at once: shape ``(..., m, d, d)`` for ``rho`` of shape ``(..., d, d)``."""
        ops, ops_h, starts = self._stack
        terms = ops @ np.asarray(rho)[..., None, :, :] @ ops_h
        return np.add.reduceat(terms, starts, axis=-3)


def compose(after: PartialKrausMap, before: PartialKrausMap) -> PartialKrausMap:
    """Map ``y -> K^after_y o K^before`` where ``before`` must have a single outcome."""
    if before.n_outcomes != 1:
        raise InvalidParameter("only single-outcome maps can be composed in front")
    if after.dim != before.dim:
        raise DimensionMismatch("cannot compose maps of different dimension")
    b = before.ops[0]
    return PartialKrausMap(
        tuple(np.einsum("aij,bjk->abik", g, b).reshape(-1, after.dim, after.dim) for g in after.ops)
    )


def amplitude_damping_map(gamma: float) -> PartialKrausMap:
    """Two-outcome qubit map ``M^1 = diag(1, sqrt(1-gamma))``, ``M^2 = diag(0, sqrt(gamma))``."""
    if not 0.0 <= gamma <= 1.0:
        raise InvalidParameter(f"gamma must lie in [0, 1], got {gamma}")
    return PartialKrausMap(
        (np.diag([1.0, np.sqrt(1.0 - gamma)])[None], np.diag([0.0, np.sqrt(gamma)])[None])
    )


def random_kraus_map(dim: int, n_outcomes: int, rng: np.random.Generator, ops_per_outcome: int = 2):
    """Random complete map: slices of a Haar-ish isometry ``C^d -> C^(n d)``."""
    n = n_outcomes * ops_per_outcome
    g = rng.standard_normal((n * dim, dim)) + 1j * rng.standard_normal((n * dim, dim))
    q, r = np.linalg.qr(g)
    q = q * (np.diag(r) / np.abs(np.diag(r)))
    blocks = q.reshape(n, dim, dim)
    return PartialKrausMap(
        tuple(blocks[i * ops_per_outcome:(i + 1) * ops_per_outcome] for i in range(n_outcomes))
    )


def _check_outcome(kmap: PartialKrausMap, y: int) -> None:
    if not 1 <= int(y) <= kmap.n_outcomes:
        raise OutcomeOutOfRange(f"outcome {y} outside 1..{kmap.n_outcomes}")


def apply_partial(kmap: PartialKrausMap, y: int, rho) -> np.ndarray:
    """Unnormalized ``K_y(rho)``."""
    _check_outcome(kmap, y)
    rho = as_density(rho)
    g = kmap.ops[int(y) - 1]
    return hermitian_part(np.einsum("kij,jl,kml->im", g, rho, g.conj()))


def _probabilities(branches: np.ndarray) -> np.ndarray:
    p = np.clip(trace(branches), 0.0, None)
    return p / p.sum(axis=-1, keepdims=True)


def outcome_probabilities(kmap: PartialKrausMap, rho) -> np.ndarray:
    return _probabilities(kmap.branches(as_density(rho)))


def sample_outcome(kmap: PartialKrausMap, rho, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Draw ``y`` by inverse CDF over outcomes ``1..m`` and return the resulting state."""
    branches = kmap.branches(as_density(rho))
    y = _inverse_cdf(_probabilities(branches), rng.random())
    rho_next, _ = normalize(branches[y - 1])
    return y, rho_next


def _inverse_cdf(p: np.ndarray, u) -> np.ndarray | int:
    cdf = np.cumsum(p, axis=-1)
    idx = (np.asarray(u)[..., None] >= cdf).sum(axis=-1)
    idx = np.minimum(idx, p.shape[-1] - 1)
    # never land on a zero-probability outcome through rounding in the cdf tail
    if np.ndim(idx) == 0:
        while p[idx] <= 0.0:
            idx -= 1
        return int(idx) + 1
    bad = np.take_along_axis(p, idx[..., None], axis=-1)[..., 0] <= 0.0
    while np.any(bad):
        idx = np.where(bad, idx - 1, idx)
        bad = np.take_along_axis(p, idx[..., None], axis=-1)[..., 0] <= 0.0
    return idx + 1


def filter_step(kmap: PartialKrausMap, y: int, rho) -> tuple[np.ndarray, float]:
    """One quantum-filter update; returns the new state and ``tr K_y(rho)``.

    Raises :class:`VanishingTrace` if ``y`` is numerically impossible.
    """
    return normalize(apply_partial(kmap, y, rho))


@dataclass(frozen=True, eq=False)
class DiscreteModel:
    """A partial Kraus map in effect at each step ``k``.

    ``base`` applies everywhere except at the steps listed in ``overrides``.
    """

    base: PartialKrausMap
    overrides: Mapping[int, PartialKrausMap] = field(default_factory=dict)

    def at(self, k: int) -> PartialKrausMap:
        return self.overrides.get(k, self.base)

    @property
    def dim(self) -> int:
        return self.base.dim


@dataclass(frozen=True, eq=False)
class DiscreteFamily:
    """Discrete-time hypotheses ``p_l -> DiscreteModel`` sharing one dimension."""

    labels: tuple
    models: tuple[DiscreteModel, ...]

    def __post_init__(self):
        labels, models = tuple(self.labels), tuple(self.models)
        if len(labels) != len(models) or not models:
            raise InvalidParameter("need one model per label and at least one hypothesis")
        if len(set(labels)) != len(labels):
            raise InvalidParameter("hypothesis labels must be distinct")
        if len({m.dim for m in models}) != 1:
            raise DimensionMismatch("hypotheses must share one dimension")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "models", models)

    @property
    def r(self) -> int:
        return len(self.models)

    @property
    def dim(self) -> int:
        return self.models[0].dim


@dataclass(frozen=True)
class DiscreteRecord:
    outcomes: tuple[int, ...]
    initial_state_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(int(y) for y in self.outcomes))

    def __len__(self) -> int:
        return len(self.outcomes)


@dataclass(frozen=True, eq=False)
class ParticleState:
    """Bank of hypotheses: labels, conditional states and log-probabilities.

    ``log_pi`` is kept normalized (``logsumexp == 0``). ``loglik`` holds the
    accumulated log-likelihood of each hypothesis and ``floors`` counts the
    steps where an observed outcome was impossible under that hypothesis.
    """

    labels: tuple
    rhos: np.ndarray
    log_pi: np.ndarray
    loglik: np.ndarray
    floors: np.ndarray

    @classmethod
    def initial(cls, labels: Sequence, rho0, prior=None) -> "ParticleState":
        labels = tuple(labels)
        r = len(labels)
        if r < 1:
            raise InvalidParameter("need at least one hypothesis")
        if len(set(labels)) != r:
            raise InvalidParameter("hypothesis labels must be distinct")
        rho0 = np.asarray(rho0, dtype=complex)
        rhos = np.broadcast_to(rho0, (r,) + rho0.shape[-2:]).copy()
        for rho in rhos:
            as_density(rho)
        prior = np.full(r, 1.0 / r) if prior is None else np.asarray(prior, dtype=float)
        if prior.shape != (r,) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise InvalidParameter("prior must be r non-negative numbers summing to 1")
        with np.errstate(divide="ignore"):
            log_pi = np.log(prior)
        return cls(labels, rhos, log_pi, np.zeros(r), np.zeros(r, dtype=np.int64))

    @property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi)

    @property
    def r(self) -> int:
        return len(self.labels)

    def winner(self):
        """Label with the largest probability; ties go to the lowest index."""
        return self.labels[int(np.argmax(self.log_pi))]

    def with_states(self, rhos: np.ndarray) -> "ParticleState":
        return ParticleState(self.labels, rhos, self.log_pi, self.loglik, self.floors)


def log_normalize(log_w: np.ndarray) -> np.ndarray:
    """Shift log-weights so that they exponentiate to a probability vector."""
    top = np.max(log_w, axis=-1, keepdims=True)
    return log_w - (top + np.log(np.sum(np.exp(log_w - top), axis=-1, keepdims=True)))


def reweight(state: ParticleState, rhos: np.ndarray, logliks: np.ndarray, floored: np.ndarray):
    """Multiply the hypothesis probabilities by the step likelihoods and renormalize."""
    return ParticleState(
        state.labels,
        rhos,
        log_normalize(state.log_pi + logliks),
        state.loglik + logliks,
        state.floors + floored.astype(np.int64),
    )


def particle_step(models: Sequence[DiscreteModel], k: int, y: int, state: ParticleState) -> ParticleState:
    """Advance every hypothesis by outcome ``y`` at step ``k`` and reweight."""
    if len(models) != state.r:
        raise DimensionMismatch(f"{len(models)} models for {state.r} hypotheses")
    rhos = state.rhos.copy()
    logliks = np.empty(state.r)
    floored = np.zeros(state.r, dtype=bool)
    for l, model in enumerate(models):
        try:
            rhos[l], lik = filter_step(model.at(k), y, state.rhos[l])
            logliks[l] = np.log(lik)
        except VanishingTrace:
            logliks[l] = LOG_FLOOR
            floored[l] = True
    return reweight(state, rhos, logliks, floored)


def filter_record(
    models: Sequence[DiscreteModel],
    outcomes: Sequence[int],
    rho0,
    prior=None,
    labels: Sequence | None = None,
    *,
    history: bool = False,
):
    """Run :func:`particle_step` over a whole record starting at ``k = 1``.

    With ``history=True`` also returns the list of intermediate states
    (including the initial one).
    """
    labels = tuple(range(len(models))) if labels is None else labels
    state = ParticleState.initial(labels, rho0, prior)
    states = [state]
    for k, y in enumerate(outcomes, start=1):
        state = particle_step(models, k, y, state)
        if history:
            states.append(state)
    return (state, states) if history else state


def record_loglik(models: Sequence[DiscreteModel], outcomes: Sequence[int], rho0):
    """Log-likelihood vector of one record and per-hypothesis floor counts.

    Each hypothesis is filtered independently from ``rho0``; this is the
    per-record quantity that the concatenated filter accumulates.
    """
    r = len(models)
    ll = np.zeros(r)
    floors = np.zeros(r, dtype=np.int64)
    rho0 = as_density(rho0)
    for l, model in enumerate(models):
        rho = rho0
        for k, y in enumerate(outcomes, start=1):
            kmap = model.at(k)
            _check_outcome(kmap, y)
            g = kmap.ops[y - 1]
            s = np.einsum("kij,jl,kml->im", g, rho, g.conj())
            tr = float(trace(s))
            if tr > VANISHING_TRACE:
                rho = hermitian_part(s) / tr
                ll[l] += np.log(tr)
            else:
                ll[l] += LOG_FLOOR
                floors[l] += 1
    return ll, floors


def reset_map(sigma) -> PartialKrausMap:
    """Single-outcome channel sending every state to ``sigma``.

    Kraus operators are ``sqrt(lambda_i) |v_i><e_j|`` over the eigenpairs of
    ``sigma`` and the canonical basis.
    """
    sigma = as_density(sigma, name="sigma")
    d = sigma.shape[0]
    w, v = np.linalg.eigh(hermitian_part(sigma))
    w = np.clip(w, 0.0, None)
    w = w / w.sum()
    ops = [
        np.sqrt(w[i]) * np.outer(v[:, i], np.eye(d)[j])
        for i in range(d)
        if w[i] > 0.0
        for j in range(d)
    ]
    return PartialKrausMap((np.array(ops),))


def concatenate_records(
    records: Sequence[DiscreteRecord],
    base_model: DiscreteModel,
    initial_states: Mapping,
) -> tuple[DiscreteRecord, DiscreteModel]:
    """Glue records into one, inserting reset maps at record boundaries.

    The first step of every record after the first uses
    ``K_y o K^{sigma_n}`` where ``sigma_n`` is that record's initial state.
    Steps inside a record keep the base model's schedule (by local index).
    """
    if not records:
        raise InvalidParameter("no records to concatenate")
    sigmas = {}
    for rec in records:
        if rec.initial_state_id not in initial_states:
            raise UnknownInitialState(f"unknown initial state id {rec.initial_state_id!r}")
        sigmas.setdefault(rec.initial_state_id, initial_states[rec.initial_state_id])
    resets = {key: reset_map(s) for key, s in sigmas.items()}

    outcomes: list[int] = []
    overrides: dict[int, PartialKrausMap] = {}
    offset = 0
    for n, rec in enumerate(records):
        for j, kmap in base_model.overrides.items():
            if 1 <= j <= len(rec):
                overrides[offset + j] = kmap
        if n > 0 and len(rec):
            overrides[offset + 1] = compose(base_model.at(1), resets[rec.initial_state_id])
        outcomes.extend(rec.outcomes)
        offset += len(rec)
    return (
        DiscreteRecord(tuple(outcomes), records[0].initial_state_id),
        DiscreteModel(base_model.base, overrides),
    )


def simulate_trajectory(model: DiscreteModel, rho0, length: int, rng: np.random.Generator):
    """Sample a record of ``length`` outcomes; returns outcomes and the state sequence."""
    rho = as_density(rho0)
    outcomes, states = [], [rho]
    for k in range(1, length + 1):
        y, rho = sample_outcome(model.at(k), rho, rng)
        outcomes.append(y)
        states.append(rho)
    return outcomes, states


def batch_sample_step(kmap: PartialKrausMap, rhos: np.ndarray, u: np.ndarray):
    """Vectorized sampling step for a stack of states given uniforms ``u``.

    Returns outcomes (1-based) and next states; no validation.
    """
    br = kmap.branches(rhos)
    y = _inverse_cdf(_probabilities(br), u)
    chosen = np.take_along_axis(br, (y - 1)[:, None, None, None], axis=1)[:, 0]
    return y, hermitian_part(chosen) / trace(chosen)[:, None, None]


def batch_filter_step(kmap: PartialKrausMap, y: np.ndarray, rhos: np.ndarray):
    """Vectorized filter step: per-row outcome ``y`` applied to a stack of states.

    Returns ``(next states, log-likelihoods, floored mask)``; floored rows keep
    their previous state.
    """
    br = kmap.branches(rhos)
    chosen = np.take_along_axis(br, (np.asarray(y) - 1)[:, None, None, None], axis=1)[:, 0]
    tr = trace(chosen)
    ok = tr > VANISHING_TRACE
    safe = np.where(ok, tr, 1.0)
    nxt = np.where(ok[:, None, None], hermitian_part(chosen) / safe[:, None, None], rhos)
    return nxt, np.where(ok, np.log(safe), LOG_FLOOR), ~ok


__all__ = [
    "PartialKrausMap",
    "DiscreteModel",
    "DiscreteRecord",
    "DiscreteFamily",
    "ParticleState",
    "apply_partial",
    "outcome_probabilities",
    "sample_outcome",
    "filter_step",
    "particle_step",
    "filter_record",
    "record_loglik",
    "reset_map",
    "concatenate_records",
    "compose",
    "amplitude_damping_map",
    "random_kraus_map",
    "simulate_trajectory",
    "log_normalize",
]
