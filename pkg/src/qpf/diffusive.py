"""Diffusive stochastic master equations and their positivity-preserving filter.

The production integrator is the partial Kraus map

    K_{dy,dt}(rho) = M rho M^H + sum_nu (1 - eta_nu) dt L_nu rho L_nu^H,
    M = I - (iH + sum_nu L_nu^H L_nu / 2) dt + sum_nu sqrt(eta_nu) dy^nu L_nu,

which is a sum of congruences and therefore keeps ``rho`` positive for any
``dt``. The plain Euler-Maruyama forms (:func:`euler_step`,
:func:`ito_filter_step`) are kept as reference oracles only.

Times are in seconds. Increment vectors ``dy`` only carry the measured
channels (``eta > 0``), in declaration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from qpf.discrete import LOG_FLOOR, ParticleState, log_normalize, reweight
from qpf.errors import (
    DimensionMismatch,
    InvalidParameter,
    MalformedRecord,
    NonPositiveDt,
    VanishingTrace,
)
from qpf.operators import (
    HERMITIAN_TOL,
    VANISHING_TRACE,
    as_density,
    dag,
    hermitian_part,
    max_norm,
    normalize,
    pauli,
    trace,
)

MICROSECOND = 1e-6
DEFAULT_T1_US = 4.15
DEFAULT_TPHI_US = 35.0


@dataclass(frozen=True, eq=False)
class Channel:
    """Lindblad operator ``L`` observed with efficiency ``eta`` (0 = unmonitored)."""

    L: np.ndarray
    eta: float = 0.0

    def __post_init__(self):
        L = np.array(self.L, dtype=complex)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise DimensionMismatch(f"channel operator must be square, got {L.shape}")
        eta = float(self.eta)
        if not 0.0 <= eta <= 1.0:
            raise InvalidParameter(f"efficiency must lie in [0, 1], got {eta}")
        L.setflags(write=False)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "eta", eta)


@dataclass(frozen=True, eq=False)
class DiffusiveModel:
    H: np.ndarray
    channels: tuple[Channel, ...] = ()

    def __post_init__(self):
        H = np.array(self.H, dtype=complex)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise DimensionMismatch(f"Hamiltonian must be square, got {H.shape}")
        if max_norm(H - dag(H)) > HERMITIAN_TOL * max(max_norm(H), 1.0):
            raise InvalidParameter("Hamiltonian is not Hermitian")
        H.setflags(write=False)
        object.__setattr__(self, "H", H)
        channels = tuple(c if isinstance(c, Channel) else Channel(*c) for c in self.channels)
        for c in channels:
            if c.L.shape != H.shape:
                raise DimensionMismatch("channel operators must match the Hamiltonian dimension")
        object.__setattr__(self, "channels", channels)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def measured_indices(self) -> tuple[int, ...]:
        return tuple(i for i, c in enumerate(self.channels) if c.eta > 0.0)

    @property
    def n_measured(self) -> int:
        return len(self.measured_indices)

    # cached operator stacks; the dataclass is frozen so these never go stale
    @cached_property
    def _L(self) -> np.ndarray:
        return np.array([c.L for c in self.channels]).reshape(-1, self.dim, self.dim)

    @cached_property
    def _eta(self) -> np.ndarray:
        return np.array([c.eta for c in self.channels], dtype=float)

    @cached_property
    def _Lm(self) -> np.ndarray:
        return self._L[list(self.measured_indices)]

    @cached_property
    def _sqrt_eta_m(self) -> np.ndarray:
        return np.sqrt(self._eta[list(self.measured_indices)])

    @cached_property
    def _A(self) -> np.ndarray:
        """``iH + sum L^H L / 2``."""
        return 1j * self.H + 0.5 * np.einsum("nji,njk->ik", self._L.conj(), self._L)

    @cached_property
    def _unmonitored(self) -> np.ndarray:
        """``sqrt(1 - eta) L`` for every channel with ``eta < 1``."""
        keep = self._eta < 1.0
        return np.sqrt(1.0 - self._eta[keep])[:, None, None] * self._L[keep]


def qubit_fluorescence_preset(
    T1: float = DEFAULT_T1_US, Tphi: float = DEFAULT_TPHI_US, eta: float = 0.24
) -> DiffusiveModel:
    """Heterodyne-monitored qubit: two quadratures of the decay channel plus dephasing.

    ``T1`` and ``Tphi`` are in microseconds. ``L1 = sqrt(1/(2 T1)) (X - iY)/2``,
    ``L2 = i L1`` (both observed with efficiency ``eta``) and
    ``L3 = sqrt(1/(2 Tphi)) Z`` unmonitored. ``H = 0``.
    """
    if not (T1 > 0 and Tphi > 0):
        raise InvalidParameter("T1 and Tphi must be positive")
    if not 0.0 <= eta <= 1.0:
        raise InvalidParameter(f"eta must lie in [0, 1], got {eta}")
    t1 = T1 * MICROSECOND
    tphi = Tphi * MICROSECOND
    L1 = np.sqrt(1.0 / (2.0 * t1)) * (pauli("X") - 1j * pauli("Y")) / 2.0
    L3 = np.sqrt(1.0 / (2.0 * tphi)) * pauli("Z")
    return DiffusiveModel(
        np.zeros((2, 2), dtype=complex),
        (Channel(L1, eta), Channel(1j * L1, eta), Channel(L3, 0.0)),
    )


def _check_dt(dt: float) -> float:
    dt = float(dt)
    if not dt > 0.0:
        raise NonPositiveDt(f"time step must be positive, got {dt}")
    return dt


def _check_dy(model: DiffusiveModel, dy) -> np.ndarray:
    dy = np.asarray(dy, dtype=float)
    if dy.shape[-1:] != (model.n_measured,):
        raise DimensionMismatch(
            f"increment vector has length {dy.shape[-1:]}, model measures {model.n_measured} channels"
        )
    return dy


def m_operator(model: DiffusiveModel, dy: np.ndarray, dt: float) -> np.ndarray:
    """Unchecked, broadcasting version of :func:`build_m_operator`."""
    eye = np.eye(model.dim, dtype=complex)
    M = eye - model._A * dt
    if model.n_measured:
        M = M + np.einsum("...n,nij->...ij", dy * model._sqrt_eta_m, model._Lm)
    return M


def build_m_operator(model: DiffusiveModel, dy, dt: float) -> np.ndarray:
    return m_operator(model, _check_dy(model, dy), _check_dt(dt))


def kraus_apply(model: DiffusiveModel, dy: np.ndarray, dt: float, rho: np.ndarray) -> np.ndarray:
    """Unnormalized ``K_{dy,dt}(rho)``; broadcasts over leading axes of ``dy``/``rho``."""
    M = m_operator(model, dy, dt)
    out = M @ rho @ dag(M)
    V = model._unmonitored
    if V.shape[0]:
        out = out + dt * np.einsum("nij,...jk,nlk->...il", V, rho, V.conj())
    return out


def kraus_step(model: DiffusiveModel, dy, dt: float, rho) -> tuple[np.ndarray, float]:
    """Normalized partial-Kraus update and the trace that was divided out."""
    dt = _check_dt(dt)
    dy = _check_dy(model, dy)
    rho = as_density(rho)
    return normalize(kraus_apply(model, dy, dt, rho))


def lindblad_drift(model: DiffusiveModel, rho: np.ndarray) -> np.ndarray:
    """``-i[H, rho] + sum_nu D_nu(rho)``."""
    L = model._L
    out = -1j * (model.H @ rho - rho @ model.H)
    if L.shape[0]:
        LdL = np.einsum("nji,njk->ik", L.conj(), L)
        out = out + np.einsum("nij,...jk,nlk->...il", L, rho, L.conj())
        out = out - 0.5 * (LdL @ rho + rho @ LdL)
    return out


def _innovation_ops(model: DiffusiveModel, rho: np.ndarray):
    """Per measured channel: ``sqrt(eta)(L rho + rho L^H - c rho)`` and ``C = sqrt(eta) c``."""
    Lm = model._Lm
    G = np.einsum("nij,...jk->...nik", Lm, rho)
    G = G + dag(G)
    c = trace(G)
    s = model._sqrt_eta_m
    diffusion = s[:, None, None] * (G - c[..., None, None] * rho[..., None, :, :])
    return diffusion, s * c


def measurement_drift(model: DiffusiveModel, rho) -> np.ndarray:
    """Expected signal ``C_nu(rho) = sqrt(eta_nu) tr(L_nu rho + rho L_nu^H)`` per measured channel."""
    rho = np.asarray(rho, dtype=complex)
    G = np.einsum("nij,...jk->...nik", model._Lm, rho)
    return model._sqrt_eta_m * trace(G + dag(G))


def euler_step(model: DiffusiveModel, dW, dt: float, rho) -> np.ndarray:
    """Raw Euler-Maruyama step of the SME driven by Wiener increments ``dW``.

    Not positivity preserving; used as a reference.
    """
    dW = _check_dy(model, dW)
    rho = np.asarray(rho, dtype=complex)
    out = rho + lindblad_drift(model, rho) * dt
    if model.n_measured:
        diffusion, _ = _innovation_ops(model, rho)
        out = out + np.einsum("...n,...nij->...ij", dW, diffusion)
    return out


def ito_filter_step(model: DiffusiveModel, dy, dt: float, rho) -> np.ndarray:
    """Euler step of the innovation-form filter driven by observed increments ``dy``."""
    dy = _check_dy(model, dy)
    rho = np.asarray(rho, dtype=complex)
    out = rho + lindblad_drift(model, rho) * dt
    if model.n_measured:
        diffusion, C = _innovation_ops(model, rho)
        out = out + np.einsum("...n,...nij->...ij", dy - C * dt, diffusion)
    return out


def simulate_step(model: DiffusiveModel, rho, dt: float, rng: np.random.Generator):
    """Sample one output increment and the resulting conditional state."""
    dt = _check_dt(dt)
    rho = as_density(rho)
    dW = rng.standard_normal(model.n_measured) * np.sqrt(dt)
    dy = measurement_drift(model, rho) * dt + dW
    rho_next, _ = normalize(kraus_apply(model, dy, dt, rho))
    return dy, rho_next


@dataclass(frozen=True, eq=False)
class ContinuousRecord:
    """Increments ``dy`` at uniform spacing ``dt``; shape ``(T, n_measured)``."""

    dt: float
    increments: np.ndarray
    initial_state_id: int = 0

    def __post_init__(self):
        inc = np.array(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc.reshape(-1, 1) if inc.size else inc.reshape(0, 0)
        if inc.ndim != 2:
            raise MalformedRecord(f"increments must be 2-D, got shape {inc.shape}")
        if not np.all(np.isfinite(inc)):
            raise MalformedRecord("increments contain non-finite values")
        _check_dt(self.dt)
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self) -> int:
        return self.increments.shape[0]


def record_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Seed of record ``index``; depends only on ``(master_seed, index)``."""
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))


def simulate_records(
    model: DiffusiveModel,
    n_records: int,
    length: int,
    dt: float,
    rho0,
    seed: int,
    initial_state_id: int = 0,
    *,
    return_states: bool = False,
):
    """Simulate independent records, vectorized over records.

    Each record draws its Wiener increments from its own generator
    :func:`record_seed`, so the result does not depend on batching and
    record ``n`` equals ``length`` calls of :func:`simulate_step` with that
    generator. With ``return_states`` the true state trajectories
    ``(n_records, length + 1, d, d)`` are returned as well.
    """
    dt = _check_dt(dt)
    rho0 = as_density(rho0)
    nm = model.n_measured
    noise = np.empty((n_records, length, nm))
    for n in range(n_records):
        noise[n] = np.random.default_rng(record_seed(seed, n)).standard_normal((length, nm))
    noise *= np.sqrt(dt)
    rho = np.broadcast_to(rho0, (n_records,) + rho0.shape).copy()
    inc = np.empty_like(noise)
    states = np.empty((n_records, length + 1) + rho0.shape, dtype=complex) if return_states else None
    if return_states:
        states[:, 0] = rho
    for k in range(length):
        dy = measurement_drift(model, rho) * dt + noise[:, k]
        inc[:, k] = dy
        rho = _normalize_stack(kraus_apply(model, dy, dt, rho))[0]
        if return_states:
            states[:, k + 1] = rho
    records = [ContinuousRecord(dt, inc[n], initial_state_id) for n in range(n_records)]
    return (records, states) if return_states else records


def _normalize_stack(K: np.ndarray):
    tr = trace(K)
    ok = tr > VANISHING_TRACE
    safe = np.where(ok, tr, 1.0)
    return hermitian_part(K) / safe[..., None, None], tr, ok


@dataclass(frozen=True, eq=False)
class ParameterizedFamily:
    """Candidate models ``p_l -> model``; all must read the same records."""

    labels: tuple
    models: tuple[DiffusiveModel, ...]

    def __post_init__(self):
        labels = tuple(self.labels)
        models = tuple(self.models)
        if len(labels) != len(models) or not models:
            raise InvalidParameter("need one model per label and at least one hypothesis")
        if len(set(labels)) != len(labels):
            raise InvalidParameter("hypothesis labels must be distinct")
        if len({(m.dim, m.n_measured) for m in models}) != 1:
            raise DimensionMismatch("hypotheses must share dimension and measured-channel count")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "models", models)

    @property
    def r(self) -> int:
        return len(self.models)

    @property
    def dim(self) -> int:
        return self.models[0].dim

    @property
    def n_measured(self) -> int:
        return self.models[0].n_measured


def eta_family(etas: Sequence[float], T1: float = DEFAULT_T1_US, Tphi: float = DEFAULT_TPHI_US):
    """Qubit fluorescence hypotheses differing only in detection efficiency."""
    etas = tuple(float(e) for e in etas)
    return ParameterizedFamily(etas, tuple(qubit_fluorescence_preset(T1, Tphi, e) for e in etas))


def particle_step_diffusive(
    family: ParameterizedFamily, dy, dt: float, state: ParticleState
) -> ParticleState:
    """Advance every hypothesis with its own Kraus map and reweight by the traces."""
    dt = _check_dt(dt)
    dy = _check_dy(family.models[0], dy)
    if state.r != family.r:
        raise DimensionMismatch(f"{family.r} models for {state.r} hypotheses")
    rhos = state.rhos.copy()
    logliks = np.empty(state.r)
    floored = np.zeros(state.r, dtype=bool)
    for l, model in enumerate(family.models):
        try:
            rhos[l], tr = normalize(kraus_apply(model, dy, dt, state.rhos[l]))
            logliks[l] = np.log(tr)
        except VanishingTrace:
            logliks[l] = LOG_FLOOR
            floored[l] = True
    return reweight(state, rhos, logliks, floored)


def batch_logliks(family: ParameterizedFamily, increments: np.ndarray, dt: float, rho0: np.ndarray):
    """Per-record log-likelihoods for equal-length records, vectorized over records.

    ``increments`` has shape ``(N, T, n_measured)`` and ``rho0`` ``(N, d, d)``.
    Returns ``(loglik, floors)`` of shape ``(N, r)``.
    """
    dt = _check_dt(dt)
    N, T = increments.shape[:2]
    ll = np.zeros((N, family.r))
    floors = np.zeros((N, family.r), dtype=np.int64)
    for l, model in enumerate(family.models):
        rho = np.array(rho0, dtype=complex)
        for k in range(T):
            K = kraus_apply(model, increments[:, k], dt, rho)
            nxt, tr, ok = _normalize_stack(K)
            rho = np.where(ok[:, None, None], nxt, rho)
            ll[:, l] += np.where(ok, np.log(np.where(ok, tr, 1.0)), LOG_FLOOR)
            floors[:, l] += ~ok
    return ll, floors


def batch_filter(family: ParameterizedFamily, increments: np.ndarray, dt: float, rho0: np.ndarray, prior=None):
    """Particle filter over ``N`` independent equal-length records at once.

    Returns per-step arrays ``pi`` of shape ``(N, T + 1, r)`` and the
    hypothesis states ``(N, T + 1, r, d, d)``.
    """
    N, T = increments.shape[:2]
    r, d = family.r, family.dim
    prior = np.full(r, 1.0 / r) if prior is None else np.asarray(prior, dtype=float)
    with np.errstate(divide="ignore"):
        log_pi = np.broadcast_to(np.log(prior), (N, r)).copy()
    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (N, d, d))
    rho = np.repeat(rho[:, None], r, axis=1)
    pis = np.empty((N, T + 1, r))
    states = np.empty((N, T + 1, r, d, d), dtype=complex)
    pis[:, 0] = np.exp(log_pi)
    states[:, 0] = rho
    for k in range(T):
        step_ll = np.empty((N, r))
        for l, model in enumerate(family.models):
            nxt, tr, ok = _normalize_stack(kraus_apply(model, increments[:, k], dt, rho[:, l]))
            rho[:, l] = np.where(ok[:, None, None], nxt, rho[:, l])
            step_ll[:, l] = np.where(ok, np.log(np.where(ok, tr, 1.0)), LOG_FLOOR)
        log_pi = log_normalize(log_pi + step_ll)
        pis[:, k + 1] = np.exp(log_pi)
        states[:, k + 1] = rho
    return pis, states
