"""Property suites run by ``qpf validate`` and by the acceptance tests.

Each suite returns a list of :class:`Check` results carrying the measured
quantity next to its threshold, so reports show margins and not just a
verdict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qpf.diffusive import (
    Channel,
    DiffusiveModel,
    eta_family,
    simulate_records,
    ito_filter_step,
    kraus_apply,
    lindblad_drift,
    measurement_drift,
    qubit_fluorescence_preset,
    MICROSECOND,
)
from qpf.discrete import (
    DiscreteFamily,
    DiscreteModel,
    DiscreteRecord,
    PartialKrausMap,
    amplitude_damping_map,
    concatenate_records,
    filter_record,
    random_kraus_map,
    record_loglik,
    simulate_trajectory,
)
from qpf.errors import UnknownSuite
from qpf.estimation import EstimationTask, PosteriorTrace, run_estimation, submartingale_diagnostic
from qpf.operators import dag, hermitian_part, pauli, random_density, trace

PLUS = (np.eye(2) + pauli("X")) / 2


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        text = f"[{verdict}] {self.name}: measured={self.measured:.6g} threshold={self.threshold:.6g}"
        return f"{text} ({self.detail})" if self.detail else text


def _normalized(K: np.ndarray) -> np.ndarray:
    return hermitian_part(K) / trace(K)[..., None, None]


def random_diffusive_model(rng: np.random.Generator, dim: int | None = None) -> tuple[DiffusiveModel, float]:
    """Random model with 1-3 channels; returns it with its shortest time constant."""
    dim = int(rng.integers(2, 5)) if dim is None else dim
    g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    H = hermitian_part(g) * rng.uniform(0, 2)
    channels = []
    for _ in range(int(rng.integers(1, 4))):
        L = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) * rng.uniform(0.2, 2)
        eta = float(rng.choice([0.0, 1.0, rng.uniform()]))
        channels.append(Channel(L, eta))
    model = DiffusiveModel(H, tuple(channels))
    rate = max(np.linalg.norm(c.L.conj().T @ c.L, 2) for c in channels)
    return model, 1.0 / rate


def positivity(seed: int = 0, n: int = 10_000) -> list[Check]:
    """Kraus steps at coarse and extreme step sizes never leave the state space."""
    rng = np.random.default_rng(seed)
    min_eig, max_tr_err = np.inf, 0.0
    preset = qubit_fluorescence_preset(eta=0.26)
    t1 = 4.15 * MICROSECOND
    for i in range(n):
        if i % 4 == 0:
            model, tau = preset, t1
        else:
            model, tau = random_diffusive_model(rng)
        dt = tau * 10 ** rng.uniform(-3, np.log10(0.5))
        rho = random_density(model.dim, rng, rank=int(rng.integers(1, model.dim + 1)))
        scale = rng.choice([1.0, 3.0, 30.0])
        dy = measurement_drift(model, rho) * dt + scale * np.sqrt(dt) * rng.standard_normal(model.n_measured)
        out = _normalized(kraus_apply(model, dy, dt, rho))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(out).min()))
        max_tr_err = max(max_tr_err, abs(float(np.trace(out).real) - 1.0))
    return [
        Check("positivity: min eigenvalue", min_eig >= -1e-10, min_eig, -1e-10, f"{n} steps, dt up to 0.5 tau"),
        Check("positivity: trace after normalization", max_tr_err <= 1e-10, max_tr_err, 1e-10),
    ]


def quadratic_variation_term(model: DiffusiveModel, dy: np.ndarray, dt: float, rho: np.ndarray) -> np.ndarray:
    """Leading gap between the normalized Kraus step and the Ito filter step.

    The two agree once ``dy^nu dy^mu`` is replaced by ``delta_{nu mu} dt``;
    pathwise the difference is, to O(dt^{3/2}),
    ``sum_{nu,mu} a_nu a_mu (dy^nu dy^mu - delta dt) Q_{nu mu}(rho)`` with
    ``a = sqrt(eta)`` and
    ``Q_{nu mu} = L_nu rho L_mu^H - tr(L_nu rho L_mu^H) rho - c_mu (G_nu - c_nu rho)``,
    ``G_nu = L_nu rho + rho L_nu^H``, ``c_nu = tr G_nu``.
    """
    L = model._Lm
    a = model._sqrt_eta_m
    G = L @ rho + rho @ dag(L)
    c = trace(G)
    out = np.zeros_like(rho)
    for nu in range(len(a)):
        for mu in range(len(a)):
            w = a[nu] * a[mu] * (dy[nu] * dy[mu] - (dt if nu == mu else 0.0))
            LrL = L[nu] @ rho @ dag(L[mu])
            Q = LrL - np.trace(LrL) * rho - c[mu] * (G[nu] - c[nu] * rho)
            out = out + w * Q
    return out


def step_halving(seed: int = 0, n_seeds: int = 100, corrected: bool = False):
    """Mean one-step gap between Kraus+normalize and the Ito filter for dt/T1 in {1e-2, 5e-3, 2.5e-3}.

    Each seed fixes a random initial state and standard normal draws that are
    reused (scaled by sqrt(dt)) across the three step sizes. Returns the step
    sizes, mean gaps and successive ratios.
    """
    model = qubit_fluorescence_preset(eta=0.26)
    t1 = 4.15 * MICROSECOND
    dts = np.array([1e-2, 5e-3, 2.5e-3]) * t1
    errs = np.zeros((n_seeds, len(dts)))
    for s in range(n_seeds):
        rng = np.random.default_rng([seed, s])
        rho = random_density(2, rng)
        xi = rng.standard_normal(model.n_measured)
        for j, dt in enumerate(dts):
            dy = measurement_drift(model, rho) * dt + np.sqrt(dt) * xi
            gap = _normalized(kraus_apply(model, dy, dt, rho)) - ito_filter_step(model, dy, dt, rho)
            if corrected:
                gap = gap - quadratic_variation_term(model, dy, dt, rho)
            errs[s, j] = np.max(np.abs(gap))
    mean = errs.mean(axis=0)
    return dts, mean, mean[:-1] / mean[1:]


def weak_consistency(seed: int = 0, n: int = 10_000) -> Check:
    """Ensemble mean of a Kraus step reproduces the Lindblad drift."""
    rng = np.random.default_rng(seed)
    model = qubit_fluorescence_preset(eta=0.5)
    dt = 0.01 * 4.15 * MICROSECOND
    rho = random_density(2, rng)
    dy = measurement_drift(model, rho) * dt + np.sqrt(dt) * rng.standard_normal((n, model.n_measured))
    out = _normalized(kraus_apply(model, dy, dt, np.broadcast_to(rho, (n, 2, 2))))
    delta = out - rho
    target = lindblad_drift(model, rho) * dt
    err = np.abs(delta.mean(axis=0) - target)
    se = delta.std(axis=0) / np.sqrt(n)
    rate_dt = dt / (4.15 * MICROSECOND)
    slack = 4 * se + rate_dt**2
    worst = float(np.max(err / slack))
    return Check("weak consistency: mean step vs Lindblad drift (error / tolerance)", worst <= 1.0, worst, 1.0,
                 f"{n} samples, tolerance 4 SE + (dt/T1)^2 per entry")


def multichannel_reduction(seed: int = 0) -> Check:
    """Unused zero channels do not change the single-channel formulas."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(50):
        single, _ = random_diffusive_model(rng, dim=3)
        ch = Channel(single.channels[0].L, float(rng.uniform(0.1, 1.0)))
        one = DiffusiveModel(single.H, (ch,))
        zero = np.zeros((3, 3))
        many = DiffusiveModel(single.H, (Channel(zero, 0.0), ch, Channel(zero, 0.0)))
        rho = random_density(3, rng)
        dt = float(rng.uniform(1e-3, 1e-1))
        dy = rng.standard_normal(1) * np.sqrt(dt)
        for f in (kraus_apply, ito_filter_step):
            worst = max(worst, float(np.max(np.abs(f(one, dy, dt, rho) - f(many, dy, dt, rho)))))
    return Check("multi-channel reduction to one channel", worst <= 1e-12, worst, 1e-12)


def consistency(seed: int = 0) -> list[Check]:
    _, raw, raw_ratio = step_halving(seed)
    _, cor, cor_ratio = step_halving(seed, corrected=True)
    return [
        Check("step halving: raw pathwise gap ratio", bool(raw_ratio.min() >= 2.5), float(raw_ratio.min()), 2.5,
              "gaussian increments, 100 seeds, gaps " + ", ".join(f"{e:.3e}" for e in raw)),
        Check("step halving: gap minus quadratic-variation term", bool(cor_ratio.min() >= 2.5),
              float(cor_ratio.min()), 2.5, "gaps " + ", ".join(f"{e:.3e}" for e in cor)),
        weak_consistency(seed),
        multichannel_reduction(seed),
    ]


def rotated_damping_family(gammas, theta: float = 0.4) -> DiscreteFamily:
    """Amplitude-damping measurement preceded by a fixed X rotation, one model per gamma."""
    U = np.cos(theta / 2) * np.eye(2) - 1j * np.sin(theta / 2) * pauli("X")
    models = []
    for g in gammas:
        base = amplitude_damping_map(g)
        models.append(DiscreteModel(PartialKrausMap(tuple(ops @ U for ops in base.ops))))
    return DiscreteFamily(tuple(gammas), tuple(models))


def submartingale(seed: int = 0, n_traj: int = 2000, length: int = 20) -> list[Check]:
    checks = []
    fam = eta_family((0.10, 0.26))
    dt = 0.2 * MICROSECOND
    matched = submartingale_diagnostic(fam, 0.26, n_traj, length, PLUS, PLUS, seed=seed, dt=dt)
    mismatched = submartingale_diagnostic(fam, 0.26, n_traj, length, PLUS, np.eye(2) / 2, seed=seed + 1, dt=dt)
    checks.append(Check("diffusive, matched rho0: pi increasing", matched.pi.passed, matched.pi.margin, 0.0))
    checks.append(Check("diffusive, mismatched rho0: pi*F increasing", mismatched.pi_fidelity.passed,
                        mismatched.pi_fidelity.margin, 0.0))
    disc = rotated_damping_family((0.2, 0.5))
    m1 = submartingale_diagnostic(disc, 0.5, n_traj, length, PLUS, PLUS, seed=seed + 2)
    m2 = submartingale_diagnostic(disc, 0.5, n_traj, length, PLUS, np.eye(2) / 2, seed=seed + 3)
    checks.append(Check("discrete r=2, matched rho0: pi increasing", m1.pi.passed, m1.pi.margin, 0.0))
    checks.append(Check("discrete r=2, mismatched rho0: pi*F increasing", m2.pi_fidelity.passed,
                        m2.pi_fidelity.margin, 0.0))
    disc3 = rotated_damping_family((0.2, 0.35, 0.5))
    m3 = submartingale_diagnostic(disc3, 0.35, n_traj, length, PLUS, np.eye(2) / 2, seed=seed + 4)
    checks.append(Check("discrete r=3, mismatched rho0: pi*F increasing", m3.pi_fidelity.passed,
                        m3.pi_fidelity.margin, 0.0))
    return checks


def random_discrete_task(rng: np.random.Generator):
    """Random hypotheses, prior, initial states and records simulated under one hypothesis."""
    dim = int(rng.integers(2, 4))
    m = int(rng.integers(2, 4))
    r = int(rng.integers(2, 5))
    models = tuple(DiscreteModel(random_kraus_map(dim, m, rng)) for _ in range(r))
    family = DiscreteFamily(tuple(range(r)), models)
    prior = rng.dirichlet(np.ones(r))
    states = {i: random_density(dim, rng) for i in range(3)}
    truth = models[int(rng.integers(r))]
    records = []
    for _ in range(int(rng.integers(1, 5))):
        sid = int(rng.integers(3))
        outcomes, _ = simulate_trajectory(truth, states[sid], int(rng.integers(1, 15)), rng)
        records.append(DiscreteRecord(tuple(outcomes), sid))
    return family, prior, states, records


def maxlike(seed: int = 0, n_tasks: int = 50) -> list[Check]:
    """Posterior log-odds equal prior log-odds plus log-likelihood ratios.

    The posterior comes from the step-by-step filter on the concatenated
    record (with reset maps); the likelihoods from independent per-record
    filtering.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_tasks):
        family, prior, states, records = random_discrete_task(rng)
        per_record = sum(record_loglik(family.models, rec.outcomes, states[rec.initial_state_id])[0]
                         for rec in records)
        concat = [concatenate_records(records, m, states) for m in family.models]
        record = concat[0][0]
        state = filter_record([c[1] for c in concat], record.outcomes, states[record.initial_state_id], prior)
        lhs = state.log_pi - state.log_pi[0] - (np.log(prior) - np.log(prior[0]))
        rhs = per_record - per_record[0]
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return [Check("maxlike identity on concatenated records", worst <= 1e-9, worst, 1e-9, f"{n_tasks} random tasks")]


def eta_discrimination(
    truth: float,
    candidates,
    seed: int,
    n_records: int = 2000,
    length: int = 50,
    dt: float = 0.2 * MICROSECOND,
    checkpoint_every: int = 100,
    workers: int = 1,
) -> PosteriorTrace:
    """Simulate fluorescence records at efficiency ``truth`` and filter them over ``candidates``.

    Every record starts from ``(I + X)/2`` with the default T1 and Tphi.
    """
    records = simulate_records(qubit_fluorescence_preset(eta=truth), n_records, length, dt, PLUS, seed)
    task = EstimationTask(eta_family(candidates), records, {0: PLUS})
    return run_estimation(task, checkpoint_every, workers=workers)


SUITES = {
    "positivity": positivity,
    "consistency": consistency,
    "submartingale": submartingale,
    "maxlike": maxlike,
}


def run_suite(name: str, seed: int = 0) -> list[Check]:
    try:
        suite = SUITES[name]
    except KeyError:
        raise UnknownSuite(f"unknown suite {name!r}; choose from {', '.join(SUITES)}") from None
    return suite(seed)
