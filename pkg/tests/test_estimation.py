import numpy as np
import pytest

from qpf.diffusive import (
    MICROSECOND,
    ContinuousRecord,
    ParameterizedFamily,
    eta_family,
    qubit_fluorescence_preset,
    simulate_records,
)
from qpf.discrete import DiscreteFamily, DiscreteModel, DiscreteRecord, amplitude_damping_map
from qpf.errors import InvalidConfiguration, MalformedRecord, NonScalarParameter, UnknownInitialState
from qpf.estimation import (
    Checkpoint,
    EstimationTask,
    PosteriorTrace,
    parallel_loglik,
    record_logliks,
    refine_grid,
    run_estimation,
    submartingale_diagnostic,
)
from qpf.suites import PLUS, random_discrete_task

DT = 0.2 * MICROSECOND


@pytest.fixture(scope="module")
def qubit_task():
    records = simulate_records(qubit_fluorescence_preset(eta=0.26), 100, 20, DT, PLUS, seed=5)
    return EstimationTask(eta_family((0.1, 0.26, 0.4)), records, {0: PLUS})


def _trace(pi, labels=(0.10, 0.26, 0.40)):
    pi = np.asarray(pi, dtype=float)
    return PosteriorTrace(tuple(labels), (Checkpoint(1, pi, np.zeros(len(pi))),), np.zeros(len(pi), dtype=int))


def test_identical_hypotheses_stay_at_prior():
    model = qubit_fluorescence_preset(eta=0.3)
    records = simulate_records(model, 10, 15, DT, PLUS, seed=1)
    task = EstimationTask(ParameterizedFamily(("a", "b"), (model, model)), records, {0: PLUS}, prior=[0.25, 0.75])
    trace = run_estimation(task, checkpoint_every=3)
    for cp in trace.checkpoints:
        np.testing.assert_allclose(cp.pi, [0.25, 0.75], atol=1e-12)
    assert [cp.records_processed for cp in trace.checkpoints] == [0, 3, 6, 9, 10]


def test_discrete_bayes_by_hand():
    family = DiscreteFamily((0.2, 0.6), tuple(DiscreteModel(amplitude_damping_map(g)) for g in (0.2, 0.6)))
    records = [DiscreteRecord((2,), 0), DiscreteRecord((1,), 0)]
    trace = run_estimation(EstimationTask(family, records, {0: np.eye(2) / 2}))
    # y=2 has probability g/2, y=1 has 1 - g/2
    np.testing.assert_allclose(trace.checkpoints[1].pi, [0.25, 0.75], atol=1e-14)
    w = np.array([0.1 * 0.9, 0.3 * 0.7])
    np.testing.assert_allclose(trace.final.pi, w / w.sum(), atol=1e-14)
    np.testing.assert_allclose(trace.final.loglik, np.log(w), atol=1e-14)


def test_trace_is_deterministic_and_normalized(qubit_task):
    a = run_estimation(qubit_task, checkpoint_every=7)
    b = run_estimation(qubit_task, checkpoint_every=7)
    for x, y in zip(a.checkpoints, b.checkpoints):
        np.testing.assert_array_equal(x.pi, y.pi)
        assert abs(x.pi.sum() - 1) <= 1e-9
    assert a.final.records_processed == 100


@pytest.mark.parametrize("workers", [1, 2, 3, 8, 500])
def test_worker_count_invariance(qubit_task, workers):
    reference = run_estimation(qubit_task).final.loglik
    np.testing.assert_allclose(parallel_loglik(qubit_task, workers), reference, rtol=0, atol=1e-12)
    trace = run_estimation(qubit_task, 10, workers=workers)
    np.testing.assert_allclose(trace.final.loglik, reference, rtol=0, atol=1e-12)


def test_workers_from_environment(qubit_task, monkeypatch):
    monkeypatch.setenv("QPF_WORKERS", "4")
    np.testing.assert_allclose(parallel_loglik(qubit_task), run_estimation(qubit_task).final.loglik, atol=1e-12)


def test_single_record_equals_run_estimation(qubit_task):
    task = EstimationTask(qubit_task.family, qubit_task.records[:1], qubit_task.initial_states)
    np.testing.assert_array_equal(parallel_loglik(task, 1), run_estimation(task).final.loglik)


def test_mixed_lengths_are_grouped(qubit_task):
    short = simulate_records(qubit_fluorescence_preset(eta=0.26), 3, 7, DT, PLUS, seed=9)
    records = list(qubit_task.records[:5]) + short + [ContinuousRecord(DT, np.zeros((0, 2)))]
    task = EstimationTask(qubit_task.family, records, {0: PLUS})
    ll, _ = record_logliks(task)
    for i in (0, 6, 8):
        single, _ = record_logliks(task, [i])
        np.testing.assert_allclose(ll[i], single[0], atol=1e-13)
    np.testing.assert_array_equal(ll[8], 0.0)


def test_maxlike_winner_agrees(qubit_task):
    trace = run_estimation(qubit_task)
    ll = parallel_loglik(qubit_task, 4)
    assert trace.winner == qubit_task.labels[int(np.argmax(ll + qubit_task.log_prior))]


def test_task_errors(qubit_task):
    with pytest.raises(InvalidConfiguration):
        run_estimation(EstimationTask(qubit_task.family, [], {0: PLUS}))
    with pytest.raises(UnknownInitialState):
        run_estimation(EstimationTask(qubit_task.family, [ContinuousRecord(DT, np.zeros((2, 2)), 3)], {0: PLUS}))
    with pytest.raises(MalformedRecord):
        run_estimation(EstimationTask(qubit_task.family, [ContinuousRecord(DT, np.zeros((2, 1)))], {0: PLUS}))
    with pytest.raises(MalformedRecord):
        run_estimation(EstimationTask(qubit_task.family, [DiscreteRecord((1,))], {0: PLUS}))


def test_refine_grid_examples():
    fine = refine_grid(_trace([0.01, 0.98, 0.01]), shrink=1 / 6)
    assert fine.candidates == pytest.approx((0.235, 0.26, 0.285), abs=1e-12)
    assert fine.winner == 0.26
    assert fine.discriminated
    assert fine.half_spacing == pytest.approx(0.075)


def test_refine_grid_clips_at_edges():
    top = refine_grid(_trace([0.0, 0.02, 0.98], labels=(0.8, 0.9, 0.99)), shrink=0.9)
    assert max(top.candidates) <= 1.0
    assert len(top.candidates) == 3
    wide = refine_grid(_trace([0.0, 0.0, 1.0], labels=(-1.0, 0.5, 2.0)), shrink=0.9)
    assert wide.candidates == (0.0, 0.5, 1.0)


def test_no_discrimination_flag():
    result = refine_grid(_trace([0.55, 0.45], labels=(0.240, 0.245)), shrink=0.5)
    assert not result.discriminated
    assert result.winner == 0.240


def test_refine_grid_needs_scalars():
    with pytest.raises(NonScalarParameter):
        refine_grid(_trace([0.5, 0.5], labels=("a", "b")))


def test_degenerate_single_hypothesis():
    family = eta_family((0.26,))
    report = submartingale_diagnostic(family, 0.26, 50, 5, PLUS, np.eye(2) / 2, seed=0, dt=DT)
    np.testing.assert_array_equal(report.pi.mean, 1.0)
    assert report.pi.passed and report.pi_fidelity.passed


def test_random_discrete_factorization():
    rng = np.random.default_rng(0)
    for _ in range(10):
        family, prior, states, records = random_discrete_task(rng)
        task = EstimationTask(family, records, states, prior)
        ll = parallel_loglik(task, 3)
        trace = run_estimation(task)
        w = np.log(prior) + ll
        np.testing.assert_allclose(trace.final.pi, np.exp(w - w.max()) / np.exp(w - w.max()).sum(), atol=1e-12)
