import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rslcad import rsl
from rslcad.network import build_tiny_network, init_model
from rslcad.rsl import (
    BatchErrorReport,
    BatchPartition,
    Dataset,
    PiecewiseEpochMap,
    Termination,
    TrainingError,
    compute_threshold,
    conventional_train,
    partition_batches,
    remedial_epochs,
    rsl_train,
)

DEFAULT = PiecewiseEpochMap()


def toy_data(n, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.normal(0, 0.3, (n, 1, 12, 12))
    images[labels == 1, :, 4:8, 4:8] += 1.5
    return Dataset(images, labels)


def record_steps(monkeypatch):
    """Wrap the scheduler's train_step to log the sample indices of every call."""
    calls = []
    real = rsl.train_step

    def spy(model, images, labels, lr):
        calls.append(images)
        return real(model, images, labels, lr)

    monkeypatch.setattr(rsl, "train_step", spy)
    return calls


# --- partition -------------------------------------------------------------

def test_partition_chunks():
    part = partition_batches(10, 4, seed=1)
    assert part.sizes == [4, 4, 2]
    assert sorted(np.concatenate(part.batches).tolist()) == list(range(10))


def test_partition_deterministic_and_seed_sensitive():
    a, b = partition_batches(100, 10, 3), partition_batches(100, 10, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.batches, b.batches))
    for s in range(5):
        p, q = partition_batches(100, 10, 2 * s), partition_batches(100, 10, 2 * s + 1)
        assert not all(np.array_equal(x, y) for x, y in zip(p.batches, q.batches))


def test_partition_oversized_batch(caplog):
    with caplog.at_level("INFO"):
        part = partition_batches(5, 9, 0)
    assert part.sizes == [5] and "exceeds" in caplog.text


def test_partition_validation():
    with pytest.raises(ValueError):
        partition_batches(0, 3, 0)
    with pytest.raises(ValueError, match="overlap"):
        BatchPartition((np.array([0, 1]), np.array([1, 2])), 0)
    with pytest.raises(ValueError, match="cover"):
        BatchPartition((np.array([0, 2]),), 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(1, 50), st.integers(0, 2**31))
def test_partition_is_disjoint_cover(n, bs, seed):
    part = partition_batches(n, bs, seed)
    joined = np.concatenate(part.batches)
    assert np.array_equal(np.sort(joined), np.arange(n))
    assert all(s == bs for s in part.sizes[:-1]) and 1 <= part.sizes[-1] <= bs


# --- threshold and map -----------------------------------------------------

def test_threshold_examples():
    assert compute_threshold(BatchErrorReport(1, (0.1, 0.2, 0.3))) == pytest.approx(0.2, abs=1e-15)
    assert compute_threshold([0.35] * 7) == 0.35
    assert compute_threshold([0.4]) == 0.4
    with pytest.raises(ValueError):
        compute_threshold([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_threshold_between_min_and_max(errors):
    c = compute_threshold(errors)
    assert min(errors) <= c <= max(errors)


def test_remedial_examples():
    assert remedial_epochs(0.3, 0.3, DEFAULT) == 0
    assert remedial_epochs(0.30, 0.20, DEFAULT) == 2
    assert remedial_epochs(0.45, 0.25, DEFAULT) == 3
    assert DEFAULT(0.05) == 1 and DEFAULT(0.0500001) == 2 and DEFAULT(0.15) == 2 and DEFAULT(0.16) == 3
    assert DEFAULT(-0.4) == 0 and DEFAULT(1e-12) == 1


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_map_monotone_and_zero_below(d1, d2):
    lo, hi = sorted((d1, d2))
    assert DEFAULT(lo) <= DEFAULT(hi)
    if lo <= 0:
        assert DEFAULT(lo) == 0


def test_map_parse_format_round_trip():
    m = PiecewiseEpochMap.parse("0.05:1, 0.15:2, inf:3")
    assert m == DEFAULT
    assert PiecewiseEpochMap.parse(m.format()) == m
    assert PiecewiseEpochMap.parse("inf:0").is_zero
    assert PiecewiseEpochMap.zero() == PiecewiseEpochMap.parse("inf:0")


@pytest.mark.parametrize("text", ["0.05:1, 0.15:2", "0.1:2, 0.05:3, inf:4", "0.1:3, inf:1", "", "0.1-1, inf:2"])
def test_map_parse_rejects(text):
    with pytest.raises(ValueError):
        PiecewiseEpochMap.parse(text)


# --- termination -----------------------------------------------------------

def test_termination_rules():
    t = Termination(max_epochs=5)
    assert not t.should_stop([0.5] * 4) and t.should_stop([0.5] * 5)
    t = Termination(max_epochs=100, target_train_error=0.2)
    assert not t.should_stop([0.3, 0.21]) and t.should_stop([0.3, 0.2])
    t = Termination(max_epochs=100, plateau_window=3, plateau_delta=0.001)
    assert not t.should_stop([0.5, 0.4, 0.3])
    assert t.should_stop([0.5, 0.4, 0.3, 0.3, 0.3, 0.2995])
    assert not t.should_stop([0.5, 0.4, 0.3, 0.3, 0.3, 0.29])


# --- training loop ---------------------------------------------------------

def test_single_epoch_instrumented(monkeypatch):
    model = init_model(build_tiny_network(), seed=0)
    fc = model.params[-2]
    fc.weights[:] = 0.0
    fc.bias[:] = [5.0, 0.0]  # every image predicted benign
    data = Dataset(np.zeros((4, 1, 12, 12)), np.array([0, 0, 0, 1]))
    part = BatchPartition((np.array([0, 1]), np.array([2, 3])), seed=0)
    calls = record_steps(monkeypatch)
    _, log = rsl_train(model, data, part, DEFAULT, 1e-6, Termination(max_epochs=1))
    (rec,) = log.records
    assert rec.batch_errors == (0.0, 0.5)
    assert rec.threshold == 0.25
    assert rec.remedial == {1: 3}
    assert 0 not in rec.remedial
    assert rec.update_passes == 2 + 3 and rec.remedial_epochs_total == 3
    assert rec.train_error == 0.25
    # main pass in partition order, then three passes on batch 2 alone
    assert len(calls) == 5
    for call, expected in zip(calls, [[0, 1], [2, 3], [2, 3], [2, 3], [2, 3]]):
        np.testing.assert_array_equal(call, data.images[expected])


@pytest.fixture(scope="module")
def toy():
    data = toy_data(24)
    return data, partition_batches(24, 5, seed=4)


def test_scheduler_invariants_every_epoch(toy, monkeypatch):
    data, part = toy
    calls = record_steps(monkeypatch)
    _, log = rsl_train(init_model(build_tiny_network(), 1), data, part, DEFAULT, 0.05, Termination(max_epochs=8))
    assert len(log.records) == 8
    prev_passes = prev_total = 0
    saw_remedial = False
    for rec in log.records:
        assert len(rec.batch_errors) == len(part)
        assert min(rec.batch_errors) <= rec.threshold <= max(rec.batch_errors)
        assert rec.threshold == pytest.approx(np.mean(rec.batch_errors), abs=1e-15)
        over = [i for i, e in enumerate(rec.batch_errors) if e > rec.threshold]
        expected = {i: DEFAULT(rec.batch_errors[i] - rec.threshold) for i in over}
        assert {i: n for i, n in expected.items() if n} == rec.remedial
        assert all(i in over for i in rec.remedial)
        extra = sum(expected.values())
        assert rec.update_passes - prev_passes == len(part) + extra
        assert rec.remedial_epochs_total - prev_total == extra
        prev_passes, prev_total = rec.update_passes, rec.remedial_epochs_total
        saw_remedial |= extra > 0
        assert 0.0 <= rec.train_error <= 1.0
        assert math.isnan(rec.val_error)  # no validation set given
    assert saw_remedial
    assert len(calls) == log.records[-1].update_passes


def test_zero_map_equals_conventional(toy):
    data, part = toy
    a_model, a = rsl_train(init_model(build_tiny_network(), 2), data, part, PiecewiseEpochMap.zero(), 0.05,
                           Termination(max_epochs=4), validation=data)
    b_model, b = conventional_train(init_model(build_tiny_network(), 2), data, part, 0.05,
                                    Termination(max_epochs=4), validation=data)
    for ra, rb in zip(a.records, b.records):
        assert (ra.batch_errors, ra.threshold, ra.remedial, ra.update_passes, ra.train_error, ra.val_error,
                ra.mean_loss) == (rb.batch_errors, rb.threshold, rb.remedial, rb.update_passes, rb.train_error,
                                  rb.val_error, rb.mean_loss)
    for x, y in zip(a_model.param_arrays(), b_model.param_arrays()):
        assert x.tobytes() == y.tobytes()


def test_conventional_passes_equal_batches_per_epoch(toy):
    data, part = toy
    _, log = conventional_train(init_model(build_tiny_network(), 0), data, part, 0.05, Termination(max_epochs=3))
    assert [r.update_passes for r in log.records] == [len(part), 2 * len(part), 3 * len(part)]
    assert all(r.remedial == {} and r.remedial_epochs_total == 0 for r in log.records)


def test_rsl_run_is_reproducible(toy):
    data, part = toy

    def run():
        m, log = rsl_train(init_model(build_tiny_network(), 5), data, part, DEFAULT, 0.05, Termination(max_epochs=3),
                           validation=data)
        return [(r.batch_errors, r.remedial, r.train_error, r.val_error, r.mean_loss) for r in log.records], m

    (la, ma), (lb, mb) = run(), run()
    assert la == lb
    assert all(x.tobytes() == y.tobytes() for x, y in zip(ma.param_arrays(), mb.param_arrays()))


def test_training_error_has_context(toy):
    data, part = toy
    model = init_model(build_tiny_network(), 0)
    model.params[-2].bias[:] = [np.inf, 0.0]
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match="epoch 1, batch 0"):
        rsl_train(model, data, part, DEFAULT, 0.05, Termination(max_epochs=1))


def test_partition_must_match_dataset(toy):
    data, _ = toy
    with pytest.raises(ValueError, match="partition covers"):
        rsl_train(init_model(build_tiny_network(), 0), data, partition_batches(10, 5, 0), DEFAULT, 0.1)
