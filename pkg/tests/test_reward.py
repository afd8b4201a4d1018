import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from advrm.errors import ConfigError, NumericError, StateError
from advrm.numerics import init_mlp, mlp_forward
from advrm.reward import (RMConfig, UncertaintyReference, bt_loss_from_features, disagreement, disagreement_values,
                          pair_accuracy, score, train_rm, training_order, uncertainty_zscore)


def test_bt_loss_value_and_gradient_oracle(gen):
    store = init_mlp([4, 6, 1], gen)
    fc, fr = gen.normal(size=(7, 4)), gen.normal(size=(7, 4))
    loss, grads = bt_loss_from_features(store, fc, fr)
    margin = mlp_forward(store, fc) - mlp_forward(store, fr)
    assert loss == pytest.approx(np.mean(np.log1p(np.exp(-margin))))
    h = 1e-6
    for name, p in store.params.items():
        for _ in range(10):
            idx = tuple(gen.integers(0, s) for s in p.shape)
            old = p[idx]
            p[idx] = old + h
            up = bt_loss_from_features(store, fc, fr)[0]
            p[idx] = old - h
            down = bt_loss_from_features(store, fc, fr)[0]
            p[idx] = old
            fd = (up - down) / (2 * h)
            assert abs(fd - grads[name][idx]) <= 1e-4 * max(1e-4, abs(fd) + abs(grads[name][idx]))


def test_bt_loss_names_bad_pair(gen):
    store = init_mlp([2, 8, 1], gen)
    fc = np.zeros((3, 2))
    fc[1, 0] = np.nan
    with pytest.raises(NumericError, match="pair 41"):
        bt_loss_from_features(store, fc, np.zeros((3, 2)), pair_ids=np.array([40, 41, 42]))
    with pytest.raises(ConfigError):
        bt_loss_from_features(store, np.zeros((0, 2)), np.zeros((0, 2)))


def test_training_learns_gold_preferences(small):
    ds = small["dataset"]
    untrained = train_rm(ds, small["world"].features, RMConfig(lr=1e-12), seed=0, init_seed=20)
    for rm in small["rms"]:
        assert pair_accuracy(rm, ds) > max(0.75, pair_accuracy(untrained, ds) + 0.1)
        assert rm.lineage["init"] == "fresh"


def test_training_is_deterministic_and_seeded(small):
    w, ds = small["world"], small["dataset"].take(np.arange(128))
    a = train_rm(ds, w.features, RMConfig(), seed=1, init_seed=2)
    b = train_rm(ds, w.features, RMConfig(), seed=1, init_seed=2)
    c = train_rm(ds, w.features, RMConfig(), seed=3, init_seed=2)
    assert a.store.equals(b.store) and not a.store.equals(c.store)
    order = training_order(10, 1, 2)
    assert sorted(order[:10]) == list(range(10)) and sorted(order[10:]) == list(range(10))


def test_calibration_normalizes_reference(small):
    rm, calib = small["rms"][0], small["calib"]
    s = rm.scores(calib)
    assert s.mean() == pytest.approx(0.0, abs=1e-9) and s.std() == pytest.approx(1.0)
    raw = train_rm(small["dataset"].take(np.arange(64)), small["world"].features, RMConfig(), seed=0)
    with pytest.raises(StateError):
        raw.scores(calib)
    with pytest.raises(StateError):
        score(raw, 0, calib.response(0))


def test_single_score_matches_batch(small):
    rm, calib = small["rms"][0], small["calib"]
    assert score(rm, int(calib.prompt_ids[3]), calib.response(3)) == pytest.approx(rm.scores(calib)[3])


def test_empty_dataset_rejected(small):
    with pytest.raises(ConfigError):
        train_rm(small["dataset"].take(np.arange(0)), small["world"].features, RMConfig(), seed=0)


@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-10, 10)))
def test_std_disagreement_is_population_std(s):
    np.testing.assert_allclose(disagreement_values(s, "std"), np.std(s, axis=0))
    np.testing.assert_allclose(disagreement_values(s[:2], "weighted_diff", 2.0), s[0] - 2.0 * s[1])


def test_disagreement_argument_errors():
    with pytest.raises(ConfigError):
        disagreement_values(np.zeros((1, 3)))
    with pytest.raises(ConfigError):
        disagreement_values(np.zeros((2, 3)), "weighted_diff")
    with pytest.raises(ConfigError):
        disagreement_values(np.zeros((2, 3)), "std", lam=1.0)
    with pytest.raises(ConfigError):
        disagreement_values(np.zeros((2, 3)), "nope")


def test_disagreement_single_response(small):
    rms, calib = small["rms"], small["calib"]
    st_ = disagreement(rms, int(calib.prompt_ids[0]), calib.response(0), "std")
    want = np.std([rm.scores(calib)[0] for rm in rms])
    assert st_.value == pytest.approx(want)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=30).filter(lambda v: np.std(v) > 1e-3))
def test_zscore_of_reference_is_standardized(values):
    ref = UncertaintyReference.fit(values)
    z = uncertainty_zscore(values, ref)
    assert np.mean(z) == pytest.approx(0.0, abs=1e-9) and np.std(z) == pytest.approx(1.0)


def test_zscore_errors():
    with pytest.raises(NumericError):
        UncertaintyReference.fit([1.0, 1.0])
    with pytest.raises(StateError):
        uncertainty_zscore([1.0], UncertaintyReference())


def linear_pair_store():
    from advrm.numerics import ParamStore
    return ParamStore({"W0": np.array([[1.0]]), "b0": np.zeros(1)},
                      {"kind": "mlp", "sizes": [1, 1], "activation": "relu", "tag": "proxy"})


def bt_loss_at(margins):
    m = np.atleast_1d(np.asarray(margins, dtype=float))
    return bt_loss_from_features(linear_pair_store(), m[:, None], np.zeros((len(m), 1)))[0]


def test_bt_loss_closed_values():
    assert bt_loss_at([0.0, 0.0, 0.0]) == pytest.approx(np.log(2.0), abs=1e-12)
    assert bt_loss_at(2.0) == pytest.approx(0.126928, abs=1e-6)
    assert bt_loss_at(2.0) == pytest.approx(-np.log(0.8807970779), abs=1e-9)


@given(st.floats(-30, 30))
def test_bt_loss_swap_identity(m):
    assert bt_loss_at(m) + bt_loss_at(-m) == pytest.approx(m + 2 * bt_loss_at(m), abs=1e-9)


def test_bt_loss_strictly_decreasing_in_margin():
    losses = [bt_loss_at(m) for m in np.linspace(-20, 20, 401)]
    assert np.all(np.diff(losses) < 0)


def test_normalized_score_closed_values(small):
    rm, calib = small["rms"][0], small["calib"]
    assert rm.normalize(rm.mu) == 0.0
    assert rm.normalize(rm.mu + rm.sigma) == pytest.approx(1.0, abs=1e-12)
    assert abs(rm.scores(calib).mean()) <= 1e-6


def test_recalibration_is_idempotent(small):
    rm, calib = small["rms"][0], small["calib"]
    mu, sigma = rm.mu, rm.sigma
    rm.calibrate(calib)
    assert abs(rm.mu - mu) <= 1e-12 and abs(rm.sigma - sigma) <= 1e-12


def test_training_depends_on_order_only(small):
    w, ds = small["world"], small["dataset"].take(np.arange(200))
    order = training_order(len(ds), 4, 1)
    perm = np.random.default_rng(0).permutation(len(ds))
    inv = np.argsort(perm)
    a = train_rm(ds, w.features, RMConfig(), seed=4, init_seed=9, order=order)
    b = train_rm(ds.take(perm), w.features, RMConfig(), seed=4, init_seed=9, order=inv[order])
    assert a.store.equals(b.store)


def test_disagreement_closed_values():
    assert disagreement_values(np.array([[1.0], [3.0]]), "std")[0] == 1.0
    assert disagreement_values(np.array([[0.5], [0.2]]), "weighted_diff", 10.0)[0] == pytest.approx(-1.5)
    pairs = np.random.default_rng(0).normal(size=(2, 50))
    np.testing.assert_allclose(disagreement_values(pairs, "std"), 0.5 * np.abs(pairs[0] - pairs[1]))


def test_zscore_closed_values():
    ref = UncertaintyReference(1.0, 2.0)
    assert uncertainty_zscore(1.0, ref) == 0.0
    z = uncertainty_zscore(5.0, ref)
    assert z == 2.0 and z > 1.96


def test_two_seeds_disagree(small):
    a, b = small["rms"]
    assert np.any(disagreement_values(np.stack([a.scores(small["calib"]), b.scores(small["calib"])]), "std") > 0)
