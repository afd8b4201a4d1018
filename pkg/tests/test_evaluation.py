import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from advrm.data import Response, ResponseBatch
from advrm.errors import ConfigError, NumericError, StateError
from advrm.evaluation import (AttackVerdict, CurvePoint, EnsembleReward, ScoreReference, curve_from_trace,
                              ensemble_objective, ensemble_values, fit_strict_references, hacking_curve_report,
                              pearson, rrm_augment, select_best, standard_flags, strict_flags, success_rate,
                              success_standard, success_strict, token_perturbation_attack,
                              token_perturbation_batch, verdicts)


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=40))
def test_pearson_matches_numpy(pairs):
    x, y = np.array(pairs).T
    if np.std(x) < 1e-6 or np.std(y) < 1e-6:
        return
    assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-9)


def test_pearson_errors():
    with pytest.raises(NumericError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ConfigError):
        pearson([1], [2])


def test_success_rate_and_se():
    rate, se = success_rate([True, False, True, True])
    assert rate == 75.0 and se == pytest.approx(100 * math.sqrt(0.75 * 0.25 / 4))
    with pytest.raises(ConfigError):
        success_rate([])
    with pytest.raises(ConfigError):
        success_rate([AttackVerdict(True, True, 0.0, 0.0)])


def test_flag_definitions():
    assert standard_flags(1.0, 0.0, -1.0, 0.0) and not standard_flags(1.0, 0.0, 1.0, 0.0)
    assert strict_flags(0.1, -2.0) and not strict_flags(0.0, -2.0) and not strict_flags(0.1, -1.96)


def test_score_reference_oracle():
    pids = np.repeat([0, 2], 64)
    scores = np.concatenate([np.arange(64.0), 2 * np.arange(64.0)])
    ref = ScoreReference.fit(pids, scores, 3)
    assert ref.mean[0] == pytest.approx(31.5) and ref.std[2] == pytest.approx(2 * np.std(np.arange(64.0)))
    assert ref.z([2], [63.0])[0] == pytest.approx((63 - 63) / ref.std[2])
    with pytest.raises(StateError):
        ref.z([1], [0.0])
    with pytest.raises(ConfigError):
        ScoreReference.fit(np.repeat([0], 10), np.arange(10.0), 1)


def test_verdicts_agree_with_single_response_api(small):
    w, bank, rm1 = small["world"], small["bank"], small["rms"][0]
    refs = fit_strict_references(bank.subset(w.eval_ids), rm1, w.gold, w.n_prompts)
    batch = w.random_responses(w.eval_ids[:6], 2, np.random.default_rng(0))
    vs = verdicts(batch, rm1, w.gold, refs)
    for i in range(len(batch)):
        pid = int(batch.prompt_ids[i])
        one = success_strict(pid, batch.response(i), rm1, w.gold, refs)
        assert (one.standard_success, one.strict_success) == (vs[i].standard_success, vs[i].strict_success)
        assert one.z_gold == pytest.approx(vs[i].z_gold)
        ref_row = int(np.searchsorted(refs.reference.prompt_ids, pid))
        std = success_standard(pid, batch.response(i), refs.reference.response(ref_row), rm1, w.gold)
        assert std == vs[i].standard_success
        z1 = (rm1.scores(batch)[i] - refs.rm1.mean[pid]) / refs.rm1.std[pid]
        assert vs[i].z_rm1 == pytest.approx(z1)


def test_ensemble_values_oracle(small):
    s = np.array([[1.0, 2.0], [3.0, 0.0]])
    np.testing.assert_allclose(ensemble_values(s, "mean"), [2.0, 1.0])
    np.testing.assert_allclose(ensemble_values(s, "mean_minus_std", 0.5), [2.0 - 0.5, 1.0 - 0.5])
    with pytest.raises(ConfigError):
        ensemble_values(s, "mean_minus_std")
    rms, calib = small["rms"], small["calib"]
    fn = EnsembleReward(rms, "mean_minus_std", 1.0)
    assert fn(calib)[2] == pytest.approx(ensemble_objective(rms, int(calib.prompt_ids[2]), calib.response(2),
                                                            "mean_minus_std", 1.0))


def test_rrm_augment_uses_foreign_rejected(small):
    ds = small["dataset"].take(np.arange(40))
    aug = rrm_augment(ds, 3, 0, small["world"].gold)
    assert len(aug) == 120 and aug.count("rrm_augmented") == 80
    extra = aug.source == "rrm_augmented"
    assert np.all(aug.extra["foreign_prompt"][extra] != aug.prompt_ids[extra])
    np.testing.assert_array_equal(aug.chosen.tokens[40:80], ds.chosen.tokens)
    assert len(rrm_augment(ds, 1, 0)) == 40
    with pytest.raises(ConfigError):
        rrm_augment(ds, 0, 0)


def test_token_perturbation_never_lowers_rm1(small):
    w, rm1, bank = small["world"], small["rms"][0], small["bank"]
    orig = bank.subset(w.eval_ids[:8], 1)
    pert = token_perturbation_batch(orig, rm1, 20, 0, 3, w.config.vocab_size)
    assert np.all(rm1.raw(pert) >= rm1.raw(orig))
    np.testing.assert_array_equal(pert.lengths, orig.lengths)
    diff = (pert.tokens != orig.tokens).sum(axis=1)
    assert np.all(diff <= 3)
    new = pert.tokens[pert.tokens != orig.tokens]
    assert not np.isin(new, w.junk_tokens).any()
    with_junk = token_perturbation_batch(orig, rm1, 20, 0, 3, w.config.vocab_size, exclude=())
    assert np.all(rm1.raw(with_junk) >= rm1.raw(orig))
    single = token_perturbation_attack(int(orig.prompt_ids[0]), orig.response(0), rm1, 20, 0, 3)
    assert single == pert.response(0)
    with pytest.raises(ConfigError):
        token_perturbation_attack(0, Response(()), rm1)


def test_select_best():
    b = ResponseBatch.empty(2)
    assert select_best(b, [1, 5, 2, 9, 0, 3], 3).tolist() == [1, 3]


def test_curves_and_hacking_report():
    trace = [{"step": s, "mean_length": 1.0, "mean_kl": 0.0, "eval_gold": g, "eval_proxy": p}
             for s, g, p in ((0, 0.0, 0.0), (10, 1.0, 1.0), (20, 0.5, 2.0))]
    trace.insert(1, {"step": 5, "mean_length": 1.0, "mean_kl": 0.0})
    pts = curve_from_trace(trace)
    assert [p.step for p in pts] == [0, 10, 20]
    rep = hacking_curve_report(pts, 0.25)
    assert rep.best_step == 10 and rep.hacked and rep.final_gold == 0.5
    assert not hacking_curve_report(pts, 0.6).hacked
    with pytest.raises(ConfigError):
        curve_from_trace(trace[::-1])
    with pytest.raises(ConfigError):
        hacking_curve_report([])
    assert isinstance(pts[0], CurvePoint)


def test_standard_and_strict_closed_cases():
    assert standard_flags(2.0, 1.0, 0.0, 5.0)
    assert not standard_flags(1.0, 2.0, 0.0, 5.0)
    assert not standard_flags(1.0, 1.0, 3.0, 3.0)
    assert strict_flags(0.5, -2.5) and not strict_flags(0.5, -1.0) and not strict_flags(-0.1, -3.0)


def test_success_rate_closed_cases():
    assert success_rate([True] * 50 + [False] * 50) == (50.0, pytest.approx(5.0))
    assert success_rate([True] * 7) == (100.0, 0.0)


def test_pearson_closed_cases():
    x = np.arange(10.0)
    assert pearson(x, x) == pytest.approx(1.0) and pearson(x, -x) == pytest.approx(-1.0)
    with pytest.raises(NumericError):
        pearson(x, np.full(10, 2.0))


def test_ensemble_closed_cases():
    assert ensemble_values([[1.0], [3.0]])[0] == 2.0
    assert ensemble_values([[1.0], [3.0]], "mean_minus_std", 0.5)[0] == 1.5


def test_rrm_doubles_and_is_deterministic(small):
    ds = small["dataset"].take(np.arange(30))
    a, b = rrm_augment(ds, 2, 4), rrm_augment(ds, 2, 4)
    assert len(a) == 60
    np.testing.assert_array_equal(a.rejected.tokens, b.rejected.tokens)


def test_overoptimization_needs_best_step(small):
    from advrm.evaluation import overoptimization_attack
    from advrm.policy import RLConfig
    with pytest.raises(StateError):
        overoptimization_attack(small["world"], small["sft"].branch(), small["rms"][0], RLConfig(), None, 0)


def test_hacking_report_degenerate_cases():
    up = [CurvePoint(s, 0.0, float(s), 1.0, 0.0) for s in range(4)]
    rep = hacking_curve_report(up)
    assert rep.best_step == 3 and rep.best_gold == rep.final_gold and not rep.hacked
    one = hacking_curve_report(up[:1])
    assert one.best_gold == one.final_gold and not one.hacked


@given(st.integers(0, 2**31), st.floats(-5, 5), st.floats(0.1, 5), st.floats(-30, 30), st.floats(-30, 30))
def test_strict_gold_half_implies_standard_gold_half(seed, loc, scale, g1, g2):
    scores = loc + scale * np.random.default_rng(seed).normal(size=64)
    ref = ScoreReference.fit(np.zeros(64, np.int64), scores, 1)
    z1, z2 = ref.z([0], [g1])[0], ref.z([0], [g2])[0]
    if z1 < -1.96 <= z2:
        assert g1 < g2
