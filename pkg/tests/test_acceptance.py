"""Acceptance criteria, one test per criterion.

Criteria 3-8 share full default-config reproductions for seeds 0, 1 and 2.
Those runs go to $ADVRM_ACCEPT_DIR (default: a pytest temp dir); finished
runs found there are reused, since every stage is a no-op once its manifest
entry is complete. Criterion 9 always runs seed 7 twice from scratch.
"""
import csv
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from advrm import rng as rngs
from advrm.adversarial import filter_candidates, uncertainty_reference
from advrm.harness.config import load_config
from advrm.harness.pipeline import Pipeline, load_candidates
from advrm.numerics import init_mlp, init_seqmodel, seq_backward, seq_log_probs
from advrm.policy import rloo_advantages
from advrm.reward import bt_loss_from_features, uncertainty_zscore
from advrm.world import WorldConfig

SEEDS = (0, 1, 2)
RESULTS = {}

pytestmark = pytest.mark.acceptance


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(RESULTS[n])
    return ok


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="session")
def accept_root(tmp_path_factory):
    env = os.environ.get("ADVRM_ACCEPT_DIR")
    root = Path(env) if env else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)
    return root


def reproduce(root, seed, name=None):
    pipe = Pipeline(load_config(None, [f"seed={seed}"]), root / (name or f"seed{seed}"))
    pipe.reproduce()
    return pipe


@pytest.fixture(scope="session")
def runs(accept_root):
    return {s: reproduce(accept_root, s) for s in SEEDS}


def per_seed(runs, rel):
    return {s: read_csv(p.root / rel) for s, p in runs.items()}


# ---------------------------------------------------------------------------
# exact oracles
# ---------------------------------------------------------------------------

def _fd_rel_err(f, arr, idx, analytic, h=1e-6):
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    fd = (up - down) / (2 * h)
    return abs(fd - analytic) / max(1e-4, abs(fd) + abs(analytic))


def _probes(store, gen, n):
    names = sorted(store.params)
    sizes = np.array([store.params[k].size for k in names], dtype=float)
    for _ in range(n):
        name = names[gen.choice(len(names), p=sizes / sizes.sum())]
        shape = store.params[name].shape
        yield name, tuple(int(gen.integers(0, s)) for s in shape)


def test_criterion_1_gradient_oracle():
    start = time.perf_counter()
    gen = np.random.default_rng(rngs.derive_seed(0, "acceptance", "gradients"))
    wc = WorldConfig()
    n_feat = wc.embed_dim + wc.junk_dims + 4 + wc.n_buckets + 2
    rm = init_mlp([n_feat, 32, 1], gen, init_scale=2.0)
    fc, fr = gen.normal(size=(128, n_feat)), gen.normal(size=(128, n_feat))
    _, grads = bt_loss_from_features(rm, fc, fr)
    bt_err = max(_fd_rel_err(lambda: bt_loss_from_features(rm, fc, fr)[0], rm.params[name], idx, grads[name][idx])
                 for name, idx in _probes(rm, gen, 100))

    V, L = wc.vocab_size, wc.max_len
    pol = init_seqmodel(V, L, wc.sft_hidden, gen)
    n = 16
    lengths = gen.integers(1, L + 1, size=n)
    tokens = gen.integers(1, V, size=(n, L))
    tokens[np.arange(L)[None, :] >= lengths[:, None]] = 0
    bags = gen.dirichlet(np.ones(V), size=n)
    adv = gen.normal(size=n)
    pg = seq_backward(pol, bags, tokens, lengths, adv)
    objective = lambda: float(adv @ seq_log_probs(pol, bags, tokens, lengths)[1])
    pg_err = max(_fd_rel_err(objective, pol.params[name], idx, pg[name][idx]) for name, idx in _probes(pol, gen, 100))
    secs = time.perf_counter() - start
    ok = record(1, bt_err < 1e-4 and pg_err < 1e-4 and secs < 60,
                f"max rel err bt {bt_err:.2e}, policy {pg_err:.2e}; {secs:.1f}s")
    assert ok, RESULTS[1]


def test_criterion_2_rloo_oracle():
    gen = np.random.default_rng(rngs.derive_seed(0, "acceptance", "rloo"))
    theta = np.array([0.4, -0.3, 0.1])
    means = np.array([1.0, -0.5, 0.3])
    p = np.exp(theta) / np.exp(theta).sum()
    exact = p * (means - p @ means)
    k, n_groups = 4, 100_000
    a = gen.choice(3, size=(n_groups, k), p=p)
    r = means[a] + gen.normal(0.0, 0.5, size=a.shape)
    adv = rloo_advantages(r)
    per_group = (adv[:, :, None] * (np.eye(3)[a] - p)).mean(axis=1)
    est = per_group.mean(axis=0)
    se = per_group.std(axis=0, ddof=1) / np.sqrt(n_groups)
    within = np.abs(est - exact) < 3 * se
    vectors = [gen.normal(0.0, 10.0, size=int(gen.integers(2, 9))) for _ in range(1000)]
    sums = [abs(float(rloo_advantages(v).sum())) for v in vectors]
    ok = record(2, bool(within.all()) and max(sums) == 0.0,
                f"|est-exact|/se = {np.round(np.abs(est - exact) / se, 2).tolist()}; max |sum| {max(sums):.1e}")
    assert ok, RESULTS[2]


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------

def test_criterion_3_filter_soundness(runs):
    """Every retained sample of every executed round, re-scored from the saved reward models."""
    pipe = runs[0]
    w = pipe.world()
    checked, bad, complete = 0, 0, True
    for r in pipe.executed_rounds():
        rm1, rm2 = pipe.members(r)[:2]
        lam = pipe.attack_meta(r)["lambda"]
        kept = pipe.load_filtered(r)
        T = pipe._thresholds(rm1, w.train_ids)
        ref = uncertainty_reference(rm1, rm2, lam, pipe.bank().subset(w.train_ids, pipe.cfg.attack.n_threshold_samples))
        r1 = rm1.scores(kept.batch)
        z = uncertainty_zscore(r1 - lam * rm2.scores(kept.batch), ref)
        ok = (r1 > T[kept.batch.prompt_ids]) & (z > 1.96)
        checked += len(kept)
        bad += int((~ok).sum())
        cands, _ = load_candidates(pipe.manifest.artifact(f"attack:r{r}", "candidates"))
        expected = set(cands.batch.take(np.nonzero(cands.passed)[0]).keys())
        complete &= expected == set(kept.batch.keys()) and len(expected) == len(kept)
        complete &= len(filter_candidates(cands)) == len(kept)
    ok = record(3, checked > 0 and bad == 0 and complete,
                f"{checked} retained samples re-scored, {bad} violations, filter output complete: {complete}")
    assert ok, RESULTS[3]


HACKING_STAGES = ("gen-world", "train-rm:r0", "rlhf:baseline")


def test_criterion_4_reward_hacking(runs):
    rows = per_seed(runs, "metrics/hacking_baseline.csv")
    drops = {s: float(r[0]["drop"]) for s, r in rows.items()}
    hacked = [s for s, d in drops.items() if d >= 0.25]
    timings = {s: json.loads((p.root / "timings.json").read_text()) for s, p in runs.items()}
    secs = max(sum(t[k] for k in HACKING_STAGES) for t in timings.values())
    ok = record(4, len(hacked) >= 2 and secs < 30 * 60,
                f"gold drop after 3x best step {({s: round(d, 3) for s, d in drops.items()})}; "
                f"slowest world + baseline RM + RLHF to 3x best step: {secs / 60:.1f} min")
    assert ok, RESULTS[4]


def test_criterion_5_attack_efficacy(runs):
    tables = per_seed(runs, "metrics/table1_attack_success.csv")
    strict = {s: {r["method"]: float(r["rate"]) for r in t if r["mode"] == "strict"} for s, t in tables.items()}
    ok = all(v["adv-rm"] >= 50 and v["token-perturbation"] <= v["adv-rm"] - 30
             and v["over-optimization"] <= v["adv-rm"] - 30 for v in strict.values())
    record(5, ok, f"strict rates {strict}")
    assert ok, RESULTS[5]


def test_criterion_6_adversarial_training(runs):
    rounds = per_seed(runs, "metrics/rounds.csv")
    # the loop stops when an attack fails; the last executed round is then the final reward model
    drop = {s: float(r[0]["strict_rate"]) - float(r[-1]["strict_rate"]) for s, r in rounds.items()}
    last = {s: int(r[-1]["round"]) for s, r in rounds.items()}
    down = per_seed(runs, "metrics/downstream.csv")
    better = {}
    for s, rows in down.items():
        by = {r["method"]: r for r in rows}
        adv, base = by[f"adv-rm-r{last[s]}"], by["baseline"]
        better[s] = int(adv["best_step"]) > int(base["best_step"]) and float(adv["final_gold"]) > float(base["final_gold"])
    ok = all(d >= 20 for d in drop.values()) and sum(better.values()) >= 2
    record(6, ok, f"strict drop r0->final {({s: round(d, 1) for s, d in drop.items()})}, final round {last}; "
                  f"adv-rm later peak and higher final gold {better}")
    assert ok, RESULTS[6]


def test_criterion_7_correlation(runs):
    corr = {s: {r["set"]: float(r["pearson"]) for r in rows} for s, rows in per_seed(runs, "metrics/correlation.csv").items()}
    ok = all(abs(c["sft"]) < 0.3 and c.get("sft+adversarial", 0.0) < -0.4 for c in corr.values())
    record(7, ok, f"pearson {({s: {k: round(v, 3) for k, v in c.items()} for s, c in corr.items()})}")
    assert ok, RESULTS[7]


def test_criterion_8_ablation_ordering(runs):
    tables = per_seed(runs, "metrics/table3_ablation.csv")
    mean = {v: float(np.mean([float(next(r for r in t if r["variant"] == v)["strict_rate"]) for t in tables.values()]))
            for v in ("full", "no-filtering", "equal-weights", "no-threshold")}
    ok = mean["full"] > mean["no-filtering"] > mean["equal-weights"] >= mean["no-threshold"]
    record(8, ok, f"3-seed mean strict rates {({k: round(v, 1) for k, v in mean.items()})}")
    assert ok, RESULTS[8]


def test_attack_trace_trends(runs):
    """Attacker raises r1 while pushing r2 down, and late candidates are gold-bad (seed 0, round 0)."""
    rows = read_csv(runs[0].root / "metrics/attack_trace_r0.csv")
    col = lambda k: np.array([float(r[k]) for r in rows])
    last = slice(-max(1, len(rows) // 10), None)
    r1, r2, gold = col("mean_r1"), col("mean_r2"), col("mean_gold_reward")
    # net change from the SFT start (step 0) to the smoothed final window
    assert r1[last].mean() >= r1[0]
    assert r2[last].mean() < r2[0]
    assert gold[last].mean() < gold[0]


def test_criterion_9_determinism(tmp_path_factory):
    root = tmp_path_factory.mktemp("determinism")
    a = reproduce(root, 7, "seed7_a").root / "metrics"
    b = reproduce(root, 7, "seed7_b").root / "metrics"
    names = sorted(p.name for p in a.glob("*.csv"))
    same = names == sorted(p.name for p in b.glob("*.csv")) and all(
        (a / n).read_bytes() == (b / n).read_bytes() for n in names)
    ok = record(9, bool(names) and same, f"{len(names)} metric CSVs compared byte for byte")
    assert ok, RESULTS[9]
