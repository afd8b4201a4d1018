"""Experiment stages over a run directory.

Every stage reads its inputs from artifacts recorded in the manifest, writes
its outputs atomically and then marks itself done, so re-running a finished
stage is a no-op and an interrupted run resumes where it stopped. All
randomness comes from named streams of the run seed.
"""
from __future__ import annotations

import csv
import io
import json
import functools
import logging
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import rng as rngs
from ..adversarial import (AdvCandidates, AttackConfig, SFTBank, Scorer, attack_with_tuning, build_adv_pairs,
                           check_round_dataset, evaluate_attack, filter_candidates, threshold_table,
                           train_adversarial_policy, train_ensemble, assert_fresh, uncertainty_reference,
                           _empty_pairs)
from ..data import PreferenceDataset, Response, ResponseBatch, load_dataset, read_jsonl, save_dataset, write_jsonl
from ..errors import ConfigError, StateError
from ..evaluation import (EnsembleReward, curve_from_trace, fit_strict_references, hacking_curve_report, pearson,
                          rrm_augment, select_best, success_rate, token_perturbation_batch, verdicts)
from ..numerics import load_arrays, load_checkpoint, save_arrays, save_checkpoint
from ..policy import PolicyNet, RLConfig, sample_responses, sequence_log_probs, train_policy
from ..reward import RewardNet, disagreement_values, train_rm
from ..world import build_world, gen_preference_dataset, make_sft_policy, world_summary
from .config import ExperimentConfig
from .manifest import RunManifest

log = logging.getLogger(__name__)

STAGES = ("gen-world", "round", "evaluate", "report")
EVAL_PARTS = ("downstream", "baselines", "ablations", "correlation")
TIMINGS = "timings.json"


# ---------------------------------------------------------------------------
# small IO helpers
# ---------------------------------------------------------------------------

def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "nan" if np.isnan(x) else f"{float(x):.6f}"
    return str(x)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))
    tmp.replace(path)


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def save_rm(path, rm: RewardNet):
    save_checkpoint(path, rm.store, rm.sidecar())
    write_json(Path(path).with_suffix(".json"), rm.sidecar())


def load_rm(path, featurize) -> RewardNet:
    store, meta = load_checkpoint(path)
    return RewardNet(store, featurize, tag=meta["architecture"], mu=meta["mu"], sigma=meta["sigma"],
                     seed=meta["seed"], init_seed=meta["init_seed"], lineage=meta["lineage"])


def save_candidates(path, c: AdvCandidates, meta):
    save_arrays(path, {"prompt_ids": c.batch.prompt_ids, "tokens": c.batch.tokens, "lengths": c.batch.lengths,
                       "r1": c.r1, "r2": c.r2, "u": c.u, "z": c.z, "T": c.T, "gold": c.gold, "step": c.step},
                {**meta, "z_threshold": c.z_threshold})


def load_candidates(path) -> tuple:
    a, meta = load_arrays(path)
    batch = ResponseBatch(a["prompt_ids"].astype(np.int64), a["tokens"].astype(np.int64), a["lengths"].astype(np.int64))
    c = AdvCandidates(batch, a["r1"], a["r2"], a["u"], a["z"], a["T"], a["gold"], a["step"].astype(np.int64),
                      meta["z_threshold"])
    return c, meta


def save_filtered(path, c: AdvCandidates):
    rows = [{"prompt_id": int(c.batch.prompt_ids[i]), "tokens": c.batch.tokens[i, :c.batch.lengths[i]].tolist(),
             "r1": float(c.r1[i]), "r2": float(c.r2[i]), "u": float(c.u[i]), "z": float(c.z[i]),
             "T": float(c.T[i]), "gold": float(c.gold[i]), "step": int(c.step[i])} for i in range(len(c))]
    write_jsonl(path, rows)


def load_filtered(path, max_len, z_threshold) -> AdvCandidates:
    rows = read_jsonl(path)
    if not rows:
        return AdvCandidates.concat([], max_len, z_threshold)
    batch = ResponseBatch.from_responses([r["prompt_id"] for r in rows], [Response(tuple(r["tokens"])) for r in rows],
                                         max_len)
    col = lambda k: np.array([r[k] for r in rows], dtype=np.float64)
    return AdvCandidates(batch, col("r1"), col("r2"), col("u"), col("z"), col("T"), col("gold"),
                         col("step").astype(np.int64), z_threshold)


def timed_stage(stage):
    """Time a stage method into timings.json unless the stage was already done."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(self, *args, **kw):
            name = stage.format(r=args[0] if args else kw.get("r", 0))
            if self.manifest.done(name):
                return fn(self, *args, **kw)
            with self.timed(name):
                return fn(self, *args, **kw)
        return wrapper
    return deco


def trace_rows(trace):
    keys = sorted({k for rec in trace for k in rec})
    return keys, [[rec.get(k, float("nan")) for k in keys] for rec in trace]


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

class Pipeline:
    def __init__(self, config: ExperimentConfig, out=None):
        self.cfg = config.validate()
        self.root = config.output_dir(out)
        self.manifest = RunManifest.open(self.root, config)
        self._world = None
        self._sft = None
        self._bank = None
        self._rms = {}

    @property
    def seed(self):
        return self.cfg.seed

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @contextmanager
    def timed(self, name):
        """Record wall-clock seconds of a unit of work in timings.json (outside metrics/)."""
        start = time.perf_counter()
        yield
        path = self.path(TIMINGS)
        timings = json.loads(path.read_text()) if path.exists() else {}
        timings[name] = round(time.perf_counter() - start, 3)
        write_json(path, timings)

    # -- shared objects ----------------------------------------------------

    def world(self):
        if self._world is None:
            self._world = build_world(self.cfg.world, self.seed)
        return self._world

    def sft(self) -> PolicyNet:
        if self._sft is None:
            store, _ = load_checkpoint(self.manifest.artifact("gen-world", "sft"))
            self._sft = PolicyNet.from_store(store)
            self._calibrate_gold()
        return self._sft

    def bank(self) -> SFTBank:
        if self._bank is None:
            self._bank = SFTBank.sample(self.world(), self.sft(), self.cfg.data.bank_size, self.seed)
        return self._bank

    def calibration(self) -> ResponseBatch:
        return self.bank().subset(self.world().train_ids, self.cfg.data.calibration_per_prompt)

    def _calibrate_gold(self):
        w = self.world()
        if not w.gold.calibrated:
            w.gold.calibrate(self.calibration())

    def refs(self, rm1):
        w = self.world()
        return fit_strict_references(self.bank().subset(w.eval_ids), rm1, w.gold, w.n_prompts,
                                     min(64, self.cfg.data.bank_size))

    def original(self) -> PreferenceDataset:
        return load_dataset(self.manifest.artifact("gen-world", "dataset"), self.cfg.world.max_len)

    def members(self, r):
        if r not in self._rms:
            stage = f"train-rm:r{r}"
            self._rms[r] = [load_rm(self.manifest.artifact(stage, f"m{k}"), self.world().features)
                            for k in range(self.cfg.rm.ensemble_size)]
        return self._rms[r]

    # -- generation --------------------------------------------------------

    @timed_stage("gen-world")
    def gen_world(self):
        if self.manifest.done("gen-world"):
            return
        w = self.world()
        sft = make_sft_policy(w, self.seed)
        save_checkpoint(self.path("models/sft.ckpt"), sft.store, {"role": "sft"})
        self._sft = sft
        self._calibrate_gold()
        ds = gen_preference_dataset(w, sft, self.cfg.rm.n_pairs, self.seed)
        ds.extra["round"] = np.full(len(ds), -1.0)
        save_dataset(self.path("data/original.jsonl"), ds)
        write_json(self.path("world.json"), world_summary(w))
        self.manifest.mark("gen-world", sft="models/sft.ckpt", dataset="data/original.jsonl", summary="world.json")

    # -- rounds ------------------------------------------------------------

    def _check_round_index(self, r):
        if not 0 <= r <= self.cfg.rounds:
            raise ConfigError(f"round index must be in 0..{self.cfg.rounds}")

    def round_dataset(self, r) -> PreferenceDataset:
        self._check_round_index(r)
        parts = [self.original()]
        for i in range(r):
            self.manifest.require(f"build-pairs:r{i}", "round")
            pairs = load_dataset(self.manifest.artifact(f"build-pairs:r{i}", "pairs"), self.cfg.world.max_len)
            if len(pairs) == 0:
                raise StateError(f"the round {i} attack failed; adversarial training stopped after round {i}")
            parts.append(pairs)
        ds = PreferenceDataset.concat(parts)
        check_round_dataset(ds, len(parts[0]), r)
        return ds

    @timed_stage("train-rm:r{r}")
    def train_rm(self, r=0):
        stage = f"train-rm:r{r}"
        if self.manifest.done(stage):
            return
        self.manifest.require("gen-world")
        ds = self.round_dataset(r)
        members = train_ensemble(ds, self.world(), self.cfg.rm, self.cfg.rm.ensemble_size, self.seed, r,
                                 self.calibration())
        assert_fresh(members, r)
        if r > 0:
            prev = self.members(r - 1)
            if any(m.store.equals(p.store) for m, p in zip(members, prev)):
                raise StateError("round reward models must not continue from the previous round")
        arts = {}
        for k, m in enumerate(members):
            rel = f"models/rm_r{r}_m{k}.ckpt"
            save_rm(self.path(rel), m)
            arts[f"m{k}"] = rel
        self._rms.pop(r, None)
        self.manifest.mark(stage, requires=["gen-world"] + ([f"build-pairs:r{r - 1}"] if r else []), **arts)

    def attack_config(self, r) -> AttackConfig:
        cfg = self.cfg.attack
        if r == 0:
            return cfg
        return replace(cfg, lam=self.attack_meta(0)["lambda"], tune_lambda=False)

    def attack_meta(self, r) -> dict:
        return json.loads(self.manifest.artifact(f"attack:r{r}", "meta").read_text())

    def _thresholds(self, rm1, ids):
        return threshold_table(self.world(), self.sft(), rm1, self.cfg.attack.n_threshold_samples, self.seed, ids)

    @timed_stage("attack:r{r}")
    def attack(self, r=0):
        stage = f"attack:r{r}"
        if self.manifest.done(stage):
            return
        self.manifest.require(f"train-rm:r{r}", "train-rm")
        w, sft = self.world(), self.sft()
        rm1, rm2 = self.members(r)[:2]
        cfg = self.attack_config(r)
        T = self._thresholds(rm1, w.train_ids)
        sft_ref = self.bank().subset(w.train_ids, cfg.n_threshold_samples)
        res = attack_with_tuning(w, sft, rm1, rm2, cfg, self.seed, T, sft_ref, tag=("attack", r))
        meta = {"lambda": res.lam, "dominance_violations": res.dominance_violations}
        save_candidates(self.path(f"attacks/candidates_r{r}.bin"), res.candidates, meta)
        write_json(self.path(f"attacks/meta_r{r}.json"), meta)
        save_checkpoint(self.path(f"models/attack_r{r}.ckpt"), res.policy.store, {"lambda": res.lam})
        keys, rows = trace_rows(res.trace)
        write_csv(self.path(f"metrics/attack_trace_r{r}.csv"), keys, rows)
        self.manifest.mark(stage, requires=[f"train-rm:r{r}"] + (["attack:r0"] if r else []), candidates=f"attacks/candidates_r{r}.bin", policy=f"models/attack_r{r}.ckpt",
                           trace=f"metrics/attack_trace_r{r}.csv", meta=f"attacks/meta_r{r}.json")

    @timed_stage("filter:r{r}")
    def filter(self, r=0):
        stage = f"filter:r{r}"
        if self.manifest.done(stage):
            return
        self.manifest.require(f"attack:r{r}", "attack")
        cands, _ = load_candidates(self.manifest.artifact(f"attack:r{r}", "candidates"))
        kept = filter_candidates(cands, True)
        save_filtered(self.path(f"attacks/filtered_r{r}.jsonl"), kept)
        self.manifest.mark(stage, requires=[f"attack:r{r}"], filtered=f"attacks/filtered_r{r}.jsonl")

    def load_filtered(self, r) -> AdvCandidates:
        return load_filtered(self.manifest.artifact(f"filter:r{r}", "filtered"), self.cfg.world.max_len,
                             self.cfg.attack.z_threshold)

    @timed_stage("build-pairs:r{r}")
    def build_pairs(self, r=0):
        stage = f"build-pairs:r{r}"
        if self.manifest.done(stage):
            return
        self.manifest.require(f"filter:r{r}", "filter")
        kept = self.load_filtered(r)
        if len(kept):
            pairs = build_adv_pairs(self.world(), kept, self.sft(), self.members(r)[0], self.cfg.attack.budget,
                                    self.seed, self.bank(), self.cfg.attack.chosen_attempts, r)
        else:
            pairs = _empty_pairs(self.cfg.world.max_len)
        save_dataset(self.path(f"data/pairs_r{r}.jsonl"), pairs)
        self.manifest.mark(stage, requires=[f"filter:r{r}"], pairs=f"data/pairs_r{r}.jsonl")

    def attack_result_policy(self, r) -> PolicyNet:
        store, _ = load_checkpoint(self.manifest.artifact(f"attack:r{r}", "policy"))
        return PolicyNet(store, self.sft().store.fresh_copy())

    def _eval_attack(self, r, cfg: AttackConfig, policy: PolicyNet):
        """Eval-prompt attack verdicts for a policy attacking round-r proxies with ``cfg``."""
        from ..adversarial import AttackResult
        w = self.world()
        rm1, rm2 = self.members(r)[:2]
        scorer = Scorer(rm1, rm2, cfg.lam, None, None, w.gold)
        res = AttackResult(policy, None, [], cfg.lam, scorer, 0)
        return evaluate_attack(w, res, self.sft(), cfg, self.refs(rm1), self.seed,
                               self.bank().subset(w.eval_ids, cfg.n_threshold_samples))

    @timed_stage("round:r{r}")
    def round(self, r):
        """Train, attack, filter, build pairs and evaluate round r."""
        self._check_round_index(r)
        stage = f"round:r{r}"
        if self.manifest.done(stage):
            return
        for i in range(r):
            if not self.manifest.done(f"round:r{i}"):
                raise StateError(f"round {r} needs rounds 0..{r - 1} to be complete; run 'round --round-index {i}'")
        self.gen_world()
        self.train_rm(r)
        self.attack(r)
        self.filter(r)
        self.build_pairs(r)
        cfg = self.attack_config(r)
        meta = self.attack_meta(r)
        cands, _ = load_candidates(self.manifest.artifact(f"attack:r{r}", "candidates"))
        ev = self._eval_attack(r, replace(cfg, lam=meta["lambda"]), self.attack_result_policy(r))
        write_verdicts(self.path(f"verdicts/adv_r{r}.jsonl"), ev.batch, ev.verdicts, f"adv-rm-r{r}")
        kept = self.load_filtered(r)
        pairs = load_dataset(self.manifest.artifact(f"build-pairs:r{r}", "pairs"), self.cfg.world.max_len)
        strict, se = ev.strict_rate
        report = {"round": r, "lambda": meta["lambda"], "candidates": len(cands), "retained": len(kept),
                  "pairs_built": len(pairs), "attack_failed": len(kept) == 0,
                  "dominance_violations": meta["dominance_violations"], "strict_success_rate": strict,
                  "strict_success_se": se, "standard_success_rate": ev.standard_rate[0],
                  "n_train_pairs": len(self.round_dataset(r))}
        write_json(self.path(f"reports/round_r{r}.json"), report)
        self.manifest.mark(stage, requires=[f"build-pairs:r{r}"], report=f"reports/round_r{r}.json", verdicts=f"verdicts/adv_r{r}.jsonl")

    def rounds(self):
        """Run rounds until cfg.rounds or until an attack fails; return the executed indices."""
        done = []
        for r in range(self.cfg.rounds + 1):
            self.round(r)
            done.append(r)
            rep = json.loads(self.manifest.artifact(f"round:r{r}", "report").read_text())
            if rep["attack_failed"]:
                break
        self._write_rounds_csv(done)
        return done

    def executed_rounds(self):
        return [r for r in range(self.cfg.rounds + 1) if self.manifest.done(f"round:r{r}")]

    def _write_rounds_csv(self, rounds):
        rows = []
        for r in rounds:
            rep = json.loads(self.manifest.artifact(f"round:r{r}", "report").read_text())
            rows.append([r, rep["lambda"], rep["n_train_pairs"], rep["candidates"], rep["retained"],
                         rep["pairs_built"], rep["attack_failed"], rep["strict_success_rate"],
                         rep["strict_success_se"], rep["standard_success_rate"], rep["dominance_violations"]])
        write_csv(self.path("metrics/rounds.csv"),
                  ["round", "lambda", "n_train_pairs", "candidates", "retained", "pairs_built", "attack_failed",
                   "strict_rate", "strict_se", "standard_rate", "dominance_violations"], rows)

    # -- RLHF --------------------------------------------------------------

    def rlhf(self, reward_fn, tag, max_steps=None, policy=None, start_step=0, trace=None, snapshots=None):
        """KL-regularized RLOO from SFT with an eval-prompt curve every eval_every steps."""
        w, sft, ec = self.world(), self.sft(), self.cfg.eval
        rl = replace(self.cfg.rl, max_steps=self.cfg.rl.max_steps if max_steps is None else max_steps)
        policy = sft.branch() if policy is None else policy
        snapshots = {} if snapshots is None else snapshots

        def eval_fn(step, store):
            batch, lp = sample_responses(store, w.prompt_bags, w.eval_ids, ec.eval_samples, self.seed,
                                         ("curve", tag, step))
            lpa = sequence_log_probs(sft.store, w.prompt_bags, batch)
            snapshots[step] = store.copy()
            return {"eval_gold": float(w.gold.scores(batch).mean()), "eval_proxy": float(np.mean(reward_fn(batch))),
                    "eval_length": float(batch.lengths.mean()), "eval_kl": float(np.mean(lp - lpa))}

        policy, tr = train_policy(policy, reward_fn, w.train_ids, w.prompt_bags, rl, self.seed,
                                  gold_fn=w.gold.scores, tag=tag, start_step=start_step, eval_fn=eval_fn,
                                  eval_every=ec.eval_every)
        return policy, (trace or []) + tr, snapshots

    @timed_stage("train-policy:r{r}")
    def train_policy(self, r=0):
        """RLHF from SFT against the round-r rm1; saves the final policy and its eval curve."""
        stage = f"train-policy:r{r}"
        if self.manifest.done(stage):
            return
        self.manifest.require(f"train-rm:r{r}", "train-rm")
        self.sft()
        rm1 = self.members(r)[0]
        policy, trace, _ = self.rlhf(rm1.scores, ("rlhf", f"rm-r{r}"))
        save_checkpoint(self.path(f"models/policy_r{r}.ckpt"), policy.store, {"reward_model": rm1.tag})
        self._write_curve(f"policy_r{r}", curve_from_trace(trace))
        keys, rows = trace_rows(trace)
        write_csv(self.path(f"metrics/policy_trace_r{r}.csv"), keys, rows)
        self.manifest.mark(stage, requires=[f"train-rm:r{r}"], policy=f"models/policy_r{r}.ckpt", curve=f"metrics/curve_policy_r{r}.csv",
                           trace=f"metrics/policy_trace_r{r}.csv")

    def _write_curve(self, name, points):
        write_csv(self.path(f"metrics/curve_{name}.csv"), ["step", "proxy", "gold", "length", "kl"],
                  [[p.step, p.proxy, p.gold, p.length, p.kl] for p in points])

    @timed_stage("eval:downstream")
    def downstream(self):
        """Policies trained against the baseline, Adv-RM and ensemble/RRM reward models."""
        self.manifest.require("gen-world")
        self.sft()
        if self.manifest.done("eval:downstream"):
            return
        rounds = self.executed_rounds()
        if not rounds:
            self.manifest.require("round:r0", "round")
        w, ec = self.world(), self.cfg.eval
        base = self.members(0)
        final = self.members(rounds[-1])
        S = self.cfg.rl.max_steps
        methods = [("baseline", base[0].scores), (f"adv-rm-r{rounds[-1]}", final[0].scores),
                   ("ens-mean", EnsembleReward(base, "mean"))]
        if ec.baselines:
            methods += [(f"uwo-{lam:g}", EnsembleReward(base, "mean_minus_std", lam)) for lam in ec.ensemble_lambdas]
            for mult in ec.rrm_multipliers:
                aug = rrm_augment(self.original(), mult, self.seed, w.gold)
                rm = train_rm(aug, w.features, self.cfg.rm, seed=rngs.derive_seed(self.seed, "rm-order", "rrm", mult),
                              init_seed=rngs.derive_seed(self.seed, "rm-init", 0), reference=self.calibration(),
                              lineage={"rrm_multiplier": mult})
                methods.append((f"rrm-x{mult}", rm.scores))
        rows, arts = [], {}
        for name, fn in methods:
            with self.timed(f"rlhf:{name}"):
                policy, trace, snaps = self.rlhf(fn, ("rlhf", name))
                if name == "baseline":
                    self._overopt_extension(policy, trace, snaps, hacking_curve_report(
                        curve_from_trace(trace), ec.hacking_margin), base[0])
            pts = curve_from_trace(trace)
            rep = hacking_curve_report(pts, ec.hacking_margin)
            rows.append([name, rep.best_step, rep.best_gold, rep.final_gold, rep.hacked, S])
            self._write_curve(name, pts)
            arts[f"curve_{name}"] = f"metrics/curve_{name}.csv"
            if name == "baseline":
                arts["overopt"] = "attacks/overopt.jsonl"
                arts["hacking"] = "metrics/hacking_baseline.csv"
        write_csv(self.path("metrics/downstream.csv"),
                  ["method", "best_step", "best_gold", "final_gold", "hacked", "steps"], rows)
        self.manifest.mark("eval:downstream", requires=[f"round:r{r}" for r in rounds], table="metrics/downstream.csv", **arts)

    def _overopt_extension(self, policy, trace, snaps, rep, rm1):
        """Train the baseline to 3x its best-gold step and keep the final policy's attacks."""
        from ..evaluation import overoptimization_attack
        S = self.cfg.rl.max_steps
        target = 3 * rep.best_step
        if target > S:
            policy, trace, snaps = self.rlhf(rm1.scores, ("rlhf", "baseline"), max_steps=target, policy=policy,
                                             start_step=S, trace=trace[:-1], snapshots=snaps)
            current = policy
        else:
            current = PolicyNet(snaps[target].copy(), self.sft().store.fresh_copy())
        pts = [p for p in curve_from_trace(trace) if p.step <= max(target, 0)] or curve_from_trace(trace)[:1]
        hr = hacking_curve_report(pts, self.cfg.eval.hacking_margin)
        write_csv(self.path("metrics/hacking_baseline.csv"),
                  ["best_step", "best_gold", "final_step", "final_gold", "drop", "hacked"],
                  [[hr.best_step, hr.best_gold, pts[-1].step, hr.final_gold, hr.best_gold - hr.final_gold, hr.hacked]])
        self._write_curve("baseline_overopt", pts)
        attacks, _ = overoptimization_attack(self.world(), current, rm1, self.cfg.rl, max(rep.best_step, 0),
                                             self.seed, done_steps=target, n_attacks=self.cfg.attack.n_eval_attacks,
                                             tag=("rlhf", "baseline"))
        v = verdicts(attacks, rm1, self.world().gold, self.refs(rm1))
        write_verdicts(self.path("attacks/overopt.jsonl"), attacks, v, "over-optimization")

    @timed_stage("eval:baselines")
    def baselines(self):
        """Table-1 analog: Adv-RM vs token perturbation vs over-optimization on round-0 proxies."""
        self.manifest.require("gen-world")
        self.sft()
        if self.manifest.done("eval:baselines"):
            return
        self.manifest.require("round:r0", "round")
        self.manifest.require("eval:downstream", "evaluate")
        w, ec = self.world(), self.cfg.eval
        rm1 = self.members(0)[0]
        refs = self.refs(rm1)
        originals = self.bank().subset(w.eval_ids, 1)
        perturbed = token_perturbation_batch(originals, rm1, ec.n_variants, self.seed, ec.max_edits,
                                             w.config.vocab_size)
        tp = verdicts(perturbed, rm1, w.gold, refs)
        write_verdicts(self.path("verdicts/token_perturbation.jsonl"), perturbed, tp, "token-perturbation")
        sets = {"adv-rm": read_verdicts(self.manifest.artifact("round:r0", "verdicts")),
                "token-perturbation": [(v.standard_success, v.strict_success) for v in tp],
                "over-optimization": read_verdicts(self.manifest.artifact("eval:downstream", "overopt"))}
        rows = []
        for name, flags in sets.items():
            for mode, j in (("strict", 1), ("standard", 0)):
                rate, se = success_rate([f[j] for f in flags])
                rows.append([name, mode, rate, se, len(flags)])
        write_csv(self.path("metrics/table1_attack_success.csv"), ["method", "mode", "rate", "se", "n"], rows)
        self.manifest.mark("eval:baselines", requires=["round:r0", "eval:downstream"], table="metrics/table1_attack_success.csv",
                           verdicts="verdicts/token_perturbation.jsonl")

    @timed_stage("eval:ablations")
    def ablations(self):
        """Table-3 analog on round-0 proxies: full, no filtering, equal weights, no threshold."""
        self.manifest.require("gen-world")
        self.sft()
        if self.manifest.done("eval:ablations"):
            return
        self.manifest.require("round:r0", "round")
        w = self.world()
        rm1, rm2 = self.members(0)[:2]
        cfg = self.attack_config(1) if self.manifest.done("attack:r0") else self.cfg.attack
        full = read_verdicts(self.manifest.artifact("round:r0", "verdicts"))
        policy0 = self.attack_result_policy(0)
        nofilter = self._eval_attack(0, replace(cfg, use_filter=False), policy0)
        T = self._thresholds(rm1, w.train_ids)
        sft_ref = self.bank().subset(w.train_ids, cfg.n_threshold_samples)
        variants = {}
        for name, vcfg in (("equal-weights", replace(cfg, lam=1.0, tune_lambda=False)),
                           ("no-threshold", replace(cfg, threshold="none", tune_lambda=False))):
            res = train_adversarial_policy(w, self.sft(), rm1, rm2, vcfg, self.seed, T, sft_ref,
                                           tag=("ablation", name))
            variants[name] = self._eval_attack(0, vcfg, res.policy)
        rows = [["full", *success_rate([f[1] for f in full]), len(full)],
                ["no-filtering", *nofilter.strict_rate, len(nofilter.verdicts)]]
        for name, ev in variants.items():
            rows.append([name, *ev.strict_rate, len(ev.verdicts)])
        write_csv(self.path("metrics/table3_ablation.csv"), ["variant", "strict_rate", "se", "n"], rows)
        self.manifest.mark("eval:ablations", requires=["round:r0"], table="metrics/table3_ablation.csv")

    @timed_stage("eval:correlation")
    def correlation(self):
        """Fig-1 analog: U (std mode, round-0 pair) against gold, SFT only and SFT plus adversarial."""
        self.manifest.require("gen-world")
        self.sft()
        if self.manifest.done("eval:correlation"):
            return
        self.manifest.require("round:r0", "round")
        w = self.world()
        members = self.members(0)
        sft_set = self.bank().subset(w.eval_ids, 8)
        adv = load_dataset(self.manifest.artifact("build-pairs:r0", "pairs"), self.cfg.world.max_len).rejected

        def u_gold(batch):
            u = disagreement_values(np.stack([m.scores(batch) for m in members]), "std")
            return u, w.gold.scores(batch)

        u_s, g_s = u_gold(sft_set)
        u_a, g_a = u_gold(adv) if len(adv) else (np.zeros(0), np.zeros(0))
        rows = [["sft", len(u_s), pearson(u_s, g_s)]]
        if len(u_a):
            rows.append(["sft+adversarial", len(u_s) + len(u_a),
                         pearson(np.concatenate([u_s, u_a]), np.concatenate([g_s, g_a]))])
        write_csv(self.path("metrics/correlation.csv"), ["set", "n", "pearson"], rows)
        points = [["sft", u, g] for u, g in zip(u_s, g_s)] + [["adversarial", u, g] for u, g in zip(u_a, g_a)]
        write_csv(self.path("metrics/u_gold_points.csv"), ["set", "u", "gold"], points)
        self.manifest.mark("eval:correlation", requires=["round:r0"], table="metrics/correlation.csv", points="metrics/u_gold_points.csv")

    def evaluate(self, parts=EVAL_PARTS):
        ec = self.cfg.eval
        for part in parts:
            if part not in EVAL_PARTS:
                raise ConfigError(f"unknown evaluation part {part!r}")
        if "downstream" in parts:
            self.downstream()
        if "baselines" in parts:
            self.baselines()
        if "ablations" in parts and ec.ablations:
            self.ablations()
        if "correlation" in parts:
            self.correlation()

    def reproduce(self, until=None):
        order = ("gen-world", "round", "evaluate", "report")
        if until is not None and until not in order:
            raise ConfigError(f"--stage must be one of {', '.join(order)}")
        self.gen_world()
        if until == "gen-world":
            return
        self.rounds()
        if until == "round":
            return
        self.evaluate()
        if until == "evaluate":
            return
        from .report import write_report
        write_report(self.root)


def write_verdicts(path, batch, vs, method):
    rows = [{"prompt_id": int(p), "method": method, "standard": bool(v.standard_success),
             "strict": bool(v.strict_success), "z_rm1": float(v.z_rm1), "z_gold": float(v.z_gold),
             "tokens": batch.tokens[i, :batch.lengths[i]].tolist()}
            for i, (p, v) in enumerate(zip(batch.prompt_ids, vs))]
    write_jsonl(path, rows)


def read_verdicts(path):
    return [(r["standard"], r["strict"]) for r in read_jsonl(path)]
