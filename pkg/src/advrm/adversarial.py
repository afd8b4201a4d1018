"""Adversarial attacks on a pair of reward models and adversarial preference data.

The adversarial policy starts from the SFT policy and maximizes

    r1 - lam * r2    if r1 > T(x)
    r1 + C           otherwise

where r1 and r2 are the normalized scores of two proxies trained with
different seeds and T(x) is the mean r1 score of SFT responses to x.
Everything it samples during training is a candidate. Candidates that beat
T(x) with an uncertainty z-score above 1.96 become rejected responses of new
preference pairs, and the next round trains fresh proxies on the enlarged set.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng as rngs
from .data import PreferenceDataset, Response, ResponseBatch
from .errors import ConfigError, StateError
from .evaluation import StrictReferences, select_best, success_rate, verdicts
from .policy import PolicyNet, RLConfig, sample_responses, train_policy
from .reward import (RMConfig, RewardNet, UncertaintyReference, disagreement_values, score, train_rm,
                     uncertainty_zscore)

log = logging.getLogger(__name__)

Z_THRESHOLD = 1.96
LAMBDA_GRID = (8.0, 10.0, 12.0)
SFT_BANK_KEY = "sft-bank"


def _attack_rl():
    return RLConfig(kl_beta=0.02, lr=1e-3, max_steps=400)


@dataclass
class AttackConfig:
    lam: float = 10.0
    C: float = -25.0
    threshold: str = "sft_mean"  # "none" drops the penalty branch
    use_filter: bool = True      # False: evaluation and pairs ignore the filter
    cadence: int = 1             # collect candidates every `cadence` steps
    budget: int = 1000
    z_threshold: float = Z_THRESHOLD
    lam_grid: tuple = LAMBDA_GRID
    tune_lambda: bool = True
    n_threshold_samples: int = 64
    n_eval_attacks: int = 4
    chosen_attempts: int = 4
    rl: RLConfig = field(default_factory=_attack_rl)

    def validate(self):
        if self.lam <= 0 or any(v <= 0 for v in self.lam_grid):
            raise ConfigError("lambda must be positive")
        if self.C >= 0:
            raise ConfigError("C must be negative so the penalty branch scores lower")
        if self.threshold not in ("sft_mean", "none"):
            raise ConfigError(f"unknown threshold mode {self.threshold!r}")
        if self.cadence < 1 or self.budget < 0 or self.n_eval_attacks < 1 or self.chosen_attempts < 0:
            raise ConfigError("bad attack schedule")
        if self.n_threshold_samples < 8:
            raise ConfigError("T(x) needs at least 8 SFT samples")
        self.rl.validate()
        return self


# ---------------------------------------------------------------------------
# SFT references and thresholds
# ---------------------------------------------------------------------------

@dataclass
class SFTBank:
    """``n`` SFT responses for each prompt, prompt-major, sorted by prompt id."""

    batch: ResponseBatch
    prompt_ids: np.ndarray
    n: int

    @classmethod
    def sample(cls, world, sft: PolicyNet, n, seed, prompt_ids=None) -> "SFTBank":
        ids = np.arange(world.n_prompts) if prompt_ids is None else np.unique(prompt_ids)
        batch, _ = sample_responses(sft.store, world.prompt_bags, ids, n, seed, SFT_BANK_KEY)
        return cls(batch, ids, n)

    def rows(self, prompt_ids) -> np.ndarray:
        """(len(prompt_ids), n) row indices."""
        prompt_ids = np.asarray(prompt_ids)
        pos = np.searchsorted(self.prompt_ids, prompt_ids)
        if np.any(pos >= len(self.prompt_ids)) or np.any(self.prompt_ids[np.minimum(pos, len(self.prompt_ids) - 1)] != prompt_ids):
            raise StateError("prompt not in the SFT bank")
        return pos[:, None] * self.n + np.arange(self.n)[None, :]

    def subset(self, prompt_ids, per_prompt=None) -> ResponseBatch:
        per_prompt = self.n if per_prompt is None else per_prompt
        return self.batch.take(self.rows(prompt_ids)[:, :per_prompt].reshape(-1))


_T_CACHE: dict = {}


def thresholds(world, prompt_ids, sft: PolicyNet, rm1: RewardNet, n_samples=64, seed=0, cache=None) -> np.ndarray:
    """T(x) for each prompt: mean normalized rm1 score of ``n_samples`` fresh SFT responses.

    Sampling uses the SFT bank streams, so T agrees with a bank of the same
    size and seed. Values are cached per (rm1, sft, n_samples, seed, prompt).
    """
    if n_samples < 8:
        raise ConfigError("T(x) needs at least 8 SFT samples")
    if not rm1.calibrated:
        raise StateError("rm1 must be calibrated before computing thresholds")
    cache = _T_CACHE if cache is None else cache
    base = (rm1.fingerprint(), sft.store.digest(), int(n_samples), int(seed))
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    missing = np.unique([p for p in prompt_ids.tolist() if (base, p) not in cache])
    if len(missing):
        batch, _ = sample_responses(sft.store, world.prompt_bags, missing, n_samples, seed, SFT_BANK_KEY)
        means = rm1.scores(batch).reshape(len(missing), n_samples).mean(axis=1)
        for p, t in zip(missing.tolist(), means):
            cache[(base, p)] = float(t)
    return np.array([cache[(base, p)] for p in prompt_ids.tolist()])


def threshold_T(world, prompt_id, sft: PolicyNet, rm1: RewardNet, n_samples=64, seed=0, cache=None) -> float:
    return float(thresholds(world, [prompt_id], sft, rm1, n_samples, seed, cache)[0])


def threshold_table(world, sft, rm1, n_samples, seed, prompt_ids=None) -> np.ndarray:
    """T indexed by prompt id (NaN for prompts not requested)."""
    ids = np.arange(world.n_prompts) if prompt_ids is None else np.asarray(prompt_ids)
    table = np.full(world.n_prompts, np.nan)
    table[ids] = thresholds(world, ids, sft, rm1, n_samples, seed)
    return table


# ---------------------------------------------------------------------------
# attack reward
# ---------------------------------------------------------------------------

def adv_reward_values(r1, r2, T, config: AttackConfig):
    """Vectorized attack reward. Returns (reward, case1 flags)."""
    r1, r2, T = (np.asarray(a, dtype=np.float64) for a in (r1, r2, T))
    case1 = np.ones(r1.shape, dtype=bool) if config.threshold == "none" else r1 > T
    return np.where(case1, r1 - config.lam * r2, r1 + config.C), case1


def adv_reward(prompt_id, response: Response, rm1: RewardNet, rm2: RewardNet, T, config: AttackConfig) -> float:
    r1 = score(rm1, prompt_id, response)
    r2 = score(rm2, prompt_id, response)
    return float(adv_reward_values(r1, r2, T, config)[0])


class DominanceMonitor:
    """Tracks, per prompt, the lowest case-1 and highest case-2 attack reward seen."""

    def __init__(self, n_prompts):
        self.min_case1 = np.full(n_prompts, np.inf)
        self.max_case2 = np.full(n_prompts, -np.inf)

    def update(self, prompt_ids, reward, case1):
        np.minimum.at(self.min_case1, prompt_ids[case1], reward[case1])
        np.maximum.at(self.max_case2, prompt_ids[~case1], reward[~case1])

    @property
    def violations(self) -> int:
        return int(np.sum(self.max_case2 >= self.min_case1))

    def report(self):
        if self.violations:
            log.error("configuration error: penalty branch not dominated on %d prompts; make C more negative",
                      self.violations)
        return self.violations


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdvSample:
    prompt_id: int
    response: Response
    r1: float
    r2: float
    u: float
    z: float
    passed_filter: bool


@dataclass
class AdvCandidates:
    """Column-wise attack candidates. ``passed`` is r1 > T and z > z_threshold."""

    batch: ResponseBatch
    r1: np.ndarray
    r2: np.ndarray
    u: np.ndarray
    z: np.ndarray
    T: np.ndarray
    gold: np.ndarray
    step: np.ndarray
    z_threshold: float = Z_THRESHOLD

    def __len__(self):
        return len(self.batch)

    @property
    def passed(self) -> np.ndarray:
        return (self.r1 > self.T) & (self.z > self.z_threshold)

    def take(self, idx) -> "AdvCandidates":
        return AdvCandidates(self.batch.take(idx), self.r1[idx], self.r2[idx], self.u[idx], self.z[idx],
                             self.T[idx], self.gold[idx], self.step[idx], self.z_threshold)

    def sample(self, i) -> AdvSample:
        return AdvSample(int(self.batch.prompt_ids[i]), self.batch.response(i), float(self.r1[i]),
                         float(self.r2[i]), float(self.u[i]), float(self.z[i]), bool(self.passed[i]))

    def samples(self):
        return [self.sample(i) for i in range(len(self))]

    @classmethod
    def concat(cls, parts, max_len, z_threshold=Z_THRESHOLD) -> "AdvCandidates":
        parts = list(parts)
        if not parts:
            e = np.zeros(0)
            return cls(ResponseBatch.empty(max_len), e, e, e, e, e, e, np.zeros(0, np.int64), z_threshold)
        return cls(ResponseBatch.concat(p.batch for p in parts),
                   *[np.concatenate([getattr(p, k) for p in parts]) for k in ("r1", "r2", "u", "z", "T", "gold", "step")],
                   z_threshold)


class Scorer:
    """Scores batches with the attacked pair and the reference statistics for one lambda."""

    def __init__(self, rm1: RewardNet, rm2: RewardNet, lam, T_table, u_ref: UncertaintyReference, gold=None):
        self.rm1, self.rm2, self.lam, self.T, self.u_ref, self.gold = rm1, rm2, lam, T_table, u_ref, gold

    def __call__(self, batch: ResponseBatch, step=-1, z_threshold=Z_THRESHOLD) -> AdvCandidates:
        r1, r2 = self.rm1.scores(batch), self.rm2.scores(batch)
        u = disagreement_values(np.stack([r1, r2]), "weighted_diff", self.lam)
        T = self.T[batch.prompt_ids]
        if np.any(np.isnan(T)):
            raise StateError("threshold missing for some prompts")
        gold = self.gold.scores(batch) if self.gold is not None and self.gold.calibrated else np.full(len(batch), np.nan)
        return AdvCandidates(batch, r1, r2, u, uncertainty_zscore(u, self.u_ref), T, gold,
                             np.full(len(batch), step, dtype=np.int64), z_threshold)


def uncertainty_reference(rm1: RewardNet, rm2: RewardNet, lam, sft_responses: ResponseBatch) -> UncertaintyReference:
    u = disagreement_values(np.stack([rm1.scores(sft_responses), rm2.scores(sft_responses)]), "weighted_diff", lam)
    return UncertaintyReference.fit(u)


@dataclass
class AttackResult:
    policy: PolicyNet
    candidates: AdvCandidates
    trace: list
    lam: float
    scorer: Scorer
    dominance_violations: int


def train_adversarial_policy(world, sft: PolicyNet, rm1: RewardNet, rm2: RewardNet, config: AttackConfig, seed,
                             T_table=None, sft_reference: ResponseBatch = None, tag="attack") -> AttackResult:
    """RLOO on the attack reward, starting from the SFT policy.

    Every rollout sample of every ``cadence``-th step is scored and kept as a
    candidate. ``sft_reference`` provides the SFT responses for the
    uncertainty z-score; ``T_table`` maps prompt id to T(x).
    """
    config.validate()
    if T_table is None:
        T_table = threshold_table(world, sft, rm1, config.n_threshold_samples, seed, world.train_ids)
    if sft_reference is None:
        sft_reference = SFTBank.sample(world, sft, config.n_threshold_samples, seed, world.train_ids).batch
    scorer = Scorer(rm1, rm2, config.lam, T_table, uncertainty_reference(rm1, rm2, config.lam, sft_reference), world.gold)
    parts, monitor = [], DominanceMonitor(world.n_prompts)
    counter = {"step": 0}
    last = {}

    def reward_fn(batch):
        step = counter["step"]
        counter["step"] += 1
        cand = scorer(batch, step, config.z_threshold)
        reward, case1 = adv_reward_values(cand.r1, cand.r2, cand.T, config)
        monitor.update(batch.prompt_ids, reward, case1)
        if step % config.cadence == 0:
            parts.append(cand)
        last["cand"] = cand
        return reward

    def observer(step, batch, rewards):
        c = last["cand"]
        return {"mean_r1": float(c.r1.mean()), "mean_r2": float(c.r2.mean()), "mean_z": float(c.z.mean()),
                "frac_above_T": float(np.mean(c.r1 > c.T)), "frac_passed": float(c.passed.mean())}

    policy = sft.branch()
    policy, trace = train_policy(policy, reward_fn, world.train_ids, world.prompt_bags, config.rl, seed,
                                 gold_fn=world.gold.scores if world.gold.calibrated else None,
                                 observer=observer, tag=(tag, config.lam))
    return AttackResult(policy, AdvCandidates.concat(parts, world.config.max_len, config.z_threshold), trace,
                        config.lam, scorer, monitor.report())


def filter_candidates(cands: AdvCandidates, enabled=True) -> AdvCandidates:
    """Keep r1 > T and z > threshold, drop exact duplicates, order by (prompt id, -z)."""
    keep = np.nonzero(cands.passed)[0] if enabled else np.arange(len(cands))
    seen, uniq = set(), []
    keys = cands.batch.keys()
    for i in keep:
        if keys[i] not in seen:
            seen.add(keys[i])
            uniq.append(i)
    uniq = np.array(uniq, dtype=np.int64)
    if len(uniq):
        uniq = uniq[np.lexsort((-cands.z[uniq], cands.batch.prompt_ids[uniq]))]
    out = cands.take(uniq)
    if enabled:
        assert np.all(out.r1 > out.T) and np.all(out.z > out.z_threshold), "filter soundness"
    if len(out) == 0:
        log.warning("no candidate passed the filter: attack failed")
    return out


# ---------------------------------------------------------------------------
# preference pairs
# ---------------------------------------------------------------------------

def build_adv_pairs(world, adv: AdvCandidates, sft: PolicyNet, rm1: RewardNet, budget=1000, seed=0,
                    bank: SFTBank = None, attempts=4, round_index=0) -> PreferenceDataset:
    """Pairs (chosen = SFT response with r1 > T, rejected = attack), highest z first.

    Chosen responses come from the SFT bank for the prompt, cycling through the
    qualifying ones; if none qualify, fresh SFT samples are drawn up to
    ``attempts`` times before the prompt is dropped.
    """
    if len(adv) and not np.all(adv.passed):
        raise StateError("build_adv_pairs expects filtered candidates")
    order = np.argsort(-adv.z, kind="stable")[:budget]
    chosen_pool = {}
    dropped = set()
    rows, chosen_tok, chosen_len = [], [], []
    L = world.config.max_len
    for i in order:
        pid = int(adv.batch.prompt_ids[i])
        if pid in dropped:
            continue
        if pid not in chosen_pool:
            pool = _qualifying_sft(world, sft, rm1, pid, float(adv.T[i]), seed, bank, attempts)
            if pool is None:
                log.warning("prompt %d: no SFT response above T after %d attempts; dropped", pid, attempts)
                dropped.add(pid)
                continue
            chosen_pool[pid] = [pool, 0]
        pool, used = chosen_pool[pid]
        j = used % len(pool)
        chosen_pool[pid][1] += 1
        rows.append(i)
        chosen_tok.append(pool.tokens[j])
        chosen_len.append(pool.lengths[j])
    rows = np.array(rows, dtype=np.int64)
    sel = adv.take(rows)
    if len(rows) == 0:
        return _empty_pairs(L)
    chosen = ResponseBatch(sel.batch.prompt_ids, np.array(chosen_tok), np.array(chosen_len))
    r1_chosen = rm1.scores(chosen)
    assert np.all(r1_chosen > sel.T), "chosen responses must beat T(x)"
    assert np.all(sel.passed), "rejected responses must pass the filter"
    n = len(rows)
    return PreferenceDataset(chosen, sel.batch, np.full(n, "adversarial", dtype=object),
                             world.gold.raw(chosen), world.gold.raw(sel.batch),
                             {"r1": sel.r1, "r2": sel.r2, "u": sel.u, "z": sel.z,
                              "round": np.full(n, float(round_index))})


def _empty_pairs(L):
    e = ResponseBatch.empty(L)
    return PreferenceDataset(e, e.take(np.arange(0)), np.zeros(0, dtype=object), np.zeros(0), np.zeros(0),
                             {k: np.zeros(0) for k in ("r1", "r2", "u", "z", "round")})


def _qualifying_sft(world, sft, rm1, pid, T, seed, bank, attempts) -> Optional[ResponseBatch]:
    if bank is not None and pid in set(bank.prompt_ids.tolist()):
        cand = bank.subset([pid])
        ok = rm1.scores(cand) > T
        if ok.any():
            return cand.take(np.nonzero(ok)[0])
    for a in range(attempts):
        cand, _ = sample_responses(sft.store, world.prompt_bags, [pid], 16, seed, ("chosen-retry", a))
        ok = rm1.scores(cand) > T
        if ok.any():
            return cand.take(np.nonzero(ok)[0])
    return None


# ---------------------------------------------------------------------------
# ensembles and rounds
# ---------------------------------------------------------------------------

def train_ensemble(dataset: PreferenceDataset, world, rm_config: RMConfig, K, seed, round_index,
                   calibration: ResponseBatch):
    """K fresh proxies. Initial parameters depend on (seed, member) only; data
    order also depends on the round, so each round starts from the same seed-fresh
    initialization and never from an earlier round's parameters."""
    members = []
    for k in range(K):
        init_seed = rngs.derive_seed(seed, "rm-init", k)
        order_seed = rngs.derive_seed(seed, "rm-order", round_index, k)
        rm = train_rm(dataset, world.features, rm_config, seed=order_seed, init_seed=init_seed,
                      reference=calibration,
                      lineage={"round": round_index, "member": k, "order_seed": order_seed,
                               "n_pairs": len(dataset), "n_adversarial": dataset.count("adversarial")})
        rm.tag = f"proxy-r{round_index}-m{k}"
        members.append(rm)
    return members


def assert_fresh(members, round_index):
    for m in members:
        lin = m.lineage
        if lin.get("init") != "fresh" or lin.get("round") != round_index:
            raise StateError(f"{m.tag}: reward model was not trained from scratch in round {round_index}")


@dataclass
class EvalAttack:
    """Attack responses on eval prompts and their verdicts."""

    batch: ResponseBatch
    verdicts: list
    u: np.ndarray
    z: np.ndarray
    passed: np.ndarray

    @property
    def strict_rate(self):
        return success_rate([v.strict_success for v in self.verdicts])

    @property
    def standard_rate(self):
        return success_rate([v.standard_success for v in self.verdicts])


def evaluate_attack(world, attack: AttackResult, sft: PolicyNet, config: AttackConfig, refs: StrictReferences,
                    seed, eval_reference: ResponseBatch = None) -> EvalAttack:
    """n_eval_attacks samples per eval prompt; keep the highest-U one.

    With the filter on, the pick is the highest-U sample among those that
    pass the filter (falling back to the highest U overall).
    """
    sc = attack.scorer
    T_eval = threshold_table(world, sft, sc.rm1, config.n_threshold_samples, seed, world.eval_ids)
    if eval_reference is None:
        eval_reference = SFTBank.sample(world, sft, config.n_threshold_samples, seed, world.eval_ids).batch
    scorer = Scorer(sc.rm1, sc.rm2, sc.lam, T_eval, uncertainty_reference(sc.rm1, sc.rm2, sc.lam, eval_reference),
                    world.gold)
    n = config.n_eval_attacks
    batch, _ = sample_responses(attack.policy.store, world.prompt_bags, world.eval_ids, n, seed, "eval-attacks")
    cand = scorer(batch, z_threshold=config.z_threshold)
    key = cand.u.copy()
    if config.use_filter:
        key = np.where(cand.passed, key, key - 1e12)
    pick = select_best(batch, key, n)
    chosen = cand.take(pick)
    return EvalAttack(chosen.batch, verdicts(chosen.batch, sc.rm1, world.gold, refs), chosen.u, chosen.z,
                      chosen.passed)


@dataclass
class RoundResult:
    round_index: int
    members: list
    dataset: PreferenceDataset          # training set of this round
    pairs: PreferenceDataset            # adversarial pairs built this round
    attack: Optional[AttackResult]
    filtered: Optional[AdvCandidates]
    evaluation: Optional[EvalAttack]
    report: dict

    @property
    def failed(self):
        return self.filtered is None or len(self.filtered) == 0

    def next_dataset(self) -> PreferenceDataset:
        return PreferenceDataset.concat([self.dataset, self.pairs]) if len(self.pairs) else self.dataset


def check_round_dataset(dataset: PreferenceDataset, original_size, round_index):
    """Round r trains on the original pairs plus adversarial pairs of every round < r."""
    rounds = dataset.extra.get("round")
    adv_rounds = set() if rounds is None else {int(r) for r in rounds[dataset.source == "adversarial"]}
    if adv_rounds != set(range(round_index)):
        raise StateError(f"round {round_index} needs the adversarial pairs of rounds 0..{round_index - 1}, "
                         f"found rounds {sorted(adv_rounds)}")
    if dataset.count("original") != original_size:
        raise StateError("original pairs changed between rounds")


def attack_with_tuning(world, sft, rm1, rm2, config: AttackConfig, seed, T_table, sft_reference, tag="attack"):
    """Attack for each lambda in the grid (or just config.lam); keep the one with most retained candidates."""
    grid = config.lam_grid if config.tune_lambda else (config.lam,)
    best, best_n = None, -1
    for lam in grid:
        cfg = replace(config, lam=float(lam))
        res = train_adversarial_policy(world, sft, rm1, rm2, cfg, seed, T_table, sft_reference, tag=tag)
        n = len(filter_candidates(res.candidates, config.use_filter))
        log.info("attack lambda=%g: %d retained candidates", lam, n)
        if n > best_n:
            best, best_n = res, n
    return best


def adversarial_round(world, sft: PolicyNet, base_dataset: PreferenceDataset, round_index, rm_config: RMConfig,
                      attack_config: AttackConfig, seed, bank: SFTBank, refs_fn=None, K=2,
                      original_size=None, calibration: ResponseBatch = None) -> RoundResult:
    """Train fresh proxies on ``base_dataset``, attack them, filter and build pairs.

    ``refs_fn(rm1)`` returns the strict references for evaluating the attack
    on eval prompts; without it the round is not evaluated.
    """
    attack_config.validate()
    original_size = base_dataset.count("original") if original_size is None else original_size
    check_round_dataset(base_dataset, original_size, round_index)
    if calibration is None:
        calibration = bank.subset(world.train_ids, 4)
    members = train_ensemble(base_dataset, world, rm_config, K, seed, round_index, calibration)
    assert_fresh(members, round_index)
    rm1, rm2 = members[0], members[1]
    T_table = threshold_table(world, sft, rm1, attack_config.n_threshold_samples, seed, world.train_ids)
    sft_ref = bank.subset(world.train_ids, attack_config.n_threshold_samples)
    attack = attack_with_tuning(world, sft, rm1, rm2, attack_config, seed, T_table, sft_ref,
                                tag=("attack", round_index))
    filtered = filter_candidates(attack.candidates, True)
    pairs = build_adv_pairs(world, filtered, sft, rm1, attack_config.budget, seed, bank,
                            attack_config.chosen_attempts, round_index) if len(filtered) else _empty_pairs(world.config.max_len)
    evaluation = None
    report = {"round": round_index, "lambda": attack.lam, "n_train_pairs": len(base_dataset),
              "candidates": len(attack.candidates), "retained": len(filtered), "pairs_built": len(pairs),
              "attack_failed": len(filtered) == 0, "dominance_violations": attack.dominance_violations}
    if refs_fn is not None:
        evaluation = evaluate_attack(world, attack, sft, attack_config, refs_fn(rm1), seed,
                                     bank.subset(world.eval_ids, attack_config.n_threshold_samples))
        rate, se = evaluation.strict_rate
        report.update({"strict_success_rate": rate, "strict_success_se": se,
                       "standard_success_rate": evaluation.standard_rate[0]})
    return RoundResult(round_index, members, base_dataset, pairs, attack, filtered, evaluation, report)


def run_rounds(world, sft, original: PreferenceDataset, rm_config, attack_config, seed, bank, refs_fn=None,
               max_rounds=2, K=2, calibration=None):
    """Rounds 0..max_rounds. Each round's proxies are attacked; pairs from
    rounds < max_rounds feed the next round. Stops early if an attack fails."""
    if "round" not in original.extra:
        original = PreferenceDataset(original.chosen, original.rejected, original.source, original.gold_chosen,
                                     original.gold_rejected, {**original.extra, "round": np.full(len(original), -1.0)})
    results, dataset = [], original
    for r in range(max_rounds + 1):
        res = adversarial_round(world, sft, dataset, r, rm_config, attack_config, seed, bank, refs_fn, K,
                                len(original), calibration)
        results.append(res)
        if res.failed:
            log.info("round %d: attack no longer succeeds; stopping", r)
            break
        dataset = res.next_dataset()
    return results
