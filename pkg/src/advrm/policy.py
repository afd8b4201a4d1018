"""Autoregressive policies and KL-regularized RLOO training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng as rngs
from .data import ResponseBatch
from .errors import ConfigError, NumericError
from .numerics import (EOS, ParamStore, adam_step, seq_backward, seq_log_probs, seq_step_logits,
                       step_inputs, update_prefix, sample_from_logits)

log = logging.getLogger(__name__)


@dataclass
class PolicyNet:
    store: ParamStore
    anchor: ParamStore

    @classmethod
    def from_store(cls, store: ParamStore) -> "PolicyNet":
        return cls(store, store.fresh_copy())

    def branch(self) -> "PolicyNet":
        """Trainable copy anchored at this policy's current parameters."""
        return PolicyNet(self.store.fresh_copy(), self.store.fresh_copy())

    @property
    def vocab(self):
        return self.store.arch["vocab"]

    @property
    def max_len(self):
        return self.store.arch["max_len"]


@dataclass
class RLConfig:
    kl_beta: float = 0.05
    lr: float = 1e-3
    batch_size: int = 64
    k: int = 4
    temperature: float = 1.0
    max_steps: int = 100

    def validate(self):
        if self.kl_beta < 0:
            raise ConfigError("kl_beta must be >= 0")
        if self.k < 2:
            raise ConfigError("RLOO needs k >= 2 samples per prompt")
        if self.lr <= 0 or self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("bad RL config")
        return self


PAPER_LR = 5e-7  # paper's LLM-scale learning rate, kept as a preset


def sample_responses(store: ParamStore, prompt_bags, prompt_ids, k, seed, key, temperature=1.0):
    """k responses per prompt. Row order is prompt-major.

    Each prompt draws its uniforms from its own stream keyed by
    (seed, *key, prompt_id), so results do not depend on batch composition.
    Returns (ResponseBatch, sequence log-probs).
    """
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    if len(np.unique(prompt_ids)) != len(prompt_ids):
        raise ConfigError("prompt ids in one sampling call must be unique")
    arch = store.arch
    V, L = arch["vocab"], arch["max_len"]
    key = tuple(key) if isinstance(key, (tuple, list)) else (key,)
    u = np.concatenate([rngs.stream(seed, *key, int(p)).random((k, L)) for p in prompt_ids]) \
        if len(prompt_ids) else np.zeros((0, L))
    rows = np.repeat(prompt_ids, k)
    bags = prompt_bags[rows]
    n = len(rows)
    tokens = np.full((n, L), EOS, dtype=np.int64)
    lengths = np.full(n, L, dtype=np.int64)
    logp = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    prefix = np.zeros((n, V))
    last = np.full(n, -1)
    for t in range(L):
        logits, _ = seq_step_logits(store, step_inputs(arch, bags, prefix, last, t), t)
        tok, lp = sample_from_logits(logits, u[:, t], temperature)
        tok = np.where(alive, tok, EOS)
        logp += np.where(alive, lp, 0.0)
        ended = alive & (tok == EOS)
        lengths[ended] = t
        tokens[:, t] = tok
        alive &= ~ended
        prefix = update_prefix(arch, prefix, tok)
        last = tok
        if not alive.any():
            break
    return ResponseBatch(rows, tokens, lengths), logp


def sequence_log_probs(store: ParamStore, prompt_bags, batch: ResponseBatch, temperature=1.0):
    _, seq = seq_log_probs(store, prompt_bags[batch.prompt_ids], batch.tokens, batch.lengths, temperature)
    return seq


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def rloo_advantages(rewards):
    """A_i = r_i - mean_{j != i} r_j along the last axis.

    Computed as (k r_i - sum r) / (k - 1), which is exactly shift-invariant
    whenever the shifted sums are exact (e.g. integer-valued rewards). Each
    group is then snapped to a power-of-two grid coarse enough that every
    partial sum is exact, so the group sums to exactly zero in any order.
    """
    r = np.asarray(rewards, dtype=np.float64)
    k = r.shape[-1]
    if k < 2:
        raise ConfigError("leave-one-out needs at least two samples")
    adv = (k * r - r.sum(axis=-1, keepdims=True)) / (k - 1)
    bound = k * np.abs(adv).max(axis=-1, keepdims=True)
    quantum = np.ldexp(1.0, np.frexp(bound)[1] - 50)
    adv = np.round(adv / quantum) * quantum
    adv[..., -1] = -adv[..., :-1].sum(axis=-1)
    return adv


def kl_penalized_reward(reward, logp_policy, logp_anchor, kl_beta):
    return np.asarray(reward) - kl_beta * (np.asarray(logp_policy) - np.asarray(logp_anchor))


class DivergenceError(NumericError):
    def __init__(self, message, policy, trace):
        super().__init__(message)
        self.policy = policy
        self.trace = trace


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batch_prompts(prompt_ids, batch_size, seed, step):
    prompt_ids = np.asarray(prompt_ids)
    if batch_size >= len(prompt_ids):
        return np.sort(prompt_ids)
    pick = rngs.stream(seed, "rl-batch", step).permutation(len(prompt_ids))[:batch_size]
    return np.sort(prompt_ids[pick])


def train_policy(policy: PolicyNet, reward_fn: Callable, prompt_ids, prompt_bags, config: RLConfig, seed,
                 gold_fn: Optional[Callable] = None, observer: Optional[Callable] = None, tag="rl",
                 start_step=0, eval_fn: Optional[Callable] = None, eval_every=0):
    """KL-regularized RLOO.

    ``reward_fn`` and ``gold_fn`` map a ResponseBatch to an array of scores.
    ``observer(step, batch, rewards)`` may return extra per-step metrics and
    ``eval_fn(step, store)`` extra metrics every ``eval_every`` steps. The
    trace has one record per step start_step..max_steps; record s describes
    the policy after s updates (the last record is rollout-only). Each step
    draws from streams keyed by its index, so a run resumed at ``start_step``
    from the matching parameters reproduces an uninterrupted one.
    """
    config.validate()
    store, anchor = policy.store, policy.anchor
    trace = []
    last_good = store.copy()
    B = min(config.batch_size, len(prompt_ids))
    for step in range(start_step, config.max_steps + 1):
        pids = _batch_prompts(prompt_ids, config.batch_size, seed, step)
        batch, logp = sample_responses(store, prompt_bags, pids, config.k, seed, (tag, "rollout", step),
                                       config.temperature)
        logp_anchor = sequence_log_probs(anchor, prompt_bags, batch, config.temperature)
        rewards = np.asarray(reward_fn(batch), dtype=np.float64)
        if not np.all(np.isfinite(rewards)) or not np.all(np.isfinite(logp)):
            policy.store = last_good
            raise DivergenceError(f"non-finite reward at step {step}", policy, trace)
        kl = logp - logp_anchor
        rec = {"step": step, "mean_train_reward": float(rewards.mean()),
               "mean_gold_reward": float(np.mean(gold_fn(batch))) if gold_fn is not None else float("nan"),
               "mean_length": float(batch.lengths.mean()), "mean_kl": float(kl.mean())}
        if observer is not None:
            rec.update(observer(step, batch, rewards) or {})
        if eval_fn is not None and eval_every and (step % eval_every == 0 or step == config.max_steps):
            rec.update(eval_fn(step, store) or {})
        trace.append(rec)
        if step == config.max_steps:
            break
        shaped = kl_penalized_reward(rewards, logp, logp_anchor, config.kl_beta)
        adv = rloo_advantages(shaped.reshape(B, config.k)).reshape(-1)
        grads = seq_backward(store, prompt_bags[batch.prompt_ids], batch.tokens, batch.lengths,
                             -adv / len(adv), config.temperature)
        last_good = store.copy()
        try:
            adam_step(store, grads, config.lr)
        except NumericError as exc:
            policy.store = last_good
            raise DivergenceError(str(exc), policy, trace) from exc
        if not store.is_finite():
            policy.store = last_good
            raise DivergenceError(f"parameters diverged at step {step}", policy, trace)
    return policy, trace


def fit_mle(store: ParamStore, prompt_bags, batch: ResponseBatch, epochs, lr, seed, batch_size=256):
    """Maximum-likelihood fit of a sequence model to fixed responses."""
    n = len(batch)
    gen = rngs.stream(seed, "mle-order")
    losses = []
    for _ in range(epochs):
        order = gen.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            sub = batch.take(idx)
            bags = prompt_bags[sub.prompt_ids]
            _, seq = seq_log_probs(store, bags, sub.tokens, sub.lengths)
            losses.append(-float(seq.mean()))
            grads = seq_backward(store, bags, sub.tokens, sub.lengths, -np.ones(len(idx)) / len(idx))
            adam_step(store, grads, lr)
    return losses
