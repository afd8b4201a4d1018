"""The synthetic language world.

Tokens 1..V-1 are content; token 0 ends a response. Prompts are short token
strings. A frozen, hand-structured gold network scores (prompt, response)
pairs; proxies see a different, standardized feature map.

Gold quality rewards high-quality tokens, tokens that echo the prompt, length
up to a target, and distinct tokens, and it sharply penalizes repetition.
Repetition is rare under the SFT policy, so proxies never see it in training.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import rng as rngs
from .data import PreferenceDataset, Prompt, ResponseBatch
from .errors import ConfigError
from .numerics import EOS, ParamStore, init_seqmodel, mlp_forward
from .policy import PolicyNet, fit_mle, sample_responses
from .reward import RewardNet

log = logging.getLogger(__name__)


@dataclass
class WorldConfig:
    vocab_size: int = 32
    max_len: int = 16
    prompt_len: int = 8
    n_train_prompts: int = 256
    n_eval_prompts: int = 128
    embed_dim: int = 8
    n_junk: int = 6
    junk_dims: int = 4
    n_buckets: int = 16
    sigma_floor: float = 0.02
    # gold network
    gold_hidden: int = 64
    pool_decay: float = 0.9
    w_quality: float = 2.0
    w_relevance: float = 3.0
    w_length: float = 1.0
    length_target: float = 0.75
    w_overlength: float = 1.0
    w_repeat: float = 10.0
    repeat_free: float = 0.35
    w_adjacent: float = 2.0
    w_distinct: float = 1.0
    distinct_min: float = 0.6
    w_lowdistinct: float = 20.0
    junk_quality: float = -6.0
    w_junk: float = 3.0
    w_random: float = 0.5
    # SFT cloning
    sft_candidates: int = 16
    demo_junk_weight: float = 0.5
    sft_keep: float = 0.25
    sft_hidden: int = 64
    sft_epochs: int = 30
    sft_lr: float = 1e-2

    def validate(self):
        if self.vocab_size < 2 or self.max_len < 1:
            raise ConfigError("degenerate world: need vocab_size >= 2 and max_len >= 1")
        if self.vocab_size < 8:
            raise ConfigError("vocab_size must be at least 8")
        if self.n_train_prompts < 1 or self.n_eval_prompts < 1 or self.prompt_len < 1:
            raise ConfigError("need at least one prompt of length >= 1")
        if not 0 <= self.n_junk <= self.vocab_size - 4:
            raise ConfigError("n_junk must leave at least three ordinary tokens")
        return self


def token_stats(tokens, lengths, vocab):
    """Counts (N,V) and per-row length, distinct, max-frequency and adjacent-repeat fractions."""
    n, L = tokens.shape
    lengths = np.asarray(lengths)
    mask = np.arange(L)[None, :] < lengths[:, None]
    counts = np.zeros((n, vocab))
    rows = np.repeat(np.arange(n), L).reshape(n, L)
    np.add.at(counts, (rows[mask], tokens[mask]), 1.0)
    ln = np.maximum(lengths, 1).astype(np.float64)
    distinct = (counts > 0).sum(axis=1) / ln
    maxfreq = counts.max(axis=1) / ln
    pair_mask = mask[:, 1:]
    same = (tokens[:, 1:] == tokens[:, :-1]) & pair_mask
    adj = same.sum(axis=1) / np.maximum(lengths - 1, 1)
    return counts, ln, distinct, maxfreq, adj, mask


class FeatureMap:
    """Standardized proxy features of (prompt, response).

    [uniform mean-pooled embedding | length, distinct, max-frequency,
    adjacent-repeat fractions | hashed bigram frequencies | prompt overlap,
    prompt-embedding dot product].
    """

    def __init__(self, world: "World"):
        self.world = world
        self.max_len = world.config.max_len
        self.mu = None
        self.sigma = None

    @property
    def n_features(self):
        c = self.world.config
        return c.embed_dim + c.junk_dims + 4 + c.n_buckets + 2

    def raw(self, batch: ResponseBatch) -> np.ndarray:
        w, c = self.world, self.world.config
        counts, ln, distinct, maxfreq, adj, mask = token_stats(batch.tokens, batch.lengths, c.vocab_size)
        mean_emb = counts @ w.embedding / ln[:, None]
        buckets = np.zeros((len(batch), c.n_buckets))
        pair_mask = mask[:, 1:]
        b = w.bucket_table[batch.tokens[:, :-1], batch.tokens[:, 1:]]
        rows = np.repeat(np.arange(len(batch)), batch.max_len - 1).reshape(len(batch), -1)
        np.add.at(buckets, (rows[pair_mask], b[pair_mask]), 1.0)
        buckets /= np.maximum(batch.lengths - 1, 1)[:, None]
        pid = batch.prompt_ids
        overlap = (counts * w.in_prompt[pid]).sum(axis=1) / ln
        dot = (mean_emb * w.prompt_emb[pid]).sum(axis=1)
        return np.column_stack([mean_emb, batch.lengths / c.max_len, distinct, maxfreq, adj, buckets, overlap, dot])

    def fit(self, batch: ResponseBatch):
        f = self.raw(batch)
        self.mu = f.mean(axis=0)
        self.sigma = np.maximum(f.std(axis=0), self.world.config.sigma_floor)
        return self

    def __call__(self, batch: ResponseBatch) -> np.ndarray:
        return (self.raw(batch) - self.mu) / self.sigma


class GoldFeatures:
    """Position-weighted pooling used only by the gold network."""

    def __init__(self, world: "World"):
        self.world = world
        self.max_len = world.config.max_len

    @property
    def n_features(self):
        return 7 + 2 * self.world.config.embed_dim

    def __call__(self, batch: ResponseBatch) -> np.ndarray:
        w, c = self.world, self.world.config
        counts, ln, distinct, maxfreq, adj, mask = token_stats(batch.tokens, batch.lengths, c.vocab_size)
        pw = np.where(mask, c.pool_decay ** np.arange(batch.max_len)[None, :], 0.0)
        pw /= np.maximum(pw.sum(axis=1, keepdims=True), 1e-12)
        qual = (pw * w.quality[batch.tokens]).sum(axis=1)
        rel = (pw * w.in_prompt[batch.prompt_ids[:, None], batch.tokens]).sum(axis=1)
        pooled = np.einsum("nt,ntd->nd", pw, w.embedding[batch.tokens, :c.embed_dim])
        n_junk = counts[:, w.junk_tokens].sum(axis=1)
        return np.column_stack([qual, rel, batch.lengths / c.max_len, distinct, maxfreq, adj, n_junk,
                                pooled, w.prompt_emb[batch.prompt_ids, :c.embed_dim]])


@dataclass
class World:
    config: WorldConfig
    seed: int
    prompt_tokens: np.ndarray
    prompt_lens: np.ndarray
    embedding: np.ndarray
    quality: np.ndarray
    bucket_table: np.ndarray
    train_ids: np.ndarray = None
    eval_ids: np.ndarray = None
    features: FeatureMap = field(default=None, repr=False)
    gold: RewardNet = field(default=None, repr=False)
    junk_tokens: np.ndarray = None

    def __post_init__(self):
        V = self.config.vocab_size
        P = len(self.prompt_lens)
        self.prompt_bags = np.zeros((P, V))
        self.in_prompt = np.zeros((P, V))
        for i, (toks, n) in enumerate(zip(self.prompt_tokens, self.prompt_lens)):
            np.add.at(self.prompt_bags[i], toks[:n], 1.0 / n)
            self.in_prompt[i, toks[:n]] = 1.0
        self.prompt_emb = self.prompt_bags @ self.embedding

    @property
    def n_prompts(self):
        return len(self.prompt_lens)

    def prompt(self, pid) -> Prompt:
        return Prompt(int(pid), tuple(int(t) for t in self.prompt_tokens[pid, :self.prompt_lens[pid]]))

    def random_responses(self, prompt_ids, per_prompt, gen: np.random.Generator, junk_weight=1.0) -> ResponseBatch:
        """Uniform lengths in [1, L]; content tokens uniform except junk, scaled by ``junk_weight``."""
        c = self.config
        rows = np.repeat(np.asarray(prompt_ids), per_prompt)
        n = len(rows)
        lengths = gen.integers(1, c.max_len + 1, size=n)
        p = np.ones(c.vocab_size)
        p[EOS] = 0.0
        if self.junk_tokens is not None:
            p[self.junk_tokens] = junk_weight
        tokens = gen.choice(c.vocab_size, size=(n, c.max_len), p=p / p.sum())
        tokens[np.arange(c.max_len)[None, :] >= lengths[:, None]] = EOS
        return ResponseBatch(rows, tokens, lengths)


def _gold_store(world: World, gen: np.random.Generator) -> ParamStore:
    c = world.config
    d = c.embed_dim
    n_in = 7 + 2 * d
    H = c.gold_hidden
    n_design = 11
    if H < n_design + 1:
        raise ConfigError(f"gold_hidden must be > {n_design}")
    W0 = np.zeros((H, n_in))
    b0 = np.zeros(H)
    W1 = np.zeros((1, H))
    QUAL, REL, LEN, DIST, MAXF, ADJ, JUNK = range(7)
    # identity pairs relu(z) - relu(-z) for the signed inputs
    for u, j, wt in ((0, QUAL, c.w_quality), (2, REL, c.w_relevance)):
        W0[u, j], W0[u + 1, j] = 1.0, -1.0
        W1[0, u], W1[0, u + 1] = wt, -wt
    W0[4, LEN], W1[0, 4] = 1.0, c.w_length
    W0[5, LEN], b0[5], W1[0, 5] = 1.0, -c.length_target, -(c.w_length + c.w_overlength)
    W0[6, MAXF], b0[6], W1[0, 6] = 1.0, -c.repeat_free, -c.w_repeat
    W0[7, ADJ], W1[0, 7] = 1.0, -c.w_adjacent
    W0[8, DIST], W1[0, 8] = 1.0, c.w_distinct
    W0[9, DIST], b0[9], W1[0, 9] = -1.0, c.distinct_min, -c.w_lowdistinct
    W0[10, JUNK], W1[0, 10] = 1.0, -c.w_junk
    # remaining units: random interactions of pooled response and prompt embeddings
    n_rand = H - n_design
    W0[n_design:, 7:] = gen.normal(0.0, 1.0, size=(n_rand, 2 * d))
    b0[n_design:] = gen.normal(0.0, 0.5, size=n_rand)
    W1[0, n_design:] = gen.normal(0.0, c.w_random / math.sqrt(n_rand), size=n_rand)
    arch = {"kind": "mlp", "sizes": [n_in, H, 1], "activation": "relu", "tag": "gold"}
    return ParamStore({"W0": W0, "b0": b0, "W1": W1, "b1": np.zeros(1)}, arch)


def build_world(config: WorldConfig, seed: int) -> World:
    """Prompts, embeddings, gold network, curated demonstrations and proxy features.

    The last ``n_junk`` tokens are junk: gold rates them far below any
    ordinary token and their embeddings carry extra directions that ordinary
    tokens never touch. Proxy features are standardized on the curated
    demonstrations, where junk is nearly absent.
    """
    config.validate()
    V, d, J = config.vocab_size, config.embed_dim, config.junk_dims
    gen = rngs.stream(seed, "world")
    P = config.n_train_prompts + config.n_eval_prompts
    n_ok = V - 1 - config.n_junk
    plen = gen.integers(max(1, config.prompt_len // 2), config.prompt_len + 1, size=P)
    ptok = gen.integers(1, 1 + n_ok, size=(P, config.prompt_len))
    ptok[np.arange(config.prompt_len)[None, :] >= plen[:, None]] = EOS
    emb = np.zeros((V, d + J))
    emb[1:, :d] = gen.normal(0.0, 1.0, size=(V - 1, d))
    junk = np.arange(1 + n_ok, V)
    emb[junk, d:] = gen.normal(0.0, 1.0, size=(len(junk), J))
    direction = gen.normal(0.0, 1.0, size=d)
    q = emb[:, :d] @ direction
    ok = slice(1, 1 + n_ok)
    q[ok] = (q[ok] - q[ok].mean()) / q[ok].std()
    q[junk] = config.junk_quality
    q[EOS] = 0.0
    buckets = gen.integers(0, config.n_buckets, size=(V, V))
    world = World(config, seed, ptok, plen, emb, q, buckets,
                  train_ids=np.arange(config.n_train_prompts),
                  eval_ids=np.arange(config.n_train_prompts, P))
    world.junk_tokens = junk
    world.gold = RewardNet(_gold_store(world, rngs.stream(seed, "gold")), GoldFeatures(world), tag="gold", seed=seed)
    world.features = FeatureMap(world).fit(curated_demos(world, seed))
    return world


def curated_demos(world: World, seed: int) -> ResponseBatch:
    """Best-of-N demonstrations: the top ``sft_keep`` fraction of random responses by gold."""
    c = world.config
    if c.sft_candidates < 8:
        raise ConfigError("sft_candidates must be at least 8")
    cand = world.random_responses(world.train_ids, c.sft_candidates, rngs.stream(seed, "sft-candidates"),
                                  junk_weight=c.demo_junk_weight)
    gold = world.gold.raw(cand).reshape(len(world.train_ids), c.sft_candidates)
    keep = max(1, int(round(c.sft_keep * c.sft_candidates)))
    top = np.argsort(-gold, axis=1, kind="stable")[:, :keep]
    idx = (np.arange(len(world.train_ids))[:, None] * c.sft_candidates + top).reshape(-1)
    return cand.take(idx)


def make_sft_policy(world: World, seed: int) -> PolicyNet:
    """Fit the autoregressive policy to the curated demonstrations by MLE."""
    c = world.config
    demos = curated_demos(world, seed)
    store = init_seqmodel(c.vocab_size, c.max_len, c.sft_hidden, rngs.stream(seed, "sft-init"))
    fit_mle(store, world.prompt_bags, demos, c.sft_epochs, c.sft_lr, rngs.derive_seed(seed, "sft-fit"))
    return PolicyNet.from_store(store.fresh_copy())


def gen_preference_dataset(world: World, sft: PolicyNet, n_pairs: int, seed: int, max_retries=5) -> PreferenceDataset:
    """Pairs of SFT samples per prompt, labelled by gold; exact ties are re-drawn."""
    ids = world.train_ids
    per_prompt = max(1, math.ceil(n_pairs / len(ids)))
    batch, _ = sample_responses(sft.store, world.prompt_bags, ids, 2 * per_prompt, seed, "pref-pairs")
    a = batch.take(np.arange(0, len(batch), 2))
    b = batch.take(np.arange(1, len(batch), 2))
    ga, gb = world.gold.raw(a), world.gold.raw(b)
    for attempt in range(max_retries):
        tie = np.nonzero(ga == gb)[0]
        if len(tie) == 0:
            break
        redo, _ = sample_responses(sft.store, world.prompt_bags, np.unique(b.prompt_ids[tie]), per_prompt,
                                   seed, ("pref-retry", attempt))
        for i in tie:
            pid = b.prompt_ids[i]
            j = np.nonzero(redo.prompt_ids == pid)[0][i % per_prompt]
            b.tokens[i], b.lengths[i] = redo.tokens[j], redo.lengths[j]
        gb[tie] = world.gold.raw(b.take(tie))
    keep = np.nonzero(ga != gb)[0]
    if len(keep) < len(a):
        log.warning("skipped %d tied pairs after %d re-sampling attempts", len(a) - len(keep), max_retries)
    # interleave prompts so truncation to n_pairs stays balanced
    slot = np.arange(len(a)) % per_prompt
    keep = keep[np.lexsort((a.prompt_ids[keep], slot[keep]))][:n_pairs]
    a, b, ga, gb = a.take(keep), b.take(keep), ga[keep], gb[keep]
    first = ga > gb
    chosen = ResponseBatch(a.prompt_ids, np.where(first[:, None], a.tokens, b.tokens), np.where(first, a.lengths, b.lengths))
    rejected = ResponseBatch(a.prompt_ids, np.where(first[:, None], b.tokens, a.tokens), np.where(first, b.lengths, a.lengths))
    return PreferenceDataset(chosen, rejected, np.full(len(keep), "original", dtype=object),
                             np.maximum(ga, gb), np.minimum(ga, gb))


def world_summary(world: World) -> dict:
    return {"config": asdict(world.config), "seed": world.seed, "n_features": world.features.n_features}
