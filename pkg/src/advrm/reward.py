"""Bradley-Terry reward models, calibration, ensembles and disagreement."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng as rngs
from .data import PreferenceDataset, Response, ResponseBatch
from .errors import ConfigError, NumericError, StateError
from .numerics import ParamStore, adam_step, init_mlp, mlp_backward, mlp_forward

log = logging.getLogger(__name__)


@dataclass
class RMConfig:
    hidden: tuple = (32,)
    activation: str = "relu"
    init_scale: float = 2.0
    lr: float = 1e-2
    batch_size: int = 128
    epochs: int = 1


@dataclass
class RewardNet:
    store: ParamStore
    featurize: Callable = field(repr=False)
    tag: str = "proxy"
    mu: Optional[float] = None
    sigma: Optional[float] = None
    seed: Optional[int] = None
    init_seed: Optional[int] = None
    lineage: dict = field(default_factory=dict)

    @property
    def calibrated(self) -> bool:
        return self.sigma is not None

    def raw_from_features(self, feats) -> np.ndarray:
        return mlp_forward(self.store, feats)

    def raw(self, batch: ResponseBatch) -> np.ndarray:
        return mlp_forward(self.store, self.featurize(batch))

    def normalize(self, raw):
        if not self.calibrated:
            raise StateError(f"{self.tag} reward model has not been calibrated")
        return (np.asarray(raw) - self.mu) / self.sigma

    def scores(self, batch: ResponseBatch, normalized=True) -> np.ndarray:
        raw = self.raw(batch)
        return self.normalize(raw) if normalized else raw

    def calibrate(self, reference: ResponseBatch) -> "RewardNet":
        raw = self.raw(reference)
        sigma = float(np.std(raw))
        if not np.isfinite(sigma) or sigma <= 0:
            raise NumericError("calibration set has zero score variance")
        self.mu, self.sigma = float(np.mean(raw)), sigma
        return self

    def fingerprint(self) -> str:
        """Content hash of the parameters and calibration, used as a cache key."""
        key = repr((self.tag, self.mu, self.sigma, self.store.digest()))
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def sidecar(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "seed": self.seed, "init_seed": self.init_seed,
                "architecture": self.tag, "lineage": self.lineage}


def score(rm: RewardNet, prompt_id: int, response: Response, normalized=True) -> float:
    batch = ResponseBatch.from_responses([prompt_id], [response], _max_len(rm, response))
    if normalized and not rm.calibrated:
        raise StateError("normalized score requested before calibration")
    return float(rm.scores(batch, normalized)[0])


def _max_len(rm, response):
    return int(getattr(rm.featurize, "max_len", max(1, len(response))))


# ---------------------------------------------------------------------------
# Bradley-Terry loss
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bt_loss_from_features(store: ParamStore, f_chosen, f_rejected, pair_ids=None):
    """Mean -log sigmoid(margin) on raw scores, and its parameter gradients."""
    n = f_chosen.shape[0]
    if n == 0:
        raise ConfigError("empty preference batch")
    feats = np.concatenate([f_chosen, f_rejected])
    s = mlp_forward(store, feats)
    if not np.all(np.isfinite(s)):
        bad = int(np.nonzero(~np.isfinite(s))[0][0] % n)
        pid = pair_ids[bad] if pair_ids is not None else bad
        raise NumericError(f"non-finite reward score for pair {pid}")
    margin = s[:n] - s[n:]
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    dm = -_sigmoid(-margin) / n
    grads = mlp_backward(store, feats, np.concatenate([dm, -dm]))
    return loss, grads


def bt_loss_and_grads(rm: RewardNet, batch: PreferenceDataset):
    return bt_loss_from_features(rm.store, rm.featurize(batch.chosen), rm.featurize(batch.rejected),
                                 np.arange(len(batch)))


def training_order(n: int, seed: int, epochs: int) -> np.ndarray:
    gen = rngs.stream(seed, "rm-order")
    return np.concatenate([gen.permutation(n) for _ in range(epochs)])


def init_reward_net(n_features: int, config: RMConfig, init_seed: int, featurize, tag="proxy") -> RewardNet:
    store = init_mlp([n_features, *config.hidden, 1], rngs.stream(init_seed, "rm-init"),
                     activation=config.activation, tag=tag, init_scale=config.init_scale)
    return RewardNet(store, featurize, tag=tag, init_seed=init_seed)


def train_rm(dataset: PreferenceDataset, featurize, config: RMConfig, seed: int, init_seed=None,
             reference: ResponseBatch = None, order=None, lineage=None) -> RewardNet:
    """Shuffled minibatch Adam on the BT loss, then optional calibration.

    ``seed`` fixes the data order; ``init_seed`` (defaults to ``seed``) fixes
    the initial parameters. Passing ``order`` overrides the shuffle.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train a reward model on an empty dataset")
    init_seed = seed if init_seed is None else init_seed
    fc = featurize(dataset.chosen)
    fr = featurize(dataset.rejected)
    if np.array_equal(fc, fr):
        log.warning("every pair has identical chosen/rejected features; the loss cannot decrease")
    rm = init_reward_net(fc.shape[1], config, init_seed, featurize)
    rm.seed = seed
    rm.lineage = dict(lineage or {}, init="fresh", init_seed=init_seed)
    if order is None:
        order = training_order(len(dataset), seed, config.epochs)
    order = np.asarray(order)
    history = []
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        loss, grads = bt_loss_from_features(rm.store, fc[idx], fr[idx], idx)
        adam_step(rm.store, grads, config.lr)
        history.append(loss)
    rm.lineage["train_losses"] = [float(x) for x in history[:: max(1, len(history) // 20)]]
    if reference is not None:
        rm.calibrate(reference)
    return rm


def pair_accuracy(rm: RewardNet, dataset: PreferenceDataset) -> float:
    return float(np.mean(rm.raw(dataset.chosen) > rm.raw(dataset.rejected)))


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

@dataclass
class EnsembleStats:
    scores: np.ndarray
    value: float
    mode: str


def disagreement_values(member_scores, mode="std", lam=None) -> np.ndarray:
    """Disagreement per column of a (K, N) matrix of normalized member scores.

    ``std``: population standard deviation. ``weighted_diff``: R1 - lam * R2.
    """
    s = np.asarray(member_scores, dtype=np.float64)
    if s.shape[0] < 2:
        raise ConfigError("disagreement needs at least two members")
    if mode == "std":
        if lam is not None:
            raise ConfigError("lambda is not used in std mode")
        return s.std(axis=0)
    if mode == "weighted_diff":
        if lam is None:
            raise ConfigError("weighted_diff needs lambda")
        return s[0] - lam * s[1]
    raise ConfigError(f"unknown disagreement mode {mode!r}")


def disagreement(members, prompt_id, response: Response, mode="std", lam=None) -> EnsembleStats:
    scores = np.array([score(m, prompt_id, response, normalized=True) for m in members])
    return EnsembleStats(scores, float(disagreement_values(scores[:, None], mode, lam)[0]), mode)


@dataclass
class UncertaintyReference:
    mean: Optional[float] = None
    std: Optional[float] = None

    @classmethod
    def fit(cls, values) -> "UncertaintyReference":
        values = np.asarray(values, dtype=np.float64)
        std = float(values.std())
        if std <= 0:
            raise NumericError("reference uncertainty has zero variance")
        return cls(float(values.mean()), std)


def uncertainty_zscore(u, reference: UncertaintyReference):
    if reference is None or reference.std is None:
        raise StateError("uncertainty reference not calibrated")
    if reference.std <= 0:
        raise NumericError("reference std must be positive")
    return (np.asarray(u, dtype=np.float64) - reference.mean) / reference.std
