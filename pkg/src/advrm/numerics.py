"""Small float64 numerics: parameter stores, the two network families used in
the package (a feed-forward scorer and an autoregressive categorical policy),
hand-written backward passes, Adam, categorical sampling and checkpoints.

There is no autodiff graph. Each architecture has its own backward pass.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError

Gradients = dict  # name -> ndarray, same keys and shapes as ParamStore.params

EOS = 0
MASK_LOGIT = -1e9


@dataclass
class ParamStore:
    params: dict
    arch: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, value in self.params.items():
            self.params[name] = np.asarray(value, dtype=np.float64)
        for name, value in self.params.items():
            self.m.setdefault(name, np.zeros_like(value))
            self.v.setdefault(name, np.zeros_like(value))

    def copy(self) -> "ParamStore":
        return ParamStore(
            params={k: a.copy() for k, a in self.params.items()},
            arch=json.loads(json.dumps(self.arch)),
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )

    def fresh_copy(self) -> "ParamStore":
        """Same parameters, reset optimizer state."""
        return ParamStore({k: a.copy() for k, a in self.params.items()}, json.loads(json.dumps(self.arch)))

    def zeros(self) -> Gradients:
        return {k: np.zeros_like(a) for k, a in self.params.items()}

    def num_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.params.values())

    def digest(self) -> str:
        """Short content hash of the parameters."""
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()[:16]

    def equals(self, other: "ParamStore") -> bool:
        if self.params.keys() != other.params.keys():
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)


def add_grads(total: Gradients, extra: Gradients) -> Gradients:
    for k, g in extra.items():
        total[k] = total[k] + g
    return total


# ---------------------------------------------------------------------------
# feed-forward scorer
# ---------------------------------------------------------------------------

def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise ConfigError(f"unknown activation {name!r}")


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def init_mlp(sizes, rng: np.random.Generator, activation="relu", tag="proxy", init_scale=1.0) -> ParamStore:
    """He/Xavier-style init scaled by ``init_scale``; output layer is scalar."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or sizes[-1] != 1 or min(sizes) < 1:
        raise ConfigError(f"bad layer sizes {sizes}")
    params = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = 2.0 if activation == "relu" and i < len(sizes) - 2 else 1.0
        params[f"W{i}"] = rng.normal(0.0, init_scale * np.sqrt(gain / n_in), size=(n_out, n_in))
        params[f"b{i}"] = np.zeros(n_out)
    arch = {"kind": "mlp", "sizes": sizes, "activation": activation, "tag": tag}
    return ParamStore(params, arch)


def _n_layers(store):
    return len(store.arch["sizes"]) - 1


def _mlp_pass(store: ParamStore, x: np.ndarray):
    sizes = store.arch["sizes"]
    if x.shape[-1] != sizes[0]:
        raise ConfigError(f"feature length {x.shape[-1]} does not match input width {sizes[0]}")
    act = store.arch["activation"]
    acts, pres = [x], []
    a = x
    n = _n_layers(store)
    for i in range(n):
        z = a @ store.params[f"W{i}"].T + store.params[f"b{i}"]
        pres.append(z)
        a = _act(act, z) if i < n - 1 else z
        acts.append(a)
    return pres, acts


def mlp_forward(store: ParamStore, features):
    """Score one feature vector (returns float) or a matrix of them (returns (N,))."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    _, acts = _mlp_pass(store, x2)
    out = acts[-1][:, 0]
    return float(out[0]) if single else out


def mlp_backward(store: ParamStore, features, upstream) -> Gradients:
    """Gradient of ``sum_i upstream_i * mlp_forward(features_i)`` w.r.t. parameters."""
    x = np.asarray(features, dtype=np.float64)
    x2 = x[None, :] if x.ndim == 1 else x
    up = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    if not np.all(np.isfinite(up)):
        raise NumericError("non-finite upstream gradient")
    if up.shape[0] != x2.shape[0]:
        raise ConfigError("upstream length must match the number of feature rows")
    pres, acts = _mlp_pass(store, x2)
    act = store.arch["activation"]
    grads = {}
    g = up[:, None]
    for i in reversed(range(_n_layers(store))):
        grads[f"W{i}"] = g.T @ acts[i]
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0:
            g = (g @ store.params[f"W{i}"]) * _act_grad(act, pres[i - 1], acts[i])
    return grads


# ---------------------------------------------------------------------------
# autoregressive categorical sequence model
# ---------------------------------------------------------------------------
#
# Step input at position t is [prompt bag | decayed prefix bag | last token |
# position one-hot]. The prefix summary is a fixed recurrence, so gradients only
# pass through the per-step head: tanh hidden layer then logits over the vocab.

def seq_input_dim(vocab: int, max_len: int) -> int:
    return 3 * vocab + max_len


def init_seqmodel(vocab: int, max_len: int, hidden: int, rng: np.random.Generator,
                  decay=0.7, min_len=1, init_scale=1.0) -> ParamStore:
    if vocab < 2 or max_len < 1 or hidden < 1:
        raise ConfigError("degenerate sequence model size")
    d = seq_input_dim(vocab, max_len)
    params = {
        "W0": rng.normal(0.0, init_scale / np.sqrt(d), size=(hidden, d)),
        "b0": np.zeros(hidden),
        "W1": rng.normal(0.0, init_scale / np.sqrt(hidden), size=(vocab, hidden)),
        "b1": np.zeros(vocab),
    }
    arch = {"kind": "seq", "vocab": vocab, "max_len": max_len, "hidden": hidden,
            "decay": float(decay), "min_len": int(min_len)}
    return ParamStore(params, arch)


def step_inputs(arch, prompt_bags, prefix_bag, last_tok, t):
    """Inputs for one decoding position. ``last_tok`` is -1 before the first token."""
    V, L = arch["vocab"], arch["max_len"]
    n = prompt_bags.shape[0]
    x = np.zeros((n, 3 * V + L))
    x[:, :V] = prompt_bags
    x[:, V:2 * V] = prefix_bag
    has_last = last_tok >= 0
    x[np.nonzero(has_last)[0], 2 * V + last_tok[has_last]] = 1.0
    x[:, 3 * V + t] = 1.0
    return x


def update_prefix(arch, prefix_bag, tok):
    bag = arch["decay"] * prefix_bag
    bag[np.arange(len(tok)), tok] += 1.0
    return bag


def teacher_inputs(arch, prompt_bags, tokens):
    """Stacked step inputs (N, L, D) for given token matrices."""
    n, L = tokens.shape
    V = arch["vocab"]
    out = np.empty((n, L, seq_input_dim(V, arch["max_len"])))
    bag = np.zeros((n, V))
    last = np.full(n, -1)
    for t in range(L):
        out[:, t] = step_inputs(arch, prompt_bags, bag, last, t)
        bag = update_prefix(arch, bag, tokens[:, t])
        last = tokens[:, t]
    return out


def seq_step_logits(store: ParamStore, x, t):
    h = np.tanh(x @ store.params["W0"].T + store.params["b0"])
    logits = h @ store.params["W1"].T + store.params["b1"]
    if t < store.arch["min_len"]:
        logits[..., EOS] = MASK_LOGIT
    return logits, h


def log_softmax(logits, temperature=1.0):
    z = np.asarray(logits, dtype=np.float64) / temperature
    m = np.max(z, axis=-1, keepdims=True)
    return z - m - np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


def decision_mask(lengths, max_len):
    """(N, L) bool: positions where the policy made a decision (tokens + EOS)."""
    n_steps = np.minimum(np.asarray(lengths) + 1, max_len)
    return np.arange(max_len)[None, :] < n_steps[:, None]


def _seq_forward_all(store, prompt_bags, tokens):
    arch = store.arch
    x = teacher_inputs(arch, prompt_bags, tokens)
    h = np.tanh(x @ store.params["W0"].T + store.params["b0"])
    logits = h @ store.params["W1"].T + store.params["b1"]
    logits[:, :arch["min_len"], EOS] = MASK_LOGIT
    return x, h, logits


def seq_log_probs(store: ParamStore, prompt_bags, tokens, lengths, temperature=1.0):
    """Per-token (N, L) and per-sequence (N,) log-probabilities of given responses."""
    _, _, logits = _seq_forward_all(store, prompt_bags, tokens)
    lp = log_softmax(logits, temperature)
    tok_lp = np.take_along_axis(lp, tokens[:, :, None], axis=2)[:, :, 0]
    tok_lp = np.where(decision_mask(lengths, tokens.shape[1]), tok_lp, 0.0)
    return tok_lp, tok_lp.sum(axis=1)


def seq_backward(store: ParamStore, prompt_bags, tokens, lengths, weights, temperature=1.0) -> Gradients:
    """Gradient of ``sum_i weights_i * log pi(y_i | x_i)``."""
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite sequence weights")
    x, h, logits = _seq_forward_all(store, prompt_bags, tokens)
    p = np.exp(log_softmax(logits, temperature))
    mask = decision_mask(lengths, tokens.shape[1])
    V = store.arch["vocab"]
    g = -p
    np.put_along_axis(g, tokens[:, :, None], np.take_along_axis(g, tokens[:, :, None], axis=2) + 1.0, axis=2)
    g *= (mask * w[:, None])[:, :, None] / temperature
    g2 = g.reshape(-1, V)
    h2 = h.reshape(-1, h.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    gh = (g2 @ store.params["W1"]) * (1.0 - h2 * h2)
    return {
        "W0": gh.T @ x2,
        "b0": gh.sum(axis=0),
        "W1": g2.T @ h2,
        "b1": g2.sum(axis=0),
    }


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_from_logits(logits, uniforms, temperature=1.0):
    """Inverse-CDF draws, one per row. Returns (indices, log-probs)."""
    lp = log_softmax(logits, temperature)
    cdf = np.cumsum(np.exp(lp), axis=-1)
    u = np.asarray(uniforms)[:, None] * cdf[:, -1:]
    idx = np.minimum((cdf <= u).sum(axis=-1), lp.shape[-1] - 1)
    return idx, lp[np.arange(lp.shape[0]), idx]


def categorical_sample(logits, rng: np.random.Generator, temperature=1.0):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ConfigError("logits must be a non-empty vector")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    idx, lp = sample_from_logits(logits[None, :], np.array([rng.random()]), temperature)
    return int(idx[0]), float(lp[0])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(store: ParamStore, grads: Gradients, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> ParamStore:
    """In-place bias-corrected Adam update; returns the store."""
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    for k, p in store.params.items():
        g = grads[k]
        store.m[k] = beta1 * store.m[k] + (1.0 - beta1) * g
        store.v[k] = beta2 * store.v[k] + (1.0 - beta2) * g * g
        p -= lr * (store.m[k] / c1) / (np.sqrt(store.v[k] / c2) + eps)
    return store


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Layout: MAGIC, u64 little-endian header length, JSON header (sorted keys),
# then raw little-endian float64 blobs in header order.

MAGIC = b"ADVRM-CKPT-1\n"


def save_arrays(path, arrays: dict, meta=None):
    names = sorted(arrays)
    entries = []
    blobs = []
    for name in names:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_arrays(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise ConfigError(f"{path} is not a checkpoint")
    off = len(MAGIC)
    (n,) = struct.unpack("<Q", data[off:off + 8])
    off += 8
    header = json.loads(data[off:off + n].decode("utf-8"))
    off += n
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(e["shape"]).copy()
        off += 8 * count
    return arrays, header["meta"]


def save_checkpoint(path, store: ParamStore, meta=None):
    arrays = {}
    for k in store.params:
        arrays[f"param/{k}"] = store.params[k]
        arrays[f"adam_m/{k}"] = store.m[k]
        arrays[f"adam_v/{k}"] = store.v[k]
    save_arrays(path, arrays, {"arch": store.arch, "step": store.step, "extra": meta or {}})


def load_checkpoint(path):
    arrays, meta = load_arrays(path)
    params = {k.split("/", 1)[1]: a for k, a in arrays.items() if k.startswith("param/")}
    m = {k.split("/", 1)[1]: a for k, a in arrays.items() if k.startswith("adam_m/")}
    v = {k.split("/", 1)[1]: a for k, a in arrays.items() if k.startswith("adam_v/")}
    store = ParamStore(params, meta["arch"], m, v, meta["step"])
    return store, meta["extra"]
