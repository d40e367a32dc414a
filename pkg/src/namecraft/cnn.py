"""Character-level CNN in plain numpy.

Architecture: embedding -> dropout -> one Conv1D stack per kernel width
(valid padding) -> batch norm -> activation -> max over time -> concatenate
-> dropout -> dense -> dense activation -> K sigmoid outputs.

Training minimises per-class binary cross-entropy summed over classes,
each example weighted by its true class's weight, with Nadam and a
reduce-on-plateau learning-rate schedule. The returned model is the
checkpoint with the lowest validation loss.
"""

from __future__ import annotations

import copy
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .corpus import DEFAULT_CONFIG, Dataset
from .errors import (
    DivergedError,
    EmptyDatasetError,
    ShapeMismatchError,
    TooLongError,
    UnknownCharError,
)

log = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "elu", "relu", "sigmoid", "linear")
INITS = ("he_uniform", "glorot_uniform")


@dataclass(frozen=True)
class CnnConfig:
    alphabet: str = DEFAULT_CONFIG.alphabet
    max_len: int | None = None
    embed_dim: int = 29
    kernel_sizes: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7)
    filters: tuple[int, ...] = (50, 300, 305, 200, 250, 200, 200)
    conv_activation: str = "tanh"
    dense_units: int = 400
    dense_activation: str = "sigmoid"
    dropout_embed: float = 0.01
    dropout_post: float = 0.2
    batch_size: int = 512
    epochs: int = 80
    learning_rate: float = 1e-3
    min_lr: float = 0.0002
    lr_factor: float = 0.5
    patience: int = 2
    init: str = "he_uniform"
    batch_norm: bool = True
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3
    beta_1: float = 0.9
    beta_2: float = 0.999
    adam_epsilon: float = 1e-8
    conv_bias: bool = True
    max_len_margin: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if len(self.kernel_sizes) != len(self.filters):
            raise ValueError("one filter count per kernel size is required")
        if any(f <= 0 for f in self.filters) or any(k <= 0 for k in self.kernel_sizes):
            raise ValueError("kernel sizes and filter counts must be positive")
        if self.max_len is not None and max(self.kernel_sizes, default=1) > self.max_len:
            raise ValueError("every kernel size must be <= max_len")
        for p in (self.dropout_embed, self.dropout_post):
            if not 0.0 <= p < 1.0:
                raise ValueError("dropout rates must lie in [0, 1)")
        if self.conv_activation not in ACTIVATIONS or self.dense_activation not in ACTIVATIONS:
            raise ValueError(f"activations must be one of {ACTIVATIONS}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")

    @classmethod
    def concat_defaults(cls, **overrides) -> "CnnConfig":
        """Hyperparameters tuned for concatenated household strings."""
        base = dict(
            embed_dim=30,
            filters=(239, 248, 100, 150, 150, 250, 200),
            conv_activation="elu",
            dense_units=200,
            dropout_embed=0.02,
            epochs=60,
            min_lr=0.00027,
            patience=3,
            init="glorot_uniform",
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CnnConfig":
        return cls(**dict(d))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    checkpoint: bool


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,lr,checkpoint"]
        for r in self.epochs:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r},{int(r.checkpoint)}")
        return "\n".join(lines) + "\n"


# --- encoding ----------------------------------------------------------------


def char_ids(alphabet: str) -> dict[str, int]:
    return {ch: i for i, ch in enumerate(alphabet, start=1)}


def encode(name: str, max_len: int, alphabet: str = DEFAULT_CONFIG.alphabet) -> np.ndarray:
    """1-based character ids, right-padded with 0 to `max_len`."""
    if len(name) > max_len:
        raise TooLongError(f"name of length {len(name)} exceeds max_len {max_len}")
    ids = char_ids(alphabet)
    out = np.zeros(max_len, dtype=np.int64)
    for i, ch in enumerate(name):
        if ch not in ids:
            raise UnknownCharError(f"character {ch!r} not in alphabet")
        out[i] = ids[ch]
    return out


def encode_batch(names: Sequence[str], max_len: int, alphabet: str = DEFAULT_CONFIG.alphabet,
                 truncate: bool = False) -> np.ndarray:
    """Encode many names; with `truncate`, overlong names are cut with a warning."""
    ids = char_ids(alphabet)
    out = np.zeros((len(names), max_len), dtype=np.int64)
    n_cut = 0
    for r, name in enumerate(names):
        if len(name) > max_len:
            if not truncate:
                raise TooLongError(f"name of length {len(name)} exceeds max_len {max_len}")
            name = name[:max_len]
            n_cut += 1
        for i, ch in enumerate(name):
            try:
                out[r, i] = ids[ch]
            except KeyError:
                raise UnknownCharError(f"character {ch!r} not in alphabet") from None
    if n_cut:
        warnings.warn(f"{n_cut} name(s) longer than max_len={max_len} were truncated", stacklevel=2)
    return out


# --- activations -------------------------------------------------------------


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "elu":
        return np.where(z > 0, 1.0, a + 1.0)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --- model -------------------------------------------------------------------


class CnnModel:
    """Parameters, batch-norm buffers and forward/backward passes."""

    def __init__(self, config: CnnConfig, classes: Sequence[str], params: dict[str, np.ndarray],
                 buffers: dict[str, np.ndarray] | None = None):
        if config.max_len is None:
            raise ValueError("model config needs a concrete max_len")
        self.config = config
        self.classes = tuple(classes)
        self.params = params
        self.buffers = buffers if buffers is not None else {}
        # running-statistic updates so far; training-time state, not serialised
        self.bn_updates = 0

    # parameter bookkeeping

    @classmethod
    def initialise(cls, config: CnnConfig, classes: Sequence[str], rng: np.random.Generator,
                   dtype=np.float64) -> "CnnModel":
        d = config.embed_dim
        n_in = len(config.alphabet) + 1
        p: dict[str, np.ndarray] = {}
        emb = rng.uniform(-0.05, 0.05, size=(n_in, d))
        emb[0] = 0.0
        p["embedding"] = emb
        for k, f in zip(config.kernel_sizes, config.filters):
            fan_in, fan_out = k * d, k * f
            if config.init == "he_uniform":
                limit = math.sqrt(6.0 / fan_in)
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))
            p[f"conv{k}.W"] = rng.uniform(-limit, limit, size=(k, d, f))
            p[f"conv{k}.b"] = np.zeros(f)
            if config.batch_norm:
                p[f"bn{k}.gamma"] = np.ones(f)
                p[f"bn{k}.beta"] = np.zeros(f)
        width = sum(config.filters)
        if config.dense_units:
            limit = math.sqrt(6.0 / (width + config.dense_units))
            p["dense.W"] = rng.uniform(-limit, limit, size=(width, config.dense_units))
            p["dense.b"] = np.zeros(config.dense_units)
            width = config.dense_units
        limit = math.sqrt(6.0 / (width + len(classes)))
        p["out.W"] = rng.uniform(-limit, limit, size=(width, len(classes)))
        p["out.b"] = np.zeros(len(classes))
        buffers = {}
        if config.batch_norm:
            for k, f in zip(config.kernel_sizes, config.filters):
                buffers[f"bn{k}.mean"] = np.zeros(f)
                buffers[f"bn{k}.var"] = np.ones(f)
        model = cls(config, classes, p, buffers)
        return model.astype(dtype)

    def astype(self, dtype) -> "CnnModel":
        out = CnnModel(
            self.config,
            self.classes,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )
        out.bn_updates = self.bn_updates
        return out

    def copy(self) -> "CnnModel":
        out = CnnModel(self.config, self.classes, copy.deepcopy(self.params), copy.deepcopy(self.buffers))
        out.bn_updates = self.bn_updates
        return out

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    # forward / backward

    def forward(self, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None,
                update_stats: bool = True) -> tuple[np.ndarray, dict]:
        """Per-class probabilities and a cache of intermediate activations.

        In training mode batch norm uses batch statistics (and updates the
        running buffers when `update_stats`) and dropout is active.
        """
        cfg = self.config
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != cfg.max_len:
            raise ShapeMismatchError(f"expected (batch, {cfg.max_len}) ids, got {x.shape}")
        p = self.params
        dtype = p["embedding"].dtype
        cache: dict = {"x": x, "training": training}
        e = p["embedding"][x]
        if training and cfg.dropout_embed > 0:
            mask = (rng.random(e.shape) >= cfg.dropout_embed).astype(dtype) / (1.0 - cfg.dropout_embed)
            cache["emb_mask"] = mask
            e = e * mask
        cache["e"] = e
        pooled = []
        for k in cfg.kernel_sizes:
            W = p[f"conv{k}.W"]
            n_b, width = e.shape[0], e.shape[1] - k + 1
            cols = sliding_window_view(e, k, axis=1)  # (B, T, D, k)
            cols = cols.transpose(0, 1, 3, 2).reshape(n_b * width, k * cfg.embed_dim)
            z = (cols @ W.reshape(k * cfg.embed_dim, -1)).reshape(n_b, width, -1)
            if cfg.conv_bias:
                z = z + p[f"conv{k}.b"]
            layer = {"z": z}
            if cfg.batch_norm:
                if training:
                    mu = z.mean(axis=(0, 1))
                    var = z.var(axis=(0, 1))
                    if update_stats:
                        # bias-corrected moving average: the first update equals the batch
                        # statistics, so the initial buffers never leak into inference
                        mom, t = cfg.bn_momentum, self.bn_updates + 1
                        keep = mom * (1 - mom ** (t - 1)) / (1 - mom ** t)
                        new = (1 - mom) / (1 - mom ** t)
                        self.buffers[f"bn{k}.mean"] = keep * self.buffers[f"bn{k}.mean"] + new * mu
                        self.buffers[f"bn{k}.var"] = keep * self.buffers[f"bn{k}.var"] + new * var
                else:
                    mu = self.buffers[f"bn{k}.mean"]
                    var = self.buffers[f"bn{k}.var"]
                inv = 1.0 / np.sqrt(var + cfg.bn_epsilon)
                zhat = (z - mu) * inv
                pre = zhat * p[f"bn{k}.gamma"] + p[f"bn{k}.beta"]
                layer.update(zhat=zhat, inv=inv)
            else:
                pre = z
            a = _act(cfg.conv_activation, pre)
            idx = a.argmax(axis=1)  # (B, F)
            pooled.append(np.take_along_axis(a, idx[:, None, :], axis=1)[:, 0, :])
            layer.update(pre=pre, a=a, idx=idx)
            cache[f"conv{k}"] = layer
        if training and update_stats and cfg.batch_norm:
            self.bn_updates += 1
        h = np.concatenate(pooled, axis=1)
        cache["pooled"] = h
        if training and cfg.dropout_post > 0:
            mask = (rng.random(h.shape) >= cfg.dropout_post).astype(dtype) / (1.0 - cfg.dropout_post)
            cache["post_mask"] = mask
            h = h * mask
        cache["h"] = h
        if cfg.dense_units:
            dz = h @ p["dense.W"] + p["dense.b"]
            g = _act(cfg.dense_activation, dz)
            cache["dense_z"] = dz
        else:
            g = h
        cache["g"] = g
        logits = g @ p["out.W"] + p["out.b"]
        cache["logits"] = logits
        return _sigmoid(logits), cache

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, training=False)[1]["logits"]

    def predict_proba(self, x: np.ndarray, batch_size: int = 2048) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of sum(dlogits * logits) with respect to every parameter."""
        cfg = self.config
        p = self.params
        training = cache["training"]
        grads: dict[str, np.ndarray] = {}
        g = cache["g"]
        grads["out.W"] = g.T @ dlogits
        grads["out.b"] = dlogits.sum(axis=0)
        dg = dlogits @ p["out.W"].T
        if cfg.dense_units:
            dz = dg * _act_grad(cfg.dense_activation, cache["dense_z"], g)
            grads["dense.W"] = cache["h"].T @ dz
            grads["dense.b"] = dz.sum(axis=0)
            dh = dz @ p["dense.W"].T
        else:
            dh = dg
        if "post_mask" in cache:
            dh = dh * cache["post_mask"]
        e = cache["e"]
        B, L, D = e.shape
        de = np.zeros_like(e)
        offset = 0
        for k, f in zip(cfg.kernel_sizes, cfg.filters):
            layer = cache[f"conv{k}"]
            dpool = dh[:, offset:offset + f]
            offset += f
            T = L - k + 1
            da = np.zeros((B, T, f), dtype=e.dtype)
            np.put_along_axis(da, layer["idx"][:, None, :], dpool[:, None, :], axis=1)
            dpre = da * _act_grad(cfg.conv_activation, layer["pre"], layer["a"])
            if cfg.batch_norm:
                gamma = p[f"bn{k}.gamma"]
                zhat, inv = layer["zhat"], layer["inv"]
                grads[f"bn{k}.gamma"] = (dpre * zhat).sum(axis=(0, 1))
                grads[f"bn{k}.beta"] = dpre.sum(axis=(0, 1))
                dzhat = dpre * gamma
                if training:
                    n = B * T
                    dz = inv / n * (n * dzhat - dzhat.sum(axis=(0, 1)) - zhat * (dzhat * zhat).sum(axis=(0, 1)))
                else:
                    dz = dzhat * inv
            else:
                dz = dpre
            cols = sliding_window_view(e, k, axis=1).transpose(0, 1, 3, 2).reshape(B * T, k * D)
            dz2 = dz.reshape(B * T, f)
            grads[f"conv{k}.W"] = (cols.T @ dz2).reshape(k, D, f)
            grads[f"conv{k}.b"] = dz2.sum(axis=0) if cfg.conv_bias else np.zeros(f, dtype=e.dtype)
            dcols = (dz2 @ p[f"conv{k}.W"].reshape(k * D, f).T).reshape(B, T, k, D)
            for o in range(k):
                de[:, o:o + T, :] += dcols[:, :, o, :]
        if "emb_mask" in cache:
            de = de * cache["emb_mask"]
        demb = np.zeros_like(p["embedding"])
        np.add.at(demb, cache["x"].ravel(), de.reshape(-1, D))
        demb[0] = 0.0
        grads["embedding"] = demb
        return grads


# --- loss ----------------------------------------------------------------------


def weighted_bce(logits: np.ndarray, targets: np.ndarray, example_weights: np.ndarray):
    """Mean over the batch of weight * sum over classes of BCE; returns (loss, dloss/dlogits)."""
    n = logits.shape[0]
    per = np.logaddexp(0.0, logits) - targets * logits
    loss = (example_weights * per.sum(axis=1)).sum() / n
    dlogits = (_sigmoid(logits) - targets) * example_weights[:, None] / n
    return loss, dlogits


def one_hot(labels: np.ndarray, k: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((labels.size, k), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


# --- optimiser -----------------------------------------------------------------


class Nadam:
    """Nesterov-accelerated Adam with the warming momentum schedule.

    mu_t = beta_1 * (1 - 0.5 * 0.96 ** (0.004 * t))
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta_1=0.9, beta_2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta_1 = beta_1
        self.beta_2 = beta_2
        self.epsilon = epsilon
        self.t = 0
        self.mu_product = 1.0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def _mu(self, t: int) -> float:
        return self.beta_1 * (1.0 - 0.5 * 0.96 ** (0.004 * t))

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        t = self.t
        mu_t, mu_next = self._mu(t), self._mu(t + 1)
        self.mu_product *= mu_t
        prod_next = self.mu_product * mu_next
        b2 = self.beta_2
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= mu_t
            m += (1.0 - mu_t) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = mu_next * m / (1.0 - prod_next) + (1.0 - mu_t) * g / (1.0 - self.mu_product)
            v_hat = v / (1.0 - b2 ** t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


class PlateauSchedule:
    """Multiply the rate by `factor` after `patience` epochs without improvement."""

    def __init__(self, lr: float, factor: float, patience: int, min_lr: float):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.wait = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


# --- training -------------------------------------------------------------------


def resolve_max_len(config: CnnConfig, names: Sequence[str]) -> CnnConfig:
    if config.max_len is not None:
        return config
    longest = max(len(n) for n in names)
    width = max(longest + config.max_len_margin, max(config.kernel_sizes))
    return CnnConfig(**{**config.to_dict(), "max_len": width})


def evaluate_loss(model: CnnModel, x: np.ndarray, targets: np.ndarray, weights: np.ndarray,
                  batch_size: int = 2048) -> float:
    total = 0.0
    for i in range(0, len(x), batch_size):
        _, cache = model.forward(x[i:i + batch_size], training=False)
        loss, _ = weighted_bce(cache["logits"], targets[i:i + batch_size], weights[i:i + batch_size])
        total += loss * len(x[i:i + batch_size])
    return float(total / len(x))


def train_cnn(
    config: CnnConfig,
    train: Dataset,
    val: Dataset,
    class_weight: Mapping[int, float] | None = None,
    seed: int = 0,
    dtype=np.float64,
) -> tuple[CnnModel, TrainHistory]:
    """Train from scratch and return the lowest-validation-loss checkpoint.

    Validation loss is the unweighted per-class BCE; class weights apply to
    the training loss only.
    """
    if len(train) == 0 or len(val) == 0:
        raise EmptyDatasetError("training and validation sets must be non-empty")
    config = resolve_max_len(config, train.names)
    k = len(train.classes)
    rng = np.random.default_rng(seed)
    model = CnnModel.initialise(config, train.class_names, rng, dtype=dtype)
    x_tr = encode_batch(train.names, config.max_len, config.alphabet)
    x_va = encode_batch(val.names, config.max_len, config.alphabet, truncate=True)
    y_tr, y_va = train.labels, val.labels
    t_tr, t_va = one_hot(y_tr, k, dtype), one_hot(y_va, k, dtype)
    cw = class_weight or {c: 1.0 for c in range(k)}
    w_tr = np.array([cw[int(c)] for c in y_tr], dtype=dtype)
    w_va = np.ones(len(y_va), dtype=dtype)
    opt = Nadam(model.params, config.learning_rate, config.beta_1, config.beta_2, config.adam_epsilon)
    sched = PlateauSchedule(config.learning_rate, config.lr_factor, config.patience, config.min_lr)
    history = TrainHistory()
    best, best_loss = model.copy(), math.inf
    n = len(x_tr)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            _, cache = model.forward(x_tr[batch], training=True, rng=rng)
            loss, dlogits = weighted_bce(cache["logits"], t_tr[batch], w_tr[batch])
            if not math.isfinite(loss):
                raise DivergedError(f"non-finite training loss at epoch {epoch}")
            grads = model.backward(cache, dlogits)
            opt.step(model.params, grads)
            total += loss * len(batch)
        train_loss = float(total / n)
        val_loss = evaluate_loss(model, x_va, t_va, w_va)
        if not math.isfinite(val_loss):
            raise DivergedError(f"non-finite validation loss at epoch {epoch}")
        improved = val_loss < best_loss
        if improved:
            best, best_loss = model.copy(), val_loss
        history.epochs.append(EpochRecord(epoch, train_loss, val_loss, opt.lr, improved))
        log.info("epoch %d train %.5f val %.5f lr %.2e%s", epoch, train_loss, val_loss, opt.lr,
                 " *" if improved else "")
        opt.lr = sched.update(val_loss)
    return best.astype(np.float64), history


# --- verification --------------------------------------------------------------------


def _loss_only(model: CnnModel, x, labels, weights) -> float:
    dtype = model.params["embedding"].dtype
    targets = one_hot(np.asarray(labels), model.n_classes, dtype)
    w = np.ones(len(x), dtype=dtype) if weights is None else np.asarray(weights, dtype=dtype)
    _, cache = model.forward(x, training=False)
    return weighted_bce(cache["logits"], targets, w)[0]


def loss_and_grads(model: CnnModel, x: np.ndarray, labels: np.ndarray,
                   weights: np.ndarray | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Inference-mode weighted loss and its analytic gradient."""
    targets = one_hot(np.asarray(labels), model.n_classes, model.params["embedding"].dtype)
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64)
    _, cache = model.forward(x, training=False)
    loss, dlogits = weighted_bce(cache["logits"], targets, w)
    return loss, model.backward(cache, dlogits)


def grad_check(model: CnnModel, x: np.ndarray, labels: np.ndarray, epsilon: float = 1e-5,
               n_params: int = 500, seed: int = 0, weights: np.ndarray | None = None,
               floor: float = 1e-8, fd_dtype=np.longdouble) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in inference mode (no dropout, running batch-norm statistics) on
    up to `n_params` randomly chosen parameter entries. Entries where both
    gradients are below `floor` in magnitude are skipped. Analytic
    gradients are float64; the finite differences are evaluated in
    `fd_dtype` (extended precision by default) so that cancellation in
    f(x+h) - f(x-h) does not dominate the comparison.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError("epsilon must lie in [1e-6, 1e-4]")
    _, analytic = loss_and_grads(model.astype(np.float64), x, labels, weights)
    model = model.astype(fd_dtype)
    rng = np.random.default_rng(seed)
    slots = []
    for name, arr in model.params.items():
        for flat in range(arr.size):
            if name == "embedding" and flat < arr.shape[1]:
                continue  # padding row is frozen
            slots.append((name, flat))
    chosen = rng.choice(len(slots), size=min(n_params, len(slots)), replace=False)
    worst = 0.0
    for c in sorted(chosen.tolist()):
        name, flat = slots[c]
        arr = model.params[name].reshape(-1)
        orig = arr[flat]
        h = fd_dtype(epsilon)
        arr[flat] = orig + h
        up = _loss_only(model, x, labels, weights)
        arr[flat] = orig - h
        down = _loss_only(model, x, labels, weights)
        arr[flat] = orig
        numeric = float((up - down) / (2 * h))
        exact = float(analytic[name].reshape(-1)[flat])
        scale = max(abs(numeric), abs(exact))
        if scale < floor:
            continue
        worst = max(worst, abs(numeric - exact) / scale)
    return worst
