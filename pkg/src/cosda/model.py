"""MLP classifier with BatchNorm, flat parameter views and checkpoints."""
from __future__ import annotations

import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from . import diffmath as dm
from .errors import ConfigError, DataError, DimensionError, StateError
from .optim import SgdState, sgd_step

CHECKPOINT_VERSION = "cosda-checkpoint/1"

# Epoch BN statistics are the plain average of per-batch statistics.
EPOCH_BN_AGGREGATION = "mean_of_batch_stats"


@dataclass
class MlpConfig:
    layer_sizes: list[int]
    batchnorm_after_hidden: list[bool] | None = None
    bn_eps: float = dm.DEFAULT_BN_EPS
    init_seed: int = 0

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        n_hidden = len(self.layer_sizes) - 2
        if self.batchnorm_after_hidden is None:
            self.batchnorm_after_hidden = [True] * max(n_hidden, 0)
        self.batchnorm_after_hidden = [bool(b) for b in self.batchnorm_after_hidden]
        self.validate()

    def validate(self):
        sizes = self.layer_sizes
        if len(sizes) < 3:
            raise ConfigError(f"need input, at least one hidden layer and output, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer sizes must be >= 1, got {sizes}")
        if sizes[-1] < 2:
            raise ConfigError(f"need at least 2 classes, got {sizes[-1]}")
        if len(self.batchnorm_after_hidden) != len(sizes) - 2:
            raise ConfigError("batchnorm_after_hidden needs one flag per hidden layer")
        if not self.bn_eps > 0:
            raise ConfigError("bn_eps must be positive")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        unknown = set(d) - {"layer_sizes", "batchnorm_after_hidden", "bn_eps", "init_seed"}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def unflatten(self) -> dict[str, np.ndarray]:
        total = sum(math.prod(shape) for _, shape in self.layout)
        if total != self.values.size:
            raise DimensionError(f"layout covers {total} values, vector has {self.values.size}")
        out, pos = {}, 0
        for name, shape in self.layout:
            n = math.prod(shape)
            out[name] = self.values[pos:pos + n].reshape(shape).copy()
            pos += n
        return out


class EpochBnStats:
    """Running sum of per-batch BN statistics over one epoch."""

    def __init__(self):
        self.reset()

    def reset(self):
        self._mean_sums: list[np.ndarray] | None = None
        self._var_sums: list[np.ndarray] | None = None
        self.batch_count = 0

    def add(self, batch_stats):
        if self._mean_sums is None:
            self._mean_sums = [np.array(m, dtype=np.float64) for m, _ in batch_stats]
            self._var_sums = [np.array(v, dtype=np.float64) for _, v in batch_stats]
        else:
            for k, (m, v) in enumerate(batch_stats):
                self._mean_sums[k] = self._mean_sums[k] + m
                self._var_sums[k] = self._var_sums[k] + v
        self.batch_count += 1


def epoch_bn_stats(acc: EpochBnStats) -> list[tuple[np.ndarray, np.ndarray]]:
    if acc.batch_count < 1:
        raise StateError("no batches accumulated this epoch")
    n = acc.batch_count
    return [(m / n, v / n) for m, v in zip(acc._mean_sums, acc._var_sums)]


@dataclass
class Classifier:
    config: MlpConfig
    params: dict[str, np.ndarray]
    bn_running: list[tuple[np.ndarray, np.ndarray]]
    mode: str = "train"
    epoch_bn: EpochBnStats = field(default_factory=EpochBnStats, repr=False, compare=False)

    def copy(self, mode: str | None = None) -> "Classifier":
        return Classifier(
            config=MlpConfig.from_dict(self.config.to_dict()),
            params={k: v.copy() for k, v in self.params.items()},
            bn_running=[(m.copy(), v.copy()) for m, v in self.bn_running],
            mode=mode or self.mode,
        )

    def train(self) -> "Classifier":
        self.mode = "train"
        return self

    def eval(self) -> "Classifier":
        self.mode = "eval"
        return self

    @property
    def n_bn_layers(self) -> int:
        return sum(self.config.batchnorm_after_hidden)

    def param_vector(self) -> ParamVector:
        layout = tuple((k, tuple(v.shape)) for k, v in self.params.items())
        values = np.concatenate([v.reshape(-1) for v in self.params.values()])
        return ParamVector(values, layout)

    def set_param_vector(self, pv: ParamVector):
        current = tuple((k, tuple(v.shape)) for k, v in self.params.items())
        if tuple(pv.layout) != current:
            raise DimensionError("parameter layout does not match this classifier")
        self.params = pv.unflatten()

    def commit_epoch_bn(self):
        """Replace running BN stats with this epoch's aggregate and reset it."""
        self.bn_running = epoch_bn_stats(self.epoch_bn)
        self.epoch_bn.reset()


def _layer_names(config: MlpConfig):
    """Yield (kind, names) for each layer in forward order."""
    n_hidden = len(config.layer_sizes) - 2
    for i in range(n_hidden + 1):
        yield "affine", (f"layer{i}.weight", f"layer{i}.bias")
        if i < n_hidden:
            if config.batchnorm_after_hidden[i]:
                yield "bn", (f"bn{i}.gain", f"bn{i}.shift")
            yield "relu", ()


def init_classifier(config: MlpConfig) -> Classifier:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, identity BN."""
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    sizes = config.layer_sizes
    params: dict[str, np.ndarray] = {}
    bn_running = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"layer{i}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"layer{i}.bias"] = np.zeros(fan_out)
        if i < len(sizes) - 2 and config.batchnorm_after_hidden[i]:
            params[f"bn{i}.gain"] = np.ones(fan_out)
            params[f"bn{i}.shift"] = np.zeros(fan_out)
            bn_running.append((np.zeros(fan_out), np.ones(fan_out)))
    return Classifier(config=config, params=params, bn_running=bn_running, mode="train")


def _check_width(model: Classifier, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise DimensionError(
            f"input shape {x.shape} does not match model input width {model.config.input_dim}")


def forward(model: Classifier, x, mode: str | None = None):
    """Numpy forward pass. Returns ``(logits, batch_stats)``; batch stats are
    only collected in train mode."""
    mode = mode or model.mode
    h = dm.as_tensor(x)
    _check_width(model, h)
    stats = []
    bn_k = 0
    p = model.params
    for kind, names in _layer_names(model.config):
        if kind == "affine":
            h = _kernels.affine_rows(h, p[names[0]], p[names[1]])
        elif kind == "bn":
            h, bs = dm.batchnorm_forward(h, p[names[0]], p[names[1]], mode,
                                         model.bn_running[bn_k], model.config.bn_eps)
            if bs is not None:
                stats.append(bs)
            bn_k += 1
        else:
            h = np.maximum(h, 0.0)
    return h, stats


def forward_tape(model: Classifier, tape: dm.GradientTape, x, param_vars: dict[str, dm.Var],
                 mode: str = "train"):
    """Forward pass recorded on ``tape``; returns ``(logits_var, batch_stats)``."""
    x = dm.as_tensor(x)
    _check_width(model, x)
    h = tape.constant(x)
    stats = []
    bn_k = 0
    for kind, names in _layer_names(model.config):
        if kind == "affine":
            h = tape.affine(h, param_vars[names[0]], param_vars[names[1]])
        elif kind == "bn":
            if mode == "train":
                h, bs = tape.batchnorm_train(h, param_vars[names[0]], param_vars[names[1]],
                                             model.config.bn_eps)
                stats.append(bs)
            else:
                h = tape.batchnorm_eval(h, param_vars[names[0]], param_vars[names[1]],
                                        model.bn_running[bn_k], model.config.bn_eps)
            bn_k += 1
        else:
            h = tape.relu(h)
    return h, stats


def predict_logits(model: Classifier, x) -> np.ndarray:
    return forward(model, x)[0]


def predict_proba(model: Classifier, x) -> np.ndarray:
    return dm.softmax(predict_logits(model, x))


def cross_entropy_tape(tape: dm.GradientTape, logits: dm.Var, labels: np.ndarray) -> dm.Var:
    onehot = np.zeros(logits.value.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    logq = tape.log_softmax(logits)
    return tape.scale(tape.sum(tape.mul(tape.constant(onehot), logq)), -1.0 / labels.size)


def _check_labels(model: Classifier, labels, n_rows: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n_rows} rows")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= model.config.n_classes):
        raise DataError(f"labels must lie in [0, {model.config.n_classes})")
    return labels.astype(np.int64)


def supervised_step(model: Classifier, x, labels, optimizer_state: SgdState, lr: float,
                    momentum: float = 0.9, weight_decay: float = 0.0) -> float:
    """One SGD step on mean cross-entropy; returns the pre-step loss."""
    if model.mode != "train":
        raise StateError("supervised_step requires a model in train mode")
    x = dm.as_tensor(x)
    labels = _check_labels(model, labels, x.shape[0])
    tape = dm.GradientTape()
    pvars = {k: tape.watch(v) for k, v in model.params.items()}
    logits, stats = forward_tape(model, tape, x, pvars, mode="train")
    loss = cross_entropy_tape(tape, logits, labels)
    grads = tape.gradient(loss, list(pvars.values()))
    pv = model.param_vector()
    flat_grad = np.concatenate([g.reshape(-1) for g in grads])
    new = sgd_step(pv.values, flat_grad, optimizer_state, lr, momentum, weight_decay)
    model.set_param_vector(ParamVector(new, pv.layout))
    if stats:
        model.epoch_bn.add(stats)
    return float(loss.value)


# ------------------------------------------------------------ checkpoints

def _atomic_write_bytes(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: Classifier, path) -> None:
    """Write ``model`` as an ``.npz`` container with a JSON header."""
    pv = model.param_vector()
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "layout": [[name, list(shape)] for name, shape in pv.layout],
        "n_bn_layers": len(model.bn_running),
        "mode": model.mode,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
              "params": pv.values}
    for k, (mu, var) in enumerate(model.bn_running):
        arrays[f"bn{k}_mean"] = mu
        arrays[f"bn{k}_var"] = var
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write_bytes(Path(path), buf.getvalue())


def load_checkpoint(path) -> Classifier:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('version')!r}")
        layout = tuple((name, tuple(shape)) for name, shape in meta["layout"])
        pv = ParamVector(z["params"].copy(), layout)
        bn = [(z[f"bn{k}_mean"].copy(), z[f"bn{k}_var"].copy()) for k in range(meta["n_bn_layers"])]
    config = MlpConfig.from_dict(meta["config"])
    return Classifier(config=config, params=pv.unflatten(), bn_running=bn, mode=meta["mode"])


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown pretrain config keys: {sorted(unknown)}")
        return cls(**d)


def pretrain(model: Classifier, x, labels, config: PretrainConfig, rng: np.random.Generator) -> list[float]:
    """Supervised source training; running BN stats are refreshed every epoch.

    Returns the mean loss of each epoch.
    """
    x = dm.as_tensor(x)
    labels = _check_labels(model, labels, x.shape[0])
    model.train()
    state = SgdState()
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(x.shape[0])
        losses = []
        for start in range(0, order.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            if idx.size < 2:
                continue
            losses.append(supervised_step(model, x[idx], labels[idx], state, config.lr,
                                          config.momentum, config.weight_decay))
        if model.epoch_bn.batch_count:
            model.commit_epoch_bn()
        history.append(float(np.mean(losses)))
    model.eval()
    return history
