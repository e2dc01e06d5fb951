"""Loss, optimizers, the training loop, pretrained initialisation and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import (
    CompatibilityError,
    ConfigError,
    ContractError,
    DataError,
    MalformedFileError,
    VersionError,
)
from .metrics import argmax_lowest, f1, top1
from .models import TWIN, ArchConfig, Model, buffer_specs, parameter_specs
from .rng import RandomStream
from .uncertainty import mc_predict
from .var_layers import bias_for_variance

FORMAT_VERSION = 1
OPTIMIZERS = ("sgd", "sgd-momentum", "adam")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    train_samples_per_input: int = 1
    seed: int = 0
    eval_samples: int = 16
    split_seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "train_samples_per_input", "eval_samples"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        # a zero rate is accepted: it freezes the parameters, which is handy for checks
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss and optimisation


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=int)
    n_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DataError(f"{labels.shape} labels for logits of shape {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in 0..{n_classes - 1}")
    onehot = np.eye(n_classes)[labels]
    picked = ad.sum(ad.mul(ad.log_softmax(logits, axis=-1), Tensor(onehot, copy=False)))
    return ad.scale(picked, -1.0 / labels.size)


def multi_sample_loss(model: Model, batch, n_samples: int, rng) -> Tensor:
    """Cross-entropy averaged over ``n_samples`` stochastic passes of ``batch = (x, graph, labels)``.

    Pass ``k`` draws its noise from ``rng.split(k)``.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    x, graph, labels = batch[:3]
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= model.config.n_classes):
        raise DataError(f"labels must lie in 0..{model.config.n_classes - 1}")
    total = None
    for k in range(n_samples):
        stream = rng.split(k) if model.is_variational else None
        loss = cross_entropy(model.forward(x, graph, stream), labels)
        total = loss if total is None else ad.add(total, loss)
    return ad.scale(total, 1.0 / n_samples)


def optimizer_step(params: dict, state: dict, config: TrainConfig) -> dict:
    """Update ``params`` in place from their ``.grad`` and return the optimizer state."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for {missing[0]}")
    lr = config.learning_rate
    if config.optimizer == "sgd":
        for p in params.values():
            p.data = p.data - lr * p.grad
        return state
    if config.optimizer == "sgd-momentum":
        vel = state.setdefault("velocity", {})
        for name, p in params.items():
            v = config.momentum * vel.get(name, 0.0) + p.grad
            vel[name] = v
            p.data = p.data - lr * v
        return state
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = state.get("t", 0) + 1
    state["t"] = t
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    for name, p in params.items():
        m[name] = b1 * m.get(name, 0.0) + (1 - b1) * p.grad
        v[name] = b2 * v.get(name, 0.0) + (1 - b2) * p.grad ** 2
        m_hat = m[name] / (1 - b1 ** t)
        v_hat = v[name] / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# ---------------------------------------------------------------------------
# evaluation helpers


def predict_dataset(model: Model, ds, indices, k: int, seed: int = 0, batch_size: int = 64):
    """Monte Carlo class probabilities and variances for ``ds.samples[indices]``, in index order."""
    from .data import iter_batches

    indices = np.asarray(indices, dtype=int)
    probs = np.zeros((len(indices), model.config.n_classes))
    var = np.zeros_like(probs)
    pos = {int(i): j for j, i in enumerate(indices)}
    was_training = model.training
    model.eval()
    try:
        for x, graph, _, idx in iter_batches(ds, indices, batch_size):
            # the noise of each input is keyed by its dataset index, not its batch position
            pred = mc_predict(model, x, graph, k, RandomStream(seed, (0x3E,)), row_keys=idx)
            rows = [pos[int(i)] for i in idx]
            probs[rows] = pred.class_probabilities
            var[rows] = pred.class_variance
    finally:
        model.train(was_training)
    return probs, var


def selection_metric(ds, probs, labels) -> float:
    if ds.kind == "spatial":
        averaging = "binary" if ds.n_classes == 2 else "macro"
        return f1(argmax_lowest(probs), labels, averaging, ds.n_classes)
    return top1(probs, labels)


def nll(probs, labels) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.clip(p, 1e-300, None))))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    log: list
    best_epoch: int
    best_metric: float
    final_model: Model = field(repr=False, default=None)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "metric"])
        for row in self.log:
            w.writerow([row["epoch"], row["split"], repr(row["loss"]), repr(row["metric"])])
        return buf.getvalue()


def train(model: Model, ds, config: TrainConfig, indices=None) -> TrainResult:
    """Fit ``model`` on the training split and keep the best validation epoch.

    ``indices`` optionally overrides the ``(train, val)`` index arrays.
    """
    from .data import iter_batches, split_indices

    if len(ds) == 0:
        raise DataError("cannot train on an empty dataset")
    if indices is None:
        train_idx, val_idx, _ = split_indices(len(ds), config.split_seed)
    else:
        train_idx, val_idx = (np.asarray(i, dtype=int) for i in indices[:2])
    if len(train_idx) == 0:
        raise DataError("training split is empty")
    if len(val_idx) == 0:
        val_idx = train_idx
    root = RandomStream(config.seed, (0x7A,))
    state: dict = {}
    log = []
    best = (-math.inf, 0, None)
    labels_all = ds.labels
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = root.split(epoch)
        losses, weights = [], []
        for step, (x, graph, labels, _) in enumerate(iter_batches(ds, train_idx, config.batch_size,
                                                                  order.split(0))):
            for p in model.params.values():
                p.grad = None
            with Tape():
                loss = multi_sample_loss(model, (x, graph, labels), config.train_samples_per_input,
                                         order.split(1).split(step))
                ad.backward(loss)
            live = {n: p for n, p in model.params.items() if p.grad is not None}
            state = optimizer_step(live, state, config)
            losses.append(loss.item())
            weights.append(len(labels))
        model.eval()
        train_loss = float(np.average(losses, weights=weights))
        probs, _ = predict_dataset(model, ds, train_idx, config.eval_samples, config.seed)
        log.append({"epoch": epoch, "split": "train", "loss": train_loss,
                    "metric": selection_metric(ds, probs, labels_all[train_idx])})
        probs, _ = predict_dataset(model, ds, val_idx, config.eval_samples, config.seed)
        metric = selection_metric(ds, probs, labels_all[val_idx])
        log.append({"epoch": epoch, "split": "val", "loss": nll(probs, labels_all[val_idx]), "metric": metric})
        if metric > best[0]:
            best = (metric, epoch, model.copy())
    final = model
    chosen = best[2] if best[2] is not None else model.copy()
    chosen.eval()
    chosen.metadata = {"seed": config.seed, "epoch": best[1]}
    return TrainResult(chosen, log, best[1], best[0], final)


# ---------------------------------------------------------------------------
# pretrained initialisation


def twin_name(name: str) -> str | None:
    """Deterministic-twin parameter name of a variational parameter, or None for variance-only ones."""
    if ".sigma." in name or name.endswith("var_bias"):
        return None
    return name.replace(".mu.", ".")


def init_from_pretrained(model: Model, source: Model, init_variance: float) -> Model:
    """Copy a deterministic model into the mean branch of ``model``; start the variance at ``init_variance``.

    Variance-branch weights are zeroed and every variance bias solves
    ``softplus(bias) + floor = init_variance``.
    """
    cfg = model.config
    if not model.is_variational:
        raise CompatibilityError(f"{cfg.kind} is not a variational model")
    expected = TWIN[cfg.kind]
    if source.kind != expected:
        raise CompatibilityError(f"{cfg.kind} needs a pretrained {expected}, got {source.kind}")
    if init_variance < cfg.variance_floor:
        raise ConfigError(f"init_variance {init_variance} is below the variance floor {cfg.variance_floor}")
    params = {}
    used = set()
    for name, target in model.params.items():
        src_name = twin_name(name)
        if src_name is None:
            if name.endswith("var_bias"):
                value = np.full(target.shape, bias_for_variance(init_variance, cfg.variance_floor))
            else:
                value = np.zeros(target.shape)
            params[name] = Tensor(value, requires_grad=True)
            continue
        if src_name not in source.params:
            raise CompatibilityError(f"pretrained model lacks parameter {src_name}", src_name)
        src = source.params[src_name]
        if src.shape != target.shape:
            raise CompatibilityError(
                f"parameter {src_name}: pretrained shape {src.shape} vs expected {target.shape}", src_name)
        params[name] = Tensor(src.data, requires_grad=True)
        used.add(src_name)
    extra = sorted(set(source.params) - used)
    if extra:
        raise CompatibilityError(f"pretrained parameter {extra[0]} has no counterpart", extra[0])
    buffers = {}
    for name, value in model.buffers.items():
        src_name = twin_name(name)
        if src_name is None:
            # variance-branch statistics have no twin and start fresh
            buffers[name] = value.copy()
            continue
        if src_name not in source.buffers or source.buffers[src_name].shape != value.shape:
            raise CompatibilityError(f"pretrained model lacks buffer {src_name}", src_name)
        buffers[name] = source.buffers[src_name].copy()
    out = Model(cfg, params, buffers)
    out.metadata = dict(getattr(source, "metadata", {}) or {})
    return out


def set_variance(model: Model, variance: float) -> Model:
    """Zero every variance-branch weight so the variance heads output ``variance`` everywhere."""
    for name, p in model.params.items():
        if twin_name(name) is None:
            if name.endswith("var_bias"):
                p.data = np.full(p.shape, bias_for_variance(variance, model.config.variance_floor))
            else:
                p.data = np.zeros(p.shape)
    return model


# ---------------------------------------------------------------------------
# checkpoints


def _encode(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "values": [repr(float(v)) for v in arr.reshape(-1)]}


def _decode(entry, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        values = np.array([float(v) for v in entry["values"]], dtype=np.float64)
        return values.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"parameter {name} is malformed ({exc})") from None


def checkpoint_dict(model: Model, metadata: dict | None = None) -> dict:
    meta = dict(getattr(model, "metadata", {}) or {})
    meta.update(metadata or {})
    cache = getattr(model, "attention_cache", None)
    return {
        "format_version": FORMAT_VERSION,
        "architecture": model.config.to_dict(),
        "parameters": {n: _encode(p.data) for n, p in model.params.items()},
        "buffers": {n: _encode(b) for n, b in model.buffers.items()},
        "metadata": meta,
        "attention_cache": None if cache is None else [
            None if pair is None else [_encode(pair[0]), _encode(pair[1])] for pair in cache],
    }


def checkpoint_bytes(model: Model, metadata: dict | None = None) -> bytes:
    return (json.dumps(checkpoint_dict(model, metadata), sort_keys=True, indent=1) + "\n").encode()


def save_checkpoint(model: Model, path, metadata: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, metadata))


def model_from_checkpoint(doc: dict) -> Model:
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise MalformedFileError("checkpoint has no format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionError(doc["format_version"], FORMAT_VERSION)
    try:
        cfg = ArchConfig.from_dict(doc["architecture"])
        raw_params, raw_buffers = doc["parameters"], doc["buffers"]
        meta = doc.get("metadata", {})
        raw_cache = doc.get("attention_cache")
    except (KeyError, TypeError) as exc:
        raise MalformedFileError(f"checkpoint is missing {exc}") from None
    params = {}
    for name, (shape, _) in parameter_specs(cfg).items():
        if name not in raw_params:
            raise CompatibilityError(f"checkpoint lacks parameter {name}", name)
        arr = _decode(raw_params[name], name)
        if arr.shape != tuple(shape):
            raise CompatibilityError(f"parameter {name} has shape {arr.shape}, architecture needs {tuple(shape)}",
                                     name)
        params[name] = Tensor(arr, requires_grad=True)
    extra = sorted(set(raw_params) - set(params))
    if extra:
        raise CompatibilityError(f"checkpoint has unexpected parameter {extra[0]}", extra[0])
    buffers = {}
    for name, (shape, _) in buffer_specs(cfg).items():
        if name not in raw_buffers:
            raise CompatibilityError(f"checkpoint lacks buffer {name}", name)
        arr = _decode(raw_buffers[name], name)
        if arr.shape != tuple(shape):
            raise CompatibilityError(f"buffer {name} has shape {arr.shape}, architecture needs {tuple(shape)}", name)
        buffers[name] = arr
    model = Model(cfg, params, buffers)
    model.metadata = meta
    if raw_cache is not None:
        model.attention_cache = [None if pair is None else (_decode(pair[0], "cache"), _decode(pair[1], "cache"))
                                 for pair in raw_cache]
    return model


def load_checkpoint(path) -> Model:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise DataError(f"checkpoint file not found: {path}") from None
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedFileError(f"{path} is not a valid checkpoint ({exc})") from None
    return model_from_checkpoint(doc)
