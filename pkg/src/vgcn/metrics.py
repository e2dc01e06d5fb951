"""Classification and uncertainty-quality metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError


def _check(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels, dtype=int)
    if predictions.shape[0] == 0 or labels.shape[0] == 0:
        raise DataError("metrics need at least one sample")
    if predictions.shape[0] != labels.shape[0]:
        raise DataError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    return predictions, labels


def _f1_for(pred, labels, cls) -> float:
    tp = int(np.sum((pred == cls) & (labels == cls)))
    fp = int(np.sum((pred == cls) & (labels != cls)))
    fn = int(np.sum((pred != cls) & (labels == cls)))
    if tp + fp + fn == 0:
        return 1.0  # class absent from both predictions and labels
    return 2 * tp / (2 * tp + fp + fn)


def f1(predictions, labels, averaging: str = "binary", n_classes: int | None = None,
       positive: int = 1) -> float:
    """Binary F1 of the ``positive`` class or unweighted macro F1."""
    pred, labels = _check(predictions, labels)
    pred = pred.astype(int)
    if averaging == "binary":
        return _f1_for(pred, labels, positive)
    if averaging != "macro":
        raise ConfigError(f"averaging must be binary or macro, got {averaging!r}")
    if n_classes is None:
        n_classes = int(max(pred.max(), labels.max())) + 1
    return float(np.mean([_f1_for(pred, labels, c) for c in range(n_classes)]))


def argmax_lowest(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(scores), axis=-1)


def top1(scores, labels) -> float:
    scores, labels = _check(scores, labels)
    return float(np.mean(argmax_lowest(scores) == labels))


def entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, -p * np.log(p), 0.0).sum(axis=-1)


def predictive_uncertainty(prediction) -> dict:
    """Entropy of the mean probabilities and the largest per-class variance."""
    return {"entropy": entropy(prediction.class_probabilities),
            "max_class_variance": np.max(np.asarray(prediction.class_variance), axis=-1)}


def ece(probabilities, labels, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width, left-open confidence bins ``(lo, hi]``."""
    if n_bins < 1:
        raise ConfigError(f"n_bins must be >= 1, got {n_bins}")
    probabilities, labels = _check(probabilities, labels)
    conf = probabilities.max(axis=-1)
    correct = (argmax_lowest(probabilities) == labels).astype(np.float64)
    # bin b holds confidences in (b/n, (b+1)/n]; a confidence of exactly 0 joins bin 0
    bins = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        sel = bins == b
        if sel.any():
            total += sel.mean() * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


@dataclass
class EvalReport:
    f1: float
    top1: float
    mean_entropy: float
    ece: float
    n_eval_samples: int
    entropy_quantiles: dict = field(default_factory=dict)
    mc_standard_error: float = 0.0
    f1_averaging: str = "binary"
    n_inputs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_predictions(probabilities, labels, n_samples: int, class_variance=None,
                         averaging: str = "binary", n_classes: int | None = None,
                         n_bins: int = 10) -> EvalReport:
    """Summarise Monte Carlo predictions of a labelled set.

    ``mc_standard_error`` is the mean over inputs of the largest per-class
    standard error ``sqrt(variance / K)`` of the probability estimate.
    """
    probabilities, labels = _check(probabilities, labels)
    ent = entropy(probabilities)
    q = np.quantile(ent, [0.05, 0.25, 0.5, 0.75, 0.95])
    se = 0.0
    if class_variance is not None:
        se = float(np.mean(np.sqrt(np.max(np.asarray(class_variance), axis=-1) / n_samples)))
    pred = argmax_lowest(probabilities)
    return EvalReport(
        f1=f1(pred, labels, averaging, n_classes),
        top1=top1(probabilities, labels),
        mean_entropy=float(ent.mean()),
        ece=ece(probabilities, labels, n_bins),
        n_eval_samples=int(n_samples),
        entropy_quantiles={k: float(v) for k, v in zip(("q05", "q25", "q50", "q75", "q95"), q)},
        mc_standard_error=se,
        f1_averaging=averaging,
        n_inputs=int(labels.shape[0]),
    )
