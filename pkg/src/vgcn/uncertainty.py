"""Monte Carlo integration of outputs and attentions, attention filtering and
the two uncertainty-aware attention variants (early attention and fully
Monte Carlo integrated).

Monte Carlo passes over a batch run as one replicated batch: row ``b * K + k``
is pass ``k`` of input ``b`` and draws its noise from ``rng.split(b).split(k)``,
so the result does not depend on how the passes are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .det_layers import activation, attention_mask, gat_attention
from .errors import ConfigError, StateError, UnsupportedModelError
from .rng import RandomStream, StackedStream, as_stream
from .var_layers import VariationalPair, gaussian_sample, vgat_branches


@dataclass
class UncertainAttention:
    """Monte Carlo mean and variance of one attention matrix.

    ``n_samples == 0`` marks a direct read from input-independent weights.
    ``mean`` and ``variance`` are ``(N, N)`` or batched ``(B, N, N)``.
    """

    layer_index: int
    partition: int | None
    mean: np.ndarray
    variance: np.ndarray
    n_samples: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if self.mean.shape != self.variance.shape:
            raise ValueError(f"mean {self.mean.shape} and variance {self.variance.shape} differ")
        if np.any(self.variance < 0):
            raise ValueError("attention variance must be non-negative")
        if self.n_samples == 1:
            raise ValueError("a Monte Carlo variance needs at least two samples")

    def select(self, index: int) -> "UncertainAttention":
        """The entry of one batch row."""
        if self.mean.ndim == 2:
            return self
        return UncertainAttention(self.layer_index, self.partition, self.mean[index],
                                  self.variance[index], self.n_samples)

    def to_dict(self) -> dict:
        return {"layer": self.layer_index, "partition": self.partition,
                "mean": self.mean.tolist(), "variance": self.variance.tolist(),
                "n_samples": self.n_samples}


@dataclass(frozen=True)
class FilterConfig:
    limit: float = 1.0
    replacement: float = 0.01
    rule: str = "as-written"

    def __post_init__(self):
        if not self.limit >= 0:
            raise ConfigError(f"filter limit must be >= 0, got {self.limit}")
        if not self.replacement >= 0:
            raise ConfigError(f"filter replacement must be >= 0, got {self.replacement}")
        if self.rule not in ("as-written", "consistent"):
            raise ConfigError(f"filter rule must be as-written or consistent, got {self.rule!r}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "FilterConfig":
        d = d or {}
        return cls(float(d.get("limit", 1.0)), float(d.get("replacement", 0.01)), d.get("rule", "as-written"))


@dataclass
class Prediction:
    """Monte Carlo summary of class probabilities, per input when batched."""

    class_probabilities: np.ndarray
    class_variance: np.ndarray
    entropy: np.ndarray
    n_samples: int
    samples: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# filtering


def _keep_masks(mean, variance, cfg: FilterConfig):
    if math.isinf(cfg.limit):
        keep = np.ones(np.shape(mean), dtype=bool)
        return keep, keep
    keep_mean = variance <= cfg.limit * mean
    if cfg.rule == "as-written":
        keep_var = mean <= cfg.limit * variance
    else:
        keep_var = keep_mean
    return keep_mean, keep_var


def filter_arrays(mean, variance, cfg: FilterConfig):
    """Filter a mean/variance pair of attention matrices.

    ``as-written``: a mean entry survives when ``variance <= limit * mean``
    (otherwise it becomes ``replacement``); a variance entry survives when
    ``mean <= limit * variance`` (otherwise 0).  ``consistent`` keys both on
    the first condition.  An infinite limit keeps everything.
    """
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    keep_mean, keep_var = _keep_masks(mean, variance, cfg)
    return np.where(keep_mean, mean, cfg.replacement), np.where(keep_var, variance, 0.0)


def filter_attention(ua: UncertainAttention, cfg: FilterConfig):
    """``(mean_filtered, variance_filtered)`` of an uncertain attention."""
    return filter_arrays(ua.mean, ua.variance, cfg)


def filter_attention_tensor(lam_mu: Tensor, lam_sigma: Tensor | None, cfg: FilterConfig) -> Tensor:
    """In-graph filter of a single-pass attention; the keep mask carries no gradient."""
    var = np.zeros(lam_mu.shape) if lam_sigma is None else np.clip(lam_sigma.data, 0.0, None)
    keep, _ = _keep_masks(lam_mu.data, var, cfg)
    keep = keep.astype(np.float64)
    return ad.add(ad.mul(lam_mu, Tensor(keep, copy=False)),
                  Tensor(cfg.replacement * (1.0 - keep), copy=False))


# ---------------------------------------------------------------------------
# layer-level uncertainty-aware forwards


def ua_ea_forward(S, A, vp: VariationalPair, cached_attention, rng, rho: str = "identity",
                  rho_att: str = "softmax", deterministic: bool = False,
                  in_graph_filter: FilterConfig | None = None, return_attention: bool = False):
    """Early-attention layer: ``rho(filtered mean attention) @ rho_out(sampled features)``.

    Features are drawn from ``N(rho_mu(S W_mu), VarHead(S W_sigma))``.  Without
    ``cached_attention`` the layer filters its own single-pass attention
    when ``in_graph_filter`` is given (training) and raises otherwise.
    """
    S = as_tensor(S)
    mask = attention_mask(A, vp.mu.mask_mode)
    s_mu = ad.matmul(S, vp.mu.W)
    lam_mu = gat_attention(s_mu, vp.mu.w_s, vp.mu.w_d, mask, rho_att)
    lam_sigma = None
    if vp.sigma is None:
        var = vp.head(None, s_mu.shape)
    else:
        s_sigma = ad.matmul(S, vp.sigma.W)
        lam_sigma = gat_attention(s_sigma, vp.sigma.w_s, vp.sigma.w_d, mask, rho_att)
        var = vp.head(s_sigma)
    if cached_attention is not None:
        att = as_tensor(cached_attention)
    elif in_graph_filter is not None:
        att = filter_attention_tensor(lam_mu, lam_sigma, in_graph_filter)
    else:
        raise StateError("early-attention layer needs a cached filtered attention")
    features = activation(vp.rho_out)(
        gaussian_sample(activation(vp.rho_mu)(s_mu), var, rng, deterministic))
    out = ad.matmul(activation(rho)(att), features)
    return (out, lam_mu, lam_sigma) if return_attention else out


def ua_fmci_forward(S, A, vp: VariationalPair, filtered_mean, filtered_variance, rng,
                    rho: str = "identity", rho_att: str = "softmax", deterministic: bool = False) -> Tensor:
    """VGAT layer whose attentions are replaced by a filtered Monte Carlo pair."""
    if filtered_mean is None or (vp.sigma is not None and filtered_variance is None):
        raise StateError("fully integrated layer needs the filtered mean and variance attentions")
    mean, var, _, _ = vgat_branches(S, A, vp, rho, rho_att, (filtered_mean, filtered_variance))
    return activation(vp.rho_out)(gaussian_sample(mean, var, rng, deterministic))


# ---------------------------------------------------------------------------
# model-level Monte Carlo


def mc_streams(rng, batch: int, k: int, row_keys=None) -> StackedStream:
    """One stream per replicated row: pass ``j`` of input ``b`` uses ``rng.split(key_b).split(j)``."""
    rng = as_stream(rng)
    keys = range(batch) if row_keys is None else [int(r) for r in row_keys]
    if len(keys) != batch:
        raise ValueError(f"{len(keys)} row keys for a batch of {batch}")
    return StackedStream(rng.split(b).split(j) for b in keys for j in range(k))


def _batched_input(model, x):
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = x.ndim == (3 if model.config.is_temporal else 2)
    return (x[None] if single else x), single


def _replicate_graph(model, graph, k: int):
    from .models import GraphBatch

    if model.config.is_temporal:
        return graph
    if not isinstance(graph, GraphBatch):
        graph = GraphBatch(graph)
    return graph.repeat(k)


def _replicate_attention(attention, k: int):
    if attention is None:
        return None
    return [None if a is None else tuple(None if m is None else np.repeat(m, k, axis=0) for m in a)
            for a in attention]


def mc_forward(model, x, graph, k: int, rng, attention=None, row_keys=None):
    """Run ``k`` stochastic passes over each input.

    Returns ``(logits, records)`` with logits of shape ``(B, k, C)`` and the
    attention records of the replicated batch (leading axis ``B * k``).
    """
    x, _ = _batched_input(model, x)
    b = x.shape[0]
    rep = np.repeat(x, k, axis=0)
    g = _replicate_graph(model, graph, k)
    rng = mc_streams(rng, b, k, row_keys) if model.is_variational else None
    logits, records = model.forward(rep, g, rng, attention=_replicate_attention(attention, k), collect=True)
    return logits.data.reshape(b, k, -1), records


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_np(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def _needs_calibration(model) -> bool:
    return model.kind in ("ua_ea_vgat", "ua_fmci_vgat")


def mc_predict(model, x, graph, k: int, rng=0, attention=None, row_keys=None) -> Prediction:
    """Mean softmax, unbiased per-class variance and entropy over ``k`` passes.

    Uncertainty-aware models are calibrated on the same input first unless
    ``attention`` is supplied.  Deterministic models run once and report
    zero variance.
    """
    if k < 1:
        raise ConfigError(f"number of Monte Carlo samples must be >= 1, got {k}")
    xb, single = _batched_input(model, x)
    if not model.is_variational:
        logits, _ = mc_forward(model, xb, graph, 1, None)
        probs = softmax_np(logits[:, 0])
        var = np.zeros_like(probs)
        samples = np.repeat(probs[:, None], k, axis=1)
    else:
        rng = as_stream(rng)
        if _needs_calibration(model) and attention is None:
            cfg = FilterConfig.from_dict(model.config.filter)
            n_cal = int(model.config.filter.get("calibration_samples", 16))
            _, attention = calibrate(model, xb, graph, max(n_cal, 2), rng.split(1), cfg, row_keys)
        logits, _ = mc_forward(model, xb, graph, k, rng.split(0), attention, row_keys)
        samples = softmax_np(logits)
        probs = samples.mean(axis=1)
        var = samples.var(axis=1, ddof=1) if k >= 2 else np.zeros_like(probs)
    ent = entropy_np(probs)
    if single:
        return Prediction(probs[0], var[0], ent[0], k, samples[0])
    return Prediction(probs, var, ent, k, samples)


def attention_moments(mu_samples: np.ndarray, sigma_samples: np.ndarray | None = None):
    """Mean and variance of an attention matrix over the leading (sample) axis.

    The variance is the mean of the variance-branch attention (clipped at 0)
    plus the unbiased spread of the mean-branch attention across samples.
    """
    mu_samples = np.asarray(mu_samples, dtype=np.float64)
    k = mu_samples.shape[0]
    constant = np.all(mu_samples == mu_samples[:1], axis=0)
    # identical samples give exactly the sample and zero spread, free of rounding
    mean = np.where(constant, mu_samples[0], mu_samples.mean(axis=0))
    spread = mu_samples.var(axis=0, ddof=1) if k >= 2 else np.zeros_like(mean)
    spread = np.where(constant, 0.0, spread)
    var = spread
    if sigma_samples is not None:
        var = var + np.clip(np.asarray(sigma_samples), 0.0, None).mean(axis=0)
    return mean, np.clip(var, 0.0, None)


def _records_to_uas(records, b: int, k: int, single: bool, layer=None) -> list:
    out = []
    for r in records:
        if layer is not None and r["layer"] != layer:
            continue
        if r["static"]:
            mean = r["mu"]
            var = np.zeros_like(mean) if r["sigma"] is None else r["sigma"]
            if not single:
                mean = np.broadcast_to(mean, (b,) + mean.shape).copy()
                var = np.broadcast_to(var, (b,) + var.shape).copy()
            out.append(UncertainAttention(r["layer"], r["partition"], mean, var, 0))
            continue
        n = r["mu"].shape[-1]
        mu = np.moveaxis(r["mu"].reshape(b, k, n, n), 1, 0)
        sigma = None if r["sigma"] is None else np.moveaxis(r["sigma"].reshape(b, k, n, n), 1, 0)
        mean, var = attention_moments(mu, sigma)
        if single:
            mean, var = mean[0], var[0]
        out.append(UncertainAttention(r["layer"], r["partition"], mean, var, k))
    return out


def calibrate(model, x, graph, k: int, rng, cfg: FilterConfig, row_keys=None):
    """Layer-by-layer Monte Carlo attentions and their filtered pairs.

    Layer ``l`` is integrated with layers ``< l`` already using their
    filtered pairs.  Returns ``(uncertain_attentions, filtered)`` where
    ``filtered[l] = (mean, variance)`` with a leading batch axis.
    """
    if k < 2:
        raise ConfigError("attention calibration needs at least two Monte Carlo samples")
    xb, _ = _batched_input(model, x)
    b = xb.shape[0]
    rng = as_stream(rng)
    filtered: list = [None] * model.n_layers()
    uas = []
    for layer in range(model.n_layers()):
        _, records = mc_forward(model, xb, graph, k, rng.split(layer), filtered, row_keys)
        (ua,) = _records_to_uas(records, b, k, single=False, layer=layer)
        uas.append(ua)
        filtered[layer] = filter_attention(ua, cfg)
    return uas, filtered


def mc_attention(model, x, graph, k: int, rng=0) -> list:
    """Monte Carlo mean and variance of every attention matrix of ``model``.

    Input-independent attentions (ST-GCN style learned masks) are read
    directly from the weights; ``k`` and the input do not matter for them.
    """
    if not model.has_attention:
        raise UnsupportedModelError(f"model kind {model.kind!r} has no attention")
    if k < 2:
        raise ConfigError(f"attention integration needs at least two samples, got {k}")
    xb, single = _batched_input(model, x)
    b = xb.shape[0]
    if _needs_calibration(model):
        uas, _ = calibrate(model, xb, graph, k, rng, FilterConfig.from_dict(model.config.filter))
        return [u.select(0) for u in uas] if single else uas
    if model.is_variational:
        _, records = mc_forward(model, xb, graph, k, rng)
        return _records_to_uas(records, b, k, single)
    _, records = mc_forward(model, xb, graph, 1, None)
    out = []
    for r in records:
        mean = r["mu"] if r["static"] or not single else r["mu"][0]
        if r["static"] and not single:
            mean = np.broadcast_to(mean, (b,) + mean.shape).copy()
        out.append(UncertainAttention(r["layer"], r["partition"], mean, np.zeros_like(mean),
                                      0 if r["static"] else k))
    return out


def convert_vgat_to_fmci(model, sample, k: int, cfg: FilterConfig, rng=0):
    """Turn a trained VGAT into its fully integrated variant without retraining.

    ``sample`` is ``(x, graph)`` used to compute the attached attention
    cache; parameters are copied unchanged.
    """
    from .models import ArchConfig, Model

    if model.kind != "vgat":
        raise UnsupportedModelError(f"only vgat models convert, got {model.kind!r}")
    d = model.config.to_dict()
    d["kind"] = "ua_fmci_vgat"
    d["filter"] = {"limit": cfg.limit, "replacement": cfg.replacement, "rule": cfg.rule,
                   "calibration_samples": int(k)}
    params = {name: Tensor(t.data, requires_grad=True) for name, t in model.params.items()}
    out = Model(ArchConfig.from_dict(d), params, {n: v.copy() for n, v in model.buffers.items()})
    x, graph = sample
    _, filtered = calibrate(out, x, graph, k, rng, cfg)
    out.attention_cache = filtered
    return out


# ---------------------------------------------------------------------------
# export


def attention_to_json(uas) -> list:
    return [u.to_dict() for u in uas]


def _fmt(v: float) -> str:
    return repr(float(v))


def attention_to_dot(uas, name: str = "attention", max_width: float = 5.0) -> str:
    """DOT digraph with one cluster per (layer, partition) and an edge
    ``j -> i`` for every attention entry ``[i, j]`` with nonzero mean or variance."""
    lines = [f"digraph {name} {{"]
    for u in uas:
        tag = f"l{u.layer_index}" + ("" if u.partition is None else f"p{u.partition}")
        label = f"layer {u.layer_index}" + ("" if u.partition is None else f" partition {u.partition}")
        lines.append(f"  subgraph cluster_{tag} {{")
        lines.append(f'    label="{label}";')
        n = u.mean.shape[-1]
        for i in range(n):
            lines.append(f'    {tag}_{i} [label="{i}"];')
        peak = float(np.max(np.abs(u.mean))) or 1.0
        for i, j in zip(*np.nonzero((u.mean != 0) | (u.variance != 0))):
            m, v = u.mean[i, j], u.variance[i, j]
            width = max_width * abs(m) / peak
            lines.append(f'    {tag}_{j} -> {tag}_{i} [attn_mean="{_fmt(m)}", attn_var="{_fmt(v)}", '
                         f'penwidth="{width:.4f}"];')
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
