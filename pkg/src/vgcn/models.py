"""Architecture configs, parameter sets and whole-model forward passes.

A model is a flat ``name -> Tensor`` parameter map plus an
:class:`ArchConfig`.  Variational parameter names mirror their deterministic
twins with a ``.mu`` segment (``layers.0.W`` <-> ``layers.0.mu.W``), which
is what pretrained initialisation relies on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .det_layers import (
    ACTIVATIONS,
    AgcnBlockParams,
    BatchNormState,
    GatLayerParams,
    GcnLayerParams,
    StgcnBlockParams,
    agcn_block_forward,
    gat_forward,
    gcn_forward,
    stgcn_block_forward,
)
from .errors import ConfigError, StateError
from .graph import PartitionedAdjacency, normalize_adjacency
from .rng import RandomStream, as_stream
from .var_layers import (
    VARIANCE_FLOOR,
    VariationalBlock,
    VariationalPair,
    VarianceHead,
    bias_for_variance,
    gaussian_sample,
    vagcn_block_forward,
    vgat_branches,
    vgcn_forward,
    vstgcn_block_forward,
)

SPATIAL_KINDS = ("gcn", "gat", "vgcn", "vgat", "ua_ea_vgat", "ua_fmci_vgat")
TEMPORAL_KINDS = ("stgcn", "agcn", "vstgcn", "vagcn")
VARIATIONAL_KINDS = ("vgcn", "vgat", "ua_ea_vgat", "ua_fmci_vgat", "vstgcn", "vagcn")
ATTENTION_KINDS = ("gat", "vgat", "ua_ea_vgat", "ua_fmci_vgat", "stgcn", "agcn", "vstgcn", "vagcn")
TWIN = {"vgcn": "gcn", "vgat": "gat", "ua_ea_vgat": "gat", "ua_fmci_vgat": "gat",
        "vstgcn": "stgcn", "vagcn": "agcn"}

DEFAULT_FILTER = {"limit": 1.0, "replacement": 0.01, "rule": "as-written", "calibration_samples": 16}


@dataclass
class ArchConfig:
    """Layer kinds, widths and activation placements of one model.

    ``activation`` is the output activation of every spatial layer (and of
    the sampled output for variational ones) and the block activation of
    spatio-temporal models.
    """

    kind: str
    in_channels: int
    widths: list
    n_classes: int
    n_nodes: int | None = None
    activation: str = "relu"
    rho_att: str = "softmax"
    rho_fuse: str = "identity"
    mask_mode: str = "complement"
    rho_mu: str = "identity"
    rho_sigma: str = "identity"
    variance_mode: str = "per-element"
    variance_floor: float = VARIANCE_FLOOR
    init_variance: float = 1e-2
    readout: str = "ego"
    kt: int = 9
    stride: int = 1
    embed: int = 4
    batch_norm: bool = True
    filter: dict | None = None

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        self.validate()

    def validate(self) -> None:
        kinds = SPATIAL_KINDS + TEMPORAL_KINDS
        if self.kind not in kinds:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {kinds}")
        if self.in_channels < 1 or self.n_classes < 1:
            raise ConfigError("in_channels and n_classes must be positive")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be a non-empty list of positive integers, got {self.widths}")
        for name in ("activation", "rho_att", "rho_fuse", "rho_mu", "rho_sigma"):
            if getattr(self, name) not in ACTIVATIONS:
                raise ConfigError(f"{name}={getattr(self, name)!r} is not one of {ACTIVATIONS}")
        if self.mask_mode not in ("complement", "direct"):
            raise ConfigError(f"mask_mode must be complement or direct, got {self.mask_mode!r}")
        if self.variance_mode not in ("per-element", "global-scalar"):
            raise ConfigError(f"variance_mode must be per-element or global-scalar, got {self.variance_mode!r}")
        if self.variance_floor <= 0 or self.init_variance <= 0:
            raise ConfigError("variance floor and initial variance must be positive")
        if self.readout not in ("ego", "mean"):
            raise ConfigError(f"readout must be ego or mean, got {self.readout!r}")
        if self.is_temporal:
            if not self.n_nodes or self.n_nodes < 1:
                raise ConfigError("spatio-temporal models need n_nodes")
            if self.kt % 2 == 0 or self.kt < 1:
                raise ConfigError(f"temporal kernel size must be odd, got {self.kt}")
            if self.stride < 1:
                raise ConfigError("stride must be >= 1")
        if self.kind in ("ua_ea_vgat", "ua_fmci_vgat"):
            merged = dict(DEFAULT_FILTER)
            merged.update(self.filter or {})
            if merged["rule"] not in ("as-written", "consistent"):
                raise ConfigError(f"unknown filter rule {merged['rule']!r}")
            self.filter = merged

    @property
    def is_temporal(self) -> bool:
        return self.kind in TEMPORAL_KINDS

    @property
    def is_variational(self) -> bool:
        return self.kind in VARIATIONAL_KINDS

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class GraphBatch:
    """Binary adjacencies ``(B, N, N)`` of equally sized graphs plus their normalisation."""

    adjacency: np.ndarray
    normalized: np.ndarray = None

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim == 2:
            a = a[None]
        self.adjacency = a
        if self.normalized is None:
            self.normalized = normalize_adjacency(a)

    def __len__(self) -> int:
        return self.adjacency.shape[0]

    def repeat(self, k: int) -> "GraphBatch":
        return GraphBatch(np.repeat(self.adjacency, k, axis=0), np.repeat(self.normalized, k, axis=0))


# ---------------------------------------------------------------------------
# parameter layout


def _glorot(fan_in, fan_out, shape, rng):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, shape)


def parameter_specs(cfg: ArchConfig) -> dict:
    """``name -> (shape, init)`` for every trainable parameter, in creation order.

    ``init`` is ``("glorot", fan_in, fan_out)``, ``("const", value)``,
    ``("eye",)`` or ``("bias", variance)``.
    """
    specs: dict = {}
    var = cfg.is_variational
    per_element = cfg.variance_mode == "per-element"
    branches = ["mu", "sigma"] if (var and per_element) else (["mu"] if var else [""])

    def pre(base, branch):
        return f"{base}.{branch}." if branch else f"{base}."

    c_in = cfg.in_channels
    if not cfg.is_temporal:
        for i, c_out in enumerate(cfg.widths):
            base = f"layers.{i}"
            for br in branches:
                p = pre(base, br)
                specs[p + "W"] = ((c_in, c_out), ("glorot", c_in, c_out))
                if cfg.kind not in ("gcn", "vgcn"):
                    specs[p + "w_s"] = ((c_out,), ("glorot", c_out, 1))
                    specs[p + "w_d"] = ((c_out,), ("glorot", c_out, 1))
            if var:
                specs[f"{base}.var_bias"] = ((), ("bias", cfg.init_variance))
            c_in = c_out
    else:
        n, kt, ce = cfg.n_nodes, cfg.kt, cfg.embed
        for i, c_out in enumerate(cfg.widths):
            base = f"blocks.{i}"
            for br in branches:
                p = pre(base, br)
                for q in range(3):
                    if cfg.kind in ("stgcn", "vstgcn"):
                        specs[f"{p}W.{q}"] = ((c_in, c_out), ("glorot", c_in, c_out))
                        specs[f"{p}M.{q}"] = ((n, n), ("const", 1.0))
                    else:
                        specs[f"{p}W_z.{q}"] = ((c_in, c_out), ("glorot", c_in, c_out))
                        specs[f"{p}W_M.{q}"] = ((n, n), ("const", 0.0))
                        specs[f"{p}W_1.{q}"] = ((c_in, ce), ("glorot", c_in, ce))
                        specs[f"{p}W_2.{q}"] = ((c_in, ce), ("glorot", c_in, ce))
                specs[f"{p}tc"] = ((c_out, c_out, kt), ("glorot", c_out * kt, c_out * kt))
                if cfg.kind in ("agcn", "vagcn"):
                    if c_in != c_out:
                        specs[f"{p}W_match"] = ((c_in, c_out), ("glorot", c_in, c_out))
                    elif br == "sigma":
                        # explicit so the variance branch can be zeroed completely
                        specs[f"{p}W_match"] = ((c_in, c_out), ("eye",))
                    if cfg.batch_norm:
                        specs[f"{p}bn_inner.gamma"] = ((c_out,), ("const", 1.0))
                        specs[f"{p}bn_inner.beta"] = ((c_out,), ("const", 0.0))
            if c_in != c_out:
                specs[f"{base}.W_xi"] = ((c_in, c_out), ("glorot", c_in, c_out))
            if cfg.batch_norm:
                bn = "bn" if cfg.kind in ("stgcn", "vstgcn") else "bn_outer"
                specs[f"{base}.{bn}.gamma"] = ((c_out,), ("const", 1.0))
                specs[f"{base}.{bn}.beta"] = ((c_out,), ("const", 0.0))
            if var:
                specs[f"{base}.spatial_var_bias"] = ((), ("bias", cfg.init_variance))
                specs[f"{base}.temporal_var_bias"] = ((), ("bias", cfg.init_variance))
            c_in = c_out
    specs["head.W"] = ((c_in, cfg.n_classes), ("glorot", c_in, cfg.n_classes))
    specs["head.b"] = ((cfg.n_classes,), ("const", 0.0))
    return specs


def buffer_specs(cfg: ArchConfig) -> dict:
    """Running statistics of every batch norm: ``name -> (shape, initial value)``."""
    out = {}
    if not (cfg.is_temporal and cfg.batch_norm):
        return out
    for name, (shape, _) in parameter_specs(cfg).items():
        if name.endswith(".gamma"):
            stem = name[: -len(".gamma")]
            out[stem + ".running_mean"] = (shape, 0.0)
            out[stem + ".running_var"] = (shape, 1.0)
    return out


def init_parameters(cfg: ArchConfig, seed: int = 0) -> dict:
    rng = RandomStream(seed, (0x1A17,))
    params = {}
    for name, (shape, init) in parameter_specs(cfg).items():
        if init[0] == "glorot":
            arr = _glorot(init[1], init[2], shape, rng)
        elif init[0] == "eye":
            arr = np.eye(*shape)
        elif init[0] == "bias":
            arr = np.full(shape, bias_for_variance(init[1], cfg.variance_floor))
        else:
            arr = np.full(shape, float(init[1]))
        params[name] = Tensor(arr, requires_grad=True)
    return params


def init_buffers(cfg: ArchConfig) -> dict:
    return {name: np.full(shape, value, dtype=np.float64) for name, (shape, value) in buffer_specs(cfg).items()}


# ---------------------------------------------------------------------------
# model


class Model:
    """A configured network with its parameters and batch-norm buffers."""

    def __init__(self, config: ArchConfig, params: dict | None = None, buffers: dict | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed)
        self.buffers = buffers if buffers is not None else init_buffers(config)
        self.training = False
        self.deterministic_eval = False

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def is_variational(self) -> bool:
        return self.config.is_variational

    @property
    def has_attention(self) -> bool:
        return self.kind in ATTENTION_KINDS

    def train(self, mode: bool = True) -> "Model":
        self.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def parameters(self) -> dict:
        return self.params

    def n_layers(self) -> int:
        return len(self.config.widths)

    # -- parameter views -------------------------------------------------

    def _bn(self, stem: str) -> BatchNormState | None:
        if stem + ".gamma" not in self.params:
            return None
        return BatchNormState(self.params[stem + ".gamma"], self.params[stem + ".beta"],
                              self.buffers[stem + ".running_mean"], self.buffers[stem + ".running_var"])

    def _head(self, name: str) -> VarianceHead:
        cfg = self.config
        return VarianceHead(self.params[name], cfg.variance_floor, cfg.rho_sigma, cfg.variance_mode)

    def _spatial_params(self, prefix: str):
        P = self.params
        if prefix + "w_s" in P:
            return GatLayerParams(P[prefix + "W"], P[prefix + "w_s"], P[prefix + "w_d"], self.config.mask_mode)
        return GcnLayerParams(P[prefix + "W"])

    def _pair(self, i: int) -> VariationalPair:
        base = f"layers.{i}."
        sigma = self._spatial_params(base + "sigma.") if base + "sigma.W" in self.params else None
        return VariationalPair(self._spatial_params(base + "mu."), sigma, self._head(base + "var_bias"),
                               rho_mu=self.config.rho_mu, rho_out=self.config.activation)

    def _block_params(self, prefix: str, base: str):
        P = self.params
        get = P.get
        xi = get(base + "W_xi")
        if self.kind in ("stgcn", "vstgcn"):
            bn = self._bn(base + "bn")
            return StgcnBlockParams([P[f"{prefix}W.{q}"] for q in range(3)],
                                    [P[f"{prefix}M.{q}"] for q in range(3)],
                                    P[prefix + "tc"], bn, xi, self.config.stride)
        return AgcnBlockParams([P[f"{prefix}W_z.{q}"] for q in range(3)],
                               [P[f"{prefix}W_M.{q}"] for q in range(3)],
                               [P[f"{prefix}W_1.{q}"] for q in range(3)],
                               [P[f"{prefix}W_2.{q}"] for q in range(3)],
                               P[prefix + "tc"], self._bn(prefix + "bn_inner"), self._bn(base + "bn_outer"),
                               get(prefix + "W_match"), xi, self.config.stride)

    def _variational_block(self, i: int) -> VariationalBlock:
        base = f"blocks.{i}."
        mu = self._block_params(base + "mu.", base)
        sigma = self._block_params(base + "sigma.", base) if base + "sigma.tc" in self.params else None
        return VariationalBlock(mu, sigma, self._head(base + "spatial_var_bias"),
                                self._head(base + "temporal_var_bias"), self.config.rho_mu)

    # -- forward ------------------------------------------------------------

    def forward(self, x, graph, rng=None, *, attention=None, collect: bool = False,
                deterministic: bool | None = None):
        """One stochastic pass over a batch.

        Spatial models take ``x`` of shape ``(B, N, C)`` and a
        :class:`GraphBatch`; spatio-temporal ones take ``(B, C, T, N)`` and a
        :class:`PartitionedAdjacency`.  ``attention`` is a per-layer list of
        ``(mean, variance)`` filtered attentions for the uncertainty-aware
        variants.  With ``collect=True`` returns ``(logits, records)``.
        """
        if deterministic is None:
            deterministic = self.deterministic_eval and not self.training
        if self.is_variational and not deterministic:
            rng = as_stream(rng)
        x = ad.as_tensor(x)
        records: list = []
        if self.config.is_temporal:
            h = self._forward_temporal(x, graph, rng, records, deterministic)
            pooled = ad.mean(h, axis=(2, 3))
        else:
            if not isinstance(graph, GraphBatch):
                graph = GraphBatch(graph)
            if x.ndim == 2:
                x = ad.reshape(x, (1,) + x.shape)
            h = self._forward_spatial(x, graph, rng, records, attention, deterministic)
            pooled = ad.select(h, 0, axis=-2) if self.config.readout == "ego" else ad.mean(h, axis=-2)
        logits = ad.add(ad.matmul(pooled, self.params["head.W"]), self.params["head.b"])
        return (logits, records) if collect else logits

    __call__ = forward

    def _forward_spatial(self, h, graph: GraphBatch, rng, records, attention, deterministic):
        cfg = self.config
        kind = cfg.kind
        for i in range(self.n_layers()):
            if kind == "gcn":
                h = gcn_forward(h, graph.normalized, GcnLayerParams(self.params[f"layers.{i}.W"]), cfg.activation)
            elif kind == "gat":
                h, lam = gat_forward(h, graph.adjacency, self._spatial_params(f"layers.{i}."),
                                     cfg.rho_fuse, cfg.rho_att, cfg.activation)
                records.append(_record(i, None, lam, None))
            elif kind == "vgcn":
                h = vgcn_forward(h, graph.normalized, self._pair(i), rng, deterministic)
            elif kind in ("vgat", "ua_fmci_vgat"):
                override = None
                if kind == "ua_fmci_vgat":
                    if attention is None and not self.training:
                        raise StateError("UA-FMCI forward needs filtered attentions (run calibration first)")
                    if attention is not None:
                        override = attention[i]  # None: use the layer's own attention
                vp = self._pair(i)
                mean, var, lam_mu, lam_sigma = vgat_branches(h, graph.adjacency, vp, cfg.rho_fuse,
                                                             cfg.rho_att, override)
                h = _act(vp.rho_out)(gaussian_sample(mean, var, rng, deterministic))
                records.append(_record(i, None, lam_mu, lam_sigma))
            elif kind == "ua_ea_vgat":
                h, lam_mu, lam_sigma = self._ea_layer(i, h, graph, rng, attention, deterministic)
                records.append(_record(i, None, lam_mu, lam_sigma))
        return h

    def _ea_layer(self, i, h, graph, rng, attention, deterministic):
        from .uncertainty import FilterConfig, ua_ea_forward

        cfg = self.config
        if attention is None and not self.training:
            raise StateError("UA-EA forward needs cached filtered attention (run calibration first)")
        # a None entry means: filter this layer's own attention in-graph
        cached = None if attention is None or attention[i] is None else attention[i][0]
        return ua_ea_forward(h, graph.adjacency, self._pair(i), cached, rng, rho=cfg.rho_fuse,
                             rho_att=cfg.rho_att, deterministic=deterministic,
                             in_graph_filter=FilterConfig.from_dict(cfg.filter), return_attention=True)

    def _forward_temporal(self, h, parts: PartitionedAdjacency, rng, records, deterministic):
        cfg = self.config
        for i in range(self.n_layers()):
            base = f"blocks.{i}."
            if cfg.kind == "stgcn":
                params = self._block_params(base, base)
                h = stgcn_block_forward(h, parts, params, cfg.activation, self.training)
                for q, m in enumerate(params.M):
                    records.append(_record(i, q, m, None, static=True))
            elif cfg.kind == "agcn":
                h, atts = agcn_block_forward(h, parts, self._block_params(base, base), cfg.activation,
                                             self.training)
                for q, a in enumerate(atts):
                    records.append(_record(i, q, a, None))
            elif cfg.kind == "vstgcn":
                block = self._variational_block(i)
                h = vstgcn_block_forward(h, parts, block, rng, cfg.activation, self.training, deterministic)
                for q in range(3):
                    sig = None
                    if block.sigma is not None:
                        sig = block.spatial_head(block.sigma.M[q])
                    records.append(_record(i, q, block.mu.M[q], sig, static=True))
            else:
                h, att_mu, att_sigma = vagcn_block_forward(h, parts, self._variational_block(i), rng,
                                                           cfg.activation, self.training, deterministic)
                for q, a in enumerate(att_mu):
                    records.append(_record(i, q, a, att_sigma[q] if att_sigma else None))
        return h

    # -- convenience ----------------------------------------------------------

    def copy(self) -> "Model":
        params = {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return Model(ArchConfig.from_dict(self.config.to_dict()), params, buffers)


def _act(name):
    from .det_layers import activation

    return activation(name)


def _record(layer, partition, mu, sigma, static: bool = False) -> dict:
    return {"layer": layer, "partition": partition,
            "mu": np.asarray(mu.data if isinstance(mu, Tensor) else mu),
            "sigma": None if sigma is None else np.asarray(sigma.data if isinstance(sigma, Tensor) else sigma),
            "static": static}


def model_forward(config: ArchConfig, S, graph, params: dict | None = None, rng=None, seed: int = 0):
    """Build (or reuse ``params`` for) a model from ``config`` and return its logits."""
    if isinstance(config, dict):
        config = ArchConfig.from_dict(config)
    model = Model(config, params, seed=seed)
    return model.forward(S, graph, rng)


def check_widths(config: ArchConfig, params: dict) -> None:
    """Raise :class:`ConfigError` when consecutive layer widths do not chain."""
    specs = parameter_specs(config)
    for name, (shape, _) in specs.items():
        if name in params and tuple(params[name].shape) != tuple(shape):
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, architecture needs {shape}")
