"""Variational graph layers.

Each variational layer runs two structurally identical sub-layers, one
producing a Gaussian mean and one a variance, and emits a reparametrised
sample ``mean + sqrt(var) * eps``.  The variance head is
``softplus(pre + bias) + floor`` so the variance is always positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .det_layers import (
    AgcnBlockParams,
    BatchNormState,
    GatLayerParams,
    GcnLayerParams,
    StgcnBlockParams,
    _as_batched,
    _check_parts,
    _unbatch,
    activation,
    agcn_spatial,
    apply_bn,
    attention_mask,
    gat_attention,
    skip_transform,
    stgcn_spatial,
)
from .errors import ConfigError, ContractError, ShapeError
from .graph import PartitionedAdjacency

VARIANCE_FLOOR = 1e-10


@dataclass
class VarianceHead:
    """Maps a pre-activation to a strictly positive variance.

    In ``global-scalar`` mode the sub-layer output is ignored and ``bias``
    alone (one learnable scalar) sets the variance everywhere.
    """

    bias: Tensor
    floor: float = VARIANCE_FLOOR
    rho_sigma: str = "identity"
    mode: str = "per-element"

    def __post_init__(self):
        if self.mode not in ("per-element", "global-scalar"):
            raise ConfigError(f"unknown variance mode {self.mode!r}")
        if self.floor <= 0:
            raise ConfigError("variance floor must be positive")

    def __call__(self, pre: Tensor | None, shape=None) -> Tensor:
        if self.mode == "global-scalar" or pre is None:
            v = ad.add_scalar(ad.softplus(self.bias), self.floor)
            target = shape if shape is not None else pre.shape
            return ad.mul(Tensor(np.ones(target), copy=False), ad.reshape(v, ()))
        pre = activation(self.rho_sigma)(pre)
        return ad.add_scalar(ad.softplus(ad.add(pre, ad.reshape(self.bias, ()))), self.floor)


def bias_for_variance(variance: float, floor: float = VARIANCE_FLOOR) -> float:
    """Bias that makes ``softplus(bias) + floor == variance`` for a zero pre-activation."""
    target = variance - floor
    if target <= 0:
        # at (or under) the floor: push softplus far into its tail
        target = floor * 1e-6
    return float(np.log(np.expm1(target))) if target < 30 else float(target)


@dataclass
class VariationalPair:
    mu: object
    sigma: object | None
    head: VarianceHead
    rho_mu: str = "identity"
    rho_out: str = "identity"


def gaussian_sample(mean, variance, rng, deterministic: bool = False) -> Tensor:
    """Reparametrised draw ``mean + sqrt(variance) * eps`` with ``eps ~ N(0, I)``.

    ``eps`` is a constant of the graph, so gradients reach both ``mean`` and
    ``variance``.  ``deterministic=True`` returns the mean (debugging only).
    """
    mean, variance = as_tensor(mean), as_tensor(variance)
    if mean.shape != variance.shape:
        raise ShapeError(f"mean {mean.shape} and variance {variance.shape} differ")
    if np.any(variance.data <= 0):
        raise ContractError("gaussian_sample needs strictly positive variance")
    if deterministic:
        return mean
    eps = Tensor(rng.normal(mean.shape), copy=False)
    return ad.add(mean, ad.mul(ad.sqrt(variance), eps))


def _spatial_batched(S):
    S = as_tensor(S)
    if S.ndim == 2:
        return ad.reshape(S, (1,) + S.shape), True
    return S, False


# ---------------------------------------------------------------------------
# spatial


def vgcn_forward(S, A_hat, vp: VariationalPair, rng, deterministic: bool = False) -> Tensor:
    """Variational GCN layer: sample from N(rho_mu(A S W_mu), VarHead(A S W_sigma))."""
    S = as_tensor(S)
    A_hat = as_tensor(A_hat)
    agg = ad.matmul(A_hat, S)
    mean = activation(vp.rho_mu)(ad.matmul(agg, vp.mu.W))
    pre = None if vp.sigma is None else ad.matmul(agg, vp.sigma.W)
    var = vp.head(pre, mean.shape)
    return activation(vp.rho_out)(gaussian_sample(mean, var, rng, deterministic))


def vgat_branches(S, A, vp: VariationalPair, rho: str = "identity", rho_att: str = "softmax",
                  attention=None):
    """Mean and variance parameters of a VGAT layer plus both attention matrices.

    ``attention`` optionally replaces the computed ``(Lambda_mu, Lambda_sigma)``
    (used by the FMCI variant).  Returns ``(mean, var, lam_mu, lam_sigma)``.
    """
    S = as_tensor(S)
    mask = attention_mask(A, vp.mu.mask_mode)
    s_mu = ad.matmul(S, vp.mu.W)
    lam_mu = gat_attention(s_mu, vp.mu.w_s, vp.mu.w_d, mask, rho_att)
    use_mu = lam_mu if attention is None else as_tensor(attention[0])
    mean = activation(vp.rho_mu)(ad.matmul(activation(rho)(use_mu), s_mu))
    lam_sigma = None
    if vp.sigma is None:
        var = vp.head(None, mean.shape)
    else:
        s_sigma = ad.matmul(S, vp.sigma.W)
        lam_sigma = gat_attention(s_sigma, vp.sigma.w_s, vp.sigma.w_d, mask, rho_att)
        use_sigma = lam_sigma if attention is None else as_tensor(attention[1])
        var = vp.head(ad.matmul(activation(rho)(use_sigma), s_sigma))
    return mean, var, lam_mu, lam_sigma


def vgat_forward(S, A, vp: VariationalPair, rng, rho: str = "identity", rho_att: str = "softmax",
                 deterministic: bool = False):
    """Variational GAT layer.  Returns ``(output, Lambda_mu, Lambda_sigma)``."""
    mean, var, lam_mu, lam_sigma = vgat_branches(S, A, vp, rho, rho_att)
    out = activation(vp.rho_out)(gaussian_sample(mean, var, rng, deterministic))
    return out, lam_mu, lam_sigma


# ---------------------------------------------------------------------------
# spatio-temporal


@dataclass
class VariationalBlock:
    """Mean/variance parameter sets of a VSTGCN or VAGCN block.

    ``mu`` and ``sigma`` are :class:`StgcnBlockParams` or
    :class:`AgcnBlockParams`; the residual map, stride and output batch
    norm are read from ``mu``.  ``spatial_head`` and ``temporal_head`` are the
    variance heads of the two sampling sites.
    """

    mu: object
    sigma: object | None
    spatial_head: VarianceHead
    temporal_head: VarianceHead
    rho_mu: str = "identity"


def _temporal_sample(x: Tensor, block: VariationalBlock, rng, deterministic: bool) -> Tensor:
    mean = ad.temporal_conv(x, block.mu.tc_kernel, block.mu.stride)
    pre = None if block.sigma is None else ad.temporal_conv(x, block.sigma.tc_kernel, block.mu.stride)
    var = block.temporal_head(pre, mean.shape)
    return gaussian_sample(mean, var, rng, deterministic)


def vstgcn_block_forward(S, parts: PartitionedAdjacency, block: VariationalBlock, rng,
                         rho: str = "relu", training: bool = False,
                         deterministic: bool = False) -> Tensor:
    """Variational ST-GCN block with a spatial and a temporal sampling site."""
    S, squeeze = _as_batched(S)
    _check_parts(parts, S.shape[-1])
    mu = block.mu
    g_mu = activation(block.rho_mu)(stgcn_spatial(S, parts, mu.W, mu.M))
    g_pre = None if block.sigma is None else stgcn_spatial(S, parts, block.sigma.W, block.sigma.M)
    spatial = gaussian_sample(g_mu, block.spatial_head(g_pre, g_mu.shape), rng, deterministic)
    temporal = _temporal_sample(spatial, block, rng, deterministic)
    res = skip_transform(S, mu.W_xi, temporal.shape[1], mu.stride)
    out = activation(rho)(ad.add(res, apply_bn(temporal, mu.bn, training)))
    return _unbatch(out, squeeze)


def vagcn_block_forward(S, parts: PartitionedAdjacency, block: VariationalBlock, rng,
                        rho: str = "relu", training: bool = False, deterministic: bool = False):
    """Variational AGCN block.

    Returns ``(output, att_mu, att_sigma)`` where each attention list holds
    the per-partition final matrices ``A_hat_p + M_p`` of that branch
    (``att_sigma`` is empty in global-variance mode).
    """
    S, squeeze = _as_batched(S)
    _check_parts(parts, S.shape[-1])
    mu, sigma = block.mu, block.sigma
    g_mu, att_mu = agcn_spatial(S, parts, mu.W_z, mu.W_M, mu.W_1, mu.W_2, mu.bn_inner,
                                mu.W_match, training)
    g_mu = activation(block.rho_mu)(g_mu)
    att_sigma = []
    g_pre = None
    if sigma is not None:
        g_pre, att_sigma = agcn_spatial(S, parts, sigma.W_z, sigma.W_M, sigma.W_1, sigma.W_2,
                                        sigma.bn_inner, sigma.W_match, training)
    spatial = gaussian_sample(g_mu, block.spatial_head(g_pre, g_mu.shape), rng, deterministic)
    temporal = _temporal_sample(spatial, block, rng, deterministic)
    res = skip_transform(S, mu.W_xi, temporal.shape[1], mu.stride)
    out = activation(rho)(ad.add(res, apply_bn(temporal, mu.bn_outer, training)))
    if squeeze:
        att_mu = [ad.reshape(a, a.shape[1:]) for a in att_mu]
        att_sigma = [ad.reshape(a, a.shape[1:]) for a in att_sigma]
    return _unbatch(out, squeeze), att_mu, att_sigma
