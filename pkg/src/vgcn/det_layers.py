"""Deterministic graph layers: GCN, GAT, ST-GCN and AGCN blocks.

Spatial layers take node features ``S`` shaped ``(N, C)`` or ``(B, N, C)``.
Spatio-temporal blocks take ``(C, T, N)`` or ``(B, C, T, N)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ConfigError, ShapeError
from .graph import PartitionedAdjacency

ACTIVATIONS = ("identity", "relu", "tanh", "softplus", "sigmoid", "exp", "softmax")


def activation(name: str):
    if name == "softmax":
        return lambda x: ad.softmax_axis(x, -1)
    if name in ("identity", "none", None):
        return ad.identity
    fn = {"relu": ad.relu, "tanh": ad.tanh, "softplus": ad.softplus,
          "sigmoid": ad.sigmoid, "exp": ad.exp}.get(name)
    if fn is None:
        raise ConfigError(f"unknown activation {name!r}")
    return fn


@dataclass
class GcnLayerParams:
    W: Tensor


@dataclass
class GatLayerParams:
    W: Tensor
    w_s: Tensor
    w_d: Tensor
    mask_mode: str = "complement"

    def __post_init__(self):
        c_out = self.W.shape[-1]
        if self.w_s.shape != (c_out,) or self.w_d.shape != (c_out,):
            raise ShapeError(f"attention vectors must have length {c_out}, got {self.w_s.shape}, {self.w_d.shape}")
        if self.mask_mode not in ("complement", "direct"):
            raise ConfigError(f"mask_mode must be 'complement' or 'direct', got {self.mask_mode!r}")


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(Tensor(np.ones(channels)), Tensor(np.zeros(channels)),
                   np.zeros(channels), np.ones(channels))


def apply_bn(x: Tensor, bn: BatchNormState | None, training: bool) -> Tensor:
    """Batch-normalise over all axes but the channel axis; ``bn=None`` is identity."""
    if bn is None:
        return x
    if training:
        y, mu, var = ad.batch_norm(x, bn.gamma, bn.beta, bn.eps)
        m = x.size // x.shape[1]
        unbiased = var * m / max(m - 1, 1)
        bn.running_mean[...] = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu
        bn.running_var[...] = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased
        return y
    inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
    scale = ad.mul(bn.gamma, Tensor(inv, copy=False))
    shift = ad.sub(bn.beta, ad.mul(bn.gamma, Tensor(bn.running_mean * inv, copy=False)))
    return ad.channel_affine(x, scale, shift)


@dataclass
class StgcnBlockParams:
    W: list
    M: list
    tc_kernel: Tensor
    bn: BatchNormState | None = None
    W_xi: Tensor | None = None
    stride: int = 1


@dataclass
class AgcnBlockParams:
    W_z: list
    W_M: list
    W_1: list
    W_2: list
    tc_kernel: Tensor
    bn_inner: BatchNormState | None = None
    bn_outer: BatchNormState | None = None
    W_match: Tensor | None = None
    W_xi: Tensor | None = None
    stride: int = 1


# ---------------------------------------------------------------------------
# spatial layers


def gcn_forward(S, A_hat, params: GcnLayerParams, rho: str = "relu") -> Tensor:
    """``rho(A_hat S W)``."""
    S = as_tensor(S)
    A_hat = as_tensor(A_hat)
    if A_hat.shape[-1] != S.shape[-2]:
        raise ShapeError(f"adjacency {A_hat.shape} does not match features {S.shape}")
    return activation(rho)(ad.matmul(ad.matmul(A_hat, S), params.W))


def attention_mask(A, mask_mode: str) -> np.ndarray:
    A = np.asarray(A.data if isinstance(A, Tensor) else A, dtype=np.float64)
    return 1.0 - A if mask_mode == "complement" else A


def gat_attention(S_hat: Tensor, w_s: Tensor, w_d: Tensor, mask: np.ndarray,
                  rho_att: str = "softmax") -> Tensor:
    """Masked attention from transformed features: ``rho_att(l_s l_d^T) * mask``."""
    c = S_hat.shape[-1]
    t = ad.tanh(S_hat)
    l_s = ad.matmul(t, ad.reshape(w_s, (c, 1)))
    l_d = ad.matmul(t, ad.reshape(w_d, (c, 1)))
    scores = ad.matmul(l_s, ad.swap_last(l_d))
    return ad.mul(activation(rho_att)(scores), Tensor(mask, copy=False))


def gat_forward(S, A, params: GatLayerParams, rho: str = "identity", rho_att: str = "softmax",
                out_act: str = "identity"):
    """Graph attention layer.  Returns ``(output, attention)``.

    With the default ``complement`` mask the attention survives only where
    ``A`` is zero (non-edges and the diagonal), which is the formula taken
    literally; ``direct`` keeps it on the edges instead.
    """
    S = as_tensor(S)
    if np.shape(A)[-1] != S.shape[-2]:
        raise ShapeError(f"adjacency {np.shape(A)} does not match features {S.shape}")
    S_hat = ad.matmul(S, params.W)
    lam = gat_attention(S_hat, params.w_s, params.w_d, attention_mask(A, params.mask_mode), rho_att)
    out = ad.matmul(activation(rho)(lam), S_hat)
    return activation(out_act)(out), lam


# ---------------------------------------------------------------------------
# spatio-temporal helpers (layout (B, C, T, N))


def channel_mix(x: Tensor, W) -> Tensor:
    """Apply a ``C_in x C_out`` matrix along the channel axis of ``(B, C, T, N)``."""
    W = as_tensor(W)
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"channel mix: input has {x.shape[1]} channels, matrix is {W.shape}")
    y = ad.matmul(ad.transpose(x, (0, 2, 3, 1)), W)
    return ad.transpose(y, (0, 3, 1, 2))


def node_mix(x: Tensor, M) -> Tensor:
    """``out[..., i] = sum_j M[i, j] x[..., j]`` on ``(B, C, T, N)``; ``M`` may be batched."""
    M = as_tensor(M)
    if M.ndim == 2:
        return ad.matmul(x, ad.swap_last(M))
    b, c, t, n = x.shape
    y = ad.matmul(ad.reshape(x, (b, c * t, n)), ad.swap_last(M))
    return ad.reshape(y, (b, c, t, n))


def _as_batched(S):
    S = as_tensor(S)
    if S.ndim == 3:
        return ad.reshape(S, (1,) + S.shape), True
    if S.ndim != 4:
        raise ShapeError(f"spatio-temporal input must be (C,T,N) or (B,C,T,N), got {S.shape}")
    return S, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return ad.reshape(x, x.shape[1:]) if squeeze else x


def skip_transform(S, W_xi, c_out: int, stride: int = 1) -> Tensor:
    """Residual path: identity when channel counts agree, else a channel map.

    ``S`` is ``(B, C, T, N)``; with ``stride > 1`` every ``stride``-th frame
    is kept so the residual lines up with the strided temporal convolution.
    """
    S, squeeze = _as_batched(S)
    c_in = S.shape[1]
    if c_in == c_out:
        out = S
    else:
        if W_xi is None:
            raise ConfigError(f"skip transform needs W_xi to map {c_in} channels to {c_out}")
        if tuple(as_tensor(W_xi).shape) != (c_in, c_out):
            raise ShapeError(f"W_xi must be ({c_in}, {c_out}), got {as_tensor(W_xi).shape}")
        out = channel_mix(S, W_xi)
    if stride > 1:
        out = ad.slice_axis(out, 2, step=stride)
    return _unbatch(out, squeeze)


def _check_parts(parts: PartitionedAdjacency, n: int):
    if len(parts.normalized) != 3:
        raise ConfigError(f"expected 3 adjacency partitions, got {len(parts.normalized)}")
    if parts.n_nodes != n:
        raise ShapeError(f"partitions have {parts.n_nodes} nodes, input has {n}")


def stgcn_spatial(S: Tensor, parts: PartitionedAdjacency, W: list, M: list) -> Tensor:
    """``sum_p (A_hat_p * M_p) S W_p`` frame by frame."""
    out = None
    for a_hat, m, w in zip(parts.normalized, M, W):
        fused = ad.mul(Tensor(a_hat, copy=False), m)
        term = channel_mix(node_mix(S, fused), w)
        out = term if out is None else ad.add(out, term)
    return out


def stgcn_block_forward(S, parts: PartitionedAdjacency, params: StgcnBlockParams,
                        rho: str = "relu", training: bool = False) -> Tensor:
    S, squeeze = _as_batched(S)
    _check_parts(parts, S.shape[-1])
    if len(params.W) != 3 or len(params.M) != 3:
        raise ConfigError("an ST-GCN block needs exactly 3 weight and attention matrices")
    g = stgcn_spatial(S, parts, params.W, params.M)
    c_out = g.shape[1]
    tc = ad.temporal_conv(g, params.tc_kernel, params.stride)
    res = skip_transform(S, params.W_xi, c_out, params.stride)
    out = activation(rho)(ad.add(res, apply_bn(tc, params.bn, training)))
    return _unbatch(out, squeeze)


def agcn_attention(S: Tensor, W_1, W_2, W_M) -> tuple[Tensor, Tensor]:
    """Data-dependent attention ``B = softmax(B_1 B_2) / N`` and ``M = W_M + B``.

    The softmax runs over the last axis, so each receiving node's weights
    over its sources sum to ``1/N``.
    """
    W_1, W_2 = as_tensor(W_1), as_tensor(W_2)
    if W_1.shape[-1] != W_2.shape[-1]:
        raise ConfigError(f"embedding widths differ: {W_1.shape} vs {W_2.shape}")
    b, _, t, n = S.shape
    ce = W_1.shape[-1]
    b1 = ad.reshape(ad.transpose(channel_mix(S, W_1), (0, 3, 1, 2)), (b, n, ce * t))
    b2 = ad.reshape(channel_mix(S, W_2), (b, ce * t, n))
    B = ad.scale(ad.softmax_axis(ad.matmul(b1, b2), -1), 1.0 / n)
    return B, ad.add(W_M, B)


def agcn_spatial(S: Tensor, parts: PartitionedAdjacency, W_z, W_M, W_1, W_2,
                 bn_inner, W_match, training: bool):
    """Inner AGCN graph convolution.  Returns ``(G, [A_hat_p + M_p])``."""
    attentions = []
    z_sum = None
    for p, a_hat in enumerate(parts.normalized):
        _, M = agcn_attention(S, W_1[p], W_2[p], W_M[p])
        att = ad.add(Tensor(a_hat, copy=False), M)
        attentions.append(att)
        z = channel_mix(node_mix(S, att), W_z[p])
        z_sum = z if z_sum is None else ad.add(z_sum, z)
    c_out = z_sum.shape[1]
    if W_match is not None:
        inner = channel_mix(S, W_match)
    elif S.shape[1] == c_out:
        inner = S
    else:
        raise ConfigError(f"AGCN inner residual needs a channel-match matrix for {S.shape[1]} -> {c_out}")
    return ad.add(inner, apply_bn(z_sum, bn_inner, training)), attentions


def agcn_block_forward(S, parts: PartitionedAdjacency, params: AgcnBlockParams,
                       rho: str = "relu", training: bool = False):
    """Adaptive GCN block.  Returns ``(output, [A_hat_p + M_p for p in 1..3])``."""
    S, squeeze = _as_batched(S)
    _check_parts(parts, S.shape[-1])
    if not (len(params.W_z) == len(params.W_M) == len(params.W_1) == len(params.W_2) == 3):
        raise ConfigError("an AGCN block needs exactly 3 partitions of parameters")
    g, attentions = agcn_spatial(S, parts, params.W_z, params.W_M, params.W_1, params.W_2,
                                 params.bn_inner, params.W_match, training)
    c_out = g.shape[1]
    tc = ad.temporal_conv(g, params.tc_kernel, params.stride)
    res = skip_transform(S, params.W_xi, c_out, params.stride)
    out = activation(rho)(ad.add(res, apply_bn(tc, params.bn_outer, training)))
    if squeeze:
        attentions = [ad.reshape(a, a.shape[1:]) for a in attentions]
    return _unbatch(out, squeeze), attentions
