"""Random layer parameters shared by the layer, gradient and limit tests."""

import numpy as np

from vgcn.autodiff import Tensor
from vgcn.det_layers import AgcnBlockParams, BatchNormState, GatLayerParams, GcnLayerParams, StgcnBlockParams
from vgcn.var_layers import VARIANCE_FLOOR, VarianceHead, VariationalBlock, VariationalPair, bias_for_variance


def t(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def gcn_params(g, c_in, c_out):
    return GcnLayerParams(t(g.normal(size=(c_in, c_out)) * 0.6))


def gat_params(g, c_in, c_out, mask_mode="direct"):
    return GatLayerParams(t(g.normal(size=(c_in, c_out)) * 0.6), t(g.normal(size=c_out)),
                          t(g.normal(size=c_out)), mask_mode)


def bn_state(g, c):
    bn = BatchNormState.create(c)
    bn.gamma = t(g.uniform(0.5, 1.5, size=c))
    bn.beta = t(g.normal(size=c) * 0.1)
    bn.running_mean[:] = g.normal(size=c) * 0.1
    bn.running_var[:] = g.uniform(0.5, 2.0, size=c)
    return bn


def stgcn_params(g, c_in, c_out, n, kt=3, stride=1, bn=True):
    return StgcnBlockParams([t(g.normal(size=(c_in, c_out)) * 0.5) for _ in range(3)],
                            [t(g.uniform(0.5, 1.5, size=(n, n))) for _ in range(3)],
                            t(g.normal(size=(c_out, c_out, kt)) * 0.3),
                            bn_state(g, c_out) if bn else None,
                            t(g.normal(size=(c_in, c_out)) * 0.5) if c_in != c_out else None, stride)


def agcn_params(g, c_in, c_out, n, kt=3, stride=1, embed=2, bn=True):
    return AgcnBlockParams([t(g.normal(size=(c_in, c_out)) * 0.5) for _ in range(3)],
                           [t(g.normal(size=(n, n)) * 0.1) for _ in range(3)],
                           [t(g.normal(size=(c_in, embed)) * 0.5) for _ in range(3)],
                           [t(g.normal(size=(c_in, embed)) * 0.5) for _ in range(3)],
                           t(g.normal(size=(c_out, c_out, kt)) * 0.3),
                           bn_state(g, c_out) if bn else None, bn_state(g, c_out) if bn else None,
                           t(g.normal(size=(c_in, c_out)) * 0.5) if c_in != c_out else None,
                           t(g.normal(size=(c_in, c_out)) * 0.5) if c_in != c_out else None, stride)


def _zeros_like(params):
    """Copy of a parameter set with every weight zeroed and batch norm removed."""
    fields = {}
    for name, value in vars(params).items():
        if isinstance(value, Tensor):
            fields[name] = t(np.zeros(value.shape))
        elif isinstance(value, list):
            fields[name] = [t(np.zeros(v.shape)) for v in value]
        elif isinstance(value, BatchNormState):
            fields[name] = None
        else:
            fields[name] = value
    return type(params)(**fields)


def head(variance=VARIANCE_FLOOR, floor=VARIANCE_FLOOR, rho_sigma="identity"):
    return VarianceHead(t(bias_for_variance(variance, floor)), floor, rho_sigma)


def floor_pair(det_params, rho_out="relu", sigma=None, variance=VARIANCE_FLOOR):
    """Variational pair whose mean branch is ``det_params`` and whose variance sits at ``variance``."""
    sigma = _zeros_like(det_params) if sigma is None else sigma
    return VariationalPair(det_params, sigma, head(variance), rho_out=rho_out)


def random_pair(g, det_params, rho_out="tanh", variance=0.05):
    """Variational pair with a live (random) variance branch."""
    sigma = _zeros_like(det_params)
    for name, value in vars(sigma).items():
        if isinstance(value, Tensor):
            setattr(sigma, name, t(g.normal(size=value.shape) * 0.3))
    return VariationalPair(det_params, sigma, head(variance), rho_out=rho_out)


def floor_block(det_params, variance=VARIANCE_FLOOR):
    sigma = _zeros_like(det_params)
    if isinstance(det_params, AgcnBlockParams) and sigma.W_match is None:
        c_in, c_out = det_params.W_z[0].shape
        sigma.W_match = t(np.zeros((c_in, c_out))) if c_in != c_out else None
    return VariationalBlock(det_params, sigma, head(variance), head(variance))


def random_block(g, det_params, variance=0.05):
    block = floor_block(det_params, variance)
    sigma = block.sigma
    for name, value in vars(sigma).items():
        if isinstance(value, Tensor):
            setattr(sigma, name, t(g.normal(size=value.shape) * 0.3))
        elif isinstance(value, list):
            setattr(sigma, name, [t(g.normal(size=v.shape) * 0.3) for v in value])
    return block
