import json
import math

import numpy as np
import pydot
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vgcn.autodiff import Tensor
from vgcn.data import gen_ego_task, gen_skeleton_task
from vgcn.errors import ConfigError, StateError, UnsupportedModelError
from vgcn.models import ArchConfig, GraphBatch, Model
from vgcn.rng import RandomStream
from vgcn.uncertainty import (
    FilterConfig,
    UncertainAttention,
    attention_moments,
    attention_to_dot,
    attention_to_json,
    calibrate,
    convert_vgat_to_fmci,
    filter_arrays,
    filter_attention,
    filter_attention_tensor,
    mc_attention,
    mc_predict,
    ua_ea_forward,
    ua_fmci_forward,
)
from vgcn.var_layers import gaussian_sample, vgat_branches, vgat_forward

import builders as B
from conftest import random_graph


def ego_batch(n, seed=0, nodes=6):
    ds = gen_ego_task(n, (nodes, nodes), seed=seed)
    x = np.stack([s.features for s in ds.samples])
    graph = GraphBatch(np.stack([s.graph.adjacency for s in ds.samples]))
    return x, graph, ds.labels


def spatial_model(kind, seed=0, **kw):
    cfg = dict(kind=kind, in_channels=4, widths=[6, 6], n_classes=2, mask_mode="direct")
    cfg.update(kw)
    return Model(ArchConfig(**cfg), seed=seed).eval()


# ---------------------------------------------------------------------------
# filtering

def test_filter_worked_example():
    ua = UncertainAttention(0, None, [[1.0]], [[0.5]], 8)
    mean, var = filter_attention(ua, FilterConfig(0.4, 0.01))
    np.testing.assert_array_equal(mean, [[0.01]])
    np.testing.assert_array_equal(var, [[0.0]])


def test_filter_consistent_rule_keys_both_on_first_condition():
    mean, var = filter_arrays([[1.0, 0.2]], [[0.3, 0.5]], FilterConfig(0.4, 0.01, "consistent"))
    np.testing.assert_array_equal(mean, [[1.0, 0.01]])
    np.testing.assert_array_equal(var, [[0.3, 0.0]])


nonneg = arrays(np.float64, (3, 3), elements=st.floats(0, 2, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(nonneg, nonneg)
def test_infinite_limit_keeps_everything(mean, var):
    m, v = filter_arrays(mean, var, FilterConfig(math.inf, 0.5))
    np.testing.assert_array_equal(m, mean)
    np.testing.assert_array_equal(v, var)


@settings(max_examples=60, deadline=None)
@given(nonneg, nonneg)
def test_zero_limit_zero_replacement(mean, var):
    m, _ = filter_arrays(mean, var, FilterConfig(0.0, 0.0))
    np.testing.assert_array_equal(m, np.where(var > 0, 0.0, mean))


@settings(max_examples=40, deadline=None)
@given(nonneg, nonneg, st.floats(0, 5), st.sampled_from(["as-written", "consistent"]))
def test_filter_output_is_kept_or_replaced(mean, var, limit, rule):
    m, v = filter_arrays(mean, var, FilterConfig(limit, 0.25, rule))
    assert np.all((m == mean) | (m == 0.25))
    assert np.all((v == var) | (v == 0.0))


@pytest.mark.parametrize("kwargs", [{"limit": -1.0}, {"replacement": -0.1}, {"rule": "typo"},
                                    {"limit": float("nan")}])
def test_filter_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        FilterConfig(**kwargs)


def test_in_graph_filter_matches_array_filter_and_blocks_mask_gradient():
    g = np.random.default_rng(0)
    mu, sigma = g.uniform(0, 1, (4, 4)), g.uniform(0, 1, (4, 4))
    cfg = FilterConfig(0.8, 0.05)
    out = filter_attention_tensor(Tensor(mu), Tensor(sigma), cfg).data
    np.testing.assert_array_equal(out, filter_arrays(mu, sigma, cfg)[0])


def test_uncertain_attention_validation():
    with pytest.raises(ValueError):
        UncertainAttention(0, None, np.zeros((2, 2)), -np.ones((2, 2)), 4)
    with pytest.raises(ValueError):
        UncertainAttention(0, None, np.zeros((2, 2)), np.zeros((3, 3)), 4)
    with pytest.raises(ValueError):
        UncertainAttention(0, None, np.zeros((2, 2)), np.zeros((2, 2)), 1)


# ---------------------------------------------------------------------------
# moments


def test_duplicated_samples_have_zero_variance():
    sample = np.random.default_rng(1).uniform(size=(5, 5))
    mean, var = attention_moments(np.stack([sample] * 16))
    np.testing.assert_array_equal(mean, sample)
    np.testing.assert_array_equal(var, 0.0)


def test_moments_combine_branch_variance_and_spread():
    mu = np.array([[[1.0]], [[3.0]]])
    sigma = np.array([[[0.5]], [[-0.1]]])  # negative entry is clipped
    mean, var = attention_moments(mu, sigma)
    np.testing.assert_allclose(mean, [[2.0]])
    np.testing.assert_allclose(var, [[2.0 + 0.25]])


def test_deterministic_model_attention_has_zero_variance():
    x, graph, _ = ego_batch(3)
    uas = mc_attention(spatial_model("gat"), x, graph, 8)
    assert len(uas) == 2
    for u in uas:
        np.testing.assert_array_equal(u.variance, 0.0)
        assert u.mean.shape == (3, 6, 6)


def test_attention_of_attention_free_model_is_unsupported():
    x, graph, _ = ego_batch(2)
    with pytest.raises(UnsupportedModelError):
        mc_attention(spatial_model("vgcn"), x, graph, 8)


def test_attention_needs_two_samples():
    x, graph, _ = ego_batch(2)
    with pytest.raises(ConfigError):
        mc_attention(spatial_model("vgat"), x, graph, 1)


def test_vstgcn_attention_is_read_from_weights():
    ds = gen_skeleton_task(4, T=8, seed=0)
    cfg = ArchConfig(kind="vstgcn", in_channels=2, widths=[4], n_classes=2, n_nodes=7, kt=3)
    model = Model(cfg, seed=1).eval()
    x = np.stack([s.features for s in ds.samples])
    a = mc_attention(model, x[0], ds.partitions, 4, rng=0)
    b = mc_attention(model, x[3], ds.partitions, 64, rng=9)
    assert len(a) == 3
    for ua, ub in zip(a, b):
        assert ua.n_samples == 0
        np.testing.assert_array_equal(ua.mean, ub.mean)
        np.testing.assert_array_equal(ua.variance, ub.variance)
        np.testing.assert_array_equal(ua.mean, model.params[f"blocks.0.mu.M.{ua.partition}"].data)


def test_vgat_attention_mean_is_sample_average():
    x, graph, _ = ego_batch(2, seed=3)
    model = spatial_model("vgat", init_variance=0.2)
    uas = mc_attention(model, x, graph, 32, rng=4)
    assert [u.layer_index for u in uas] == [0, 1]
    # the first layer sees the fixed input, so its mean attention equals a single pass
    _, records = model.forward(x, graph, RandomStream(0), collect=True)
    np.testing.assert_allclose(uas[0].mean, records[0]["mu"], atol=1e-15)
    assert np.all(uas[1].variance >= 0) and uas[1].n_samples == 32


def test_attention_mask_pattern_survives_integration():
    x, graph, _ = ego_batch(2, seed=4)
    uas = mc_attention(spatial_model("vgat", init_variance=0.2), x, graph, 16)
    for u in uas:
        assert np.all(u.mean[graph.adjacency == 0] == 0)


def test_monte_carlo_mean_converges():
    x, graph, _ = ego_batch(1, seed=5)
    model = spatial_model("vgat", init_variance=0.3)
    errs = []
    ref = mc_attention(model, x, graph, 4096, rng=100)[1].mean
    for k in (16, 256):
        est = mc_attention(model, x, graph, k, rng=7)[1].mean
        errs.append(np.abs(est - ref).max())
    assert errs[1] < errs[0]


# ---------------------------------------------------------------------------
# uncertainty-aware layers


def _gat_pair(seed=0, c_in=3, c_out=4, variance=0.05):
    g = np.random.default_rng(seed)
    return B.random_pair(g, B.gat_params(g, c_in, c_out), rho_out="identity", variance=variance), g


def test_early_attention_zero_annihilates():
    vp, g = _gat_pair()
    A = random_graph(5, 0.5, 0).adjacency
    out = ua_ea_forward(g.normal(size=(5, 3)), A, vp, np.zeros((5, 5)), RandomStream(0))
    np.testing.assert_array_equal(out.data, 0.0)


def test_early_attention_identity_passes_sampled_features():
    vp, g = _gat_pair(1)
    A = random_graph(5, 0.5, 1).adjacency
    S = g.normal(size=(5, 3))
    out = ua_ea_forward(S, A, vp, np.eye(5), RandomStream(3))
    s_mu = S @ vp.mu.W.data
    var = vp.head(Tensor(S @ vp.sigma.W.data))
    ref = gaussian_sample(s_mu, var, RandomStream(3))
    np.testing.assert_allclose(out.data, ref.data, atol=1e-14)


def test_early_attention_at_floor_is_deterministic_fused_output():
    g = np.random.default_rng(2)
    det = B.gat_params(g, 3, 4)
    vp = B.floor_pair(det, rho_out="identity")
    A = random_graph(6, 0.5, 2).adjacency
    S = g.normal(size=(6, 3))
    _, lam_mu, _ = vgat_forward(S, A, vp, RandomStream(0), deterministic=True)
    out = ua_ea_forward(S, A, vp, lam_mu.data, RandomStream(5))
    np.testing.assert_allclose(out.data, lam_mu.data @ (S @ det.W.data), atol=1e-3)


def test_early_attention_without_cache_needs_training_filter():
    vp, g = _gat_pair(3)
    A = random_graph(5, 0.5, 3).adjacency
    with pytest.raises(StateError):
        ua_ea_forward(g.normal(size=(5, 3)), A, vp, None, RandomStream(0))
    out = ua_ea_forward(g.normal(size=(5, 3)), A, vp, None, RandomStream(0), in_graph_filter=FilterConfig())
    assert out.shape == (5, 4)


def test_fmci_zero_attention_gives_near_zero_output():
    g = np.random.default_rng(4)
    vp = B.floor_pair(B.gat_params(g, 3, 4), rho_out="identity")
    vp.sigma = B.gat_params(g, 3, 4)
    A = random_graph(5, 0.5, 4).adjacency
    z = np.zeros((5, 5))
    out = ua_fmci_forward(g.normal(size=(5, 3)), A, vp, z, z, RandomStream(0))
    assert np.abs(out.data).max() < 1e-3


def test_fmci_is_reproducible_and_requires_pair():
    vp, g = _gat_pair(5)
    A = random_graph(5, 0.5, 5).adjacency
    S = g.normal(size=(5, 3))
    m, v = g.uniform(size=(5, 5)), g.uniform(size=(5, 5))
    a = ua_fmci_forward(S, A, vp, m, v, RandomStream(2)).data
    b = ua_fmci_forward(S, A, vp, m, v, RandomStream(2)).data
    np.testing.assert_array_equal(a, b)
    with pytest.raises(StateError):
        ua_fmci_forward(S, A, vp, m, None, RandomStream(2))


def test_fmci_with_own_attention_equals_vgat_draw():
    vp, g = _gat_pair(6)
    A = random_graph(5, 0.5, 6).adjacency
    S = g.normal(size=(5, 3))
    _, _, lam_mu, lam_sigma = vgat_branches(S, A, vp)
    a = ua_fmci_forward(S, A, vp, lam_mu.data, lam_sigma.data, RandomStream(8)).data
    b = vgat_forward(S, A, vp, RandomStream(8))[0].data
    np.testing.assert_allclose(a, b, atol=1e-14)


# ---------------------------------------------------------------------------
# model-level Monte Carlo and conversion


def test_mc_predict_for_deterministic_model():
    x, graph, _ = ego_batch(3)
    pred = mc_predict(spatial_model("gcn"), x, graph, 10)
    np.testing.assert_array_equal(pred.class_variance, 0.0)
    np.testing.assert_allclose(pred.class_probabilities.sum(-1), 1.0)
    assert pred.samples.shape == (3, 10, 2)


def test_mc_predict_rejects_zero_samples():
    x, graph, _ = ego_batch(1)
    with pytest.raises(ConfigError):
        mc_predict(spatial_model("vgcn"), x, graph, 0)


def test_mc_predict_batch_rows_match_single_runs():
    x, graph, _ = ego_batch(3, seed=7)
    model = spatial_model("vgat", init_variance=0.1)
    batch = mc_predict(model, x, graph, 8, rng=11)
    for b in range(3):
        single = mc_predict(model, x[b], GraphBatch(graph.adjacency[b]), 8, rng=11, row_keys=[b])
        np.testing.assert_allclose(single.class_probabilities, batch.class_probabilities[b], atol=1e-14)


def test_uncertainty_aware_models_need_attention_in_eval():
    x, graph, _ = ego_batch(2)
    for kind in ("ua_ea_vgat", "ua_fmci_vgat"):
        model = spatial_model(kind)
        with pytest.raises(StateError):
            model.forward(x, graph, RandomStream(0))
        pred = mc_predict(model, x, graph, 4)
        assert pred.class_probabilities.shape == (2, 2)


def test_calibration_returns_one_filtered_pair_per_layer():
    x, graph, _ = ego_batch(2, seed=8)
    model = spatial_model("ua_ea_vgat")
    uas, filtered = calibrate(model, x, graph, 4, RandomStream(0), FilterConfig())
    assert len(uas) == len(filtered) == 2
    for u, (m, v) in zip(uas, filtered):
        assert m.shape == v.shape == u.mean.shape == (2, 6, 6)


def test_conversion_keeps_parameters_and_checks_kind():
    x, graph, _ = ego_batch(2, seed=9)
    src = spatial_model("vgat", init_variance=0.1)
    out = convert_vgat_to_fmci(src, (x, graph), 8, FilterConfig(0.0, 0.0))
    assert out.kind == "ua_fmci_vgat"
    for name, t in src.params.items():
        np.testing.assert_array_equal(out.params[name].data, t.data)
    for m, v in out.attention_cache:
        assert np.all(m[v > 0] == 0)
    with pytest.raises(UnsupportedModelError):
        convert_vgat_to_fmci(spatial_model("gat"), (x, graph), 8, FilterConfig())


# ---------------------------------------------------------------------------
# export


def _uas():
    g = np.random.default_rng(10)
    mean = g.uniform(size=(4, 4)) * (g.uniform(size=(4, 4)) > 0.5)
    return [UncertainAttention(0, None, mean, mean * 0.1, 16),
            UncertainAttention(1, 2, np.eye(3), np.zeros((3, 3)), 0)]


def test_json_export_round_trips():
    uas = _uas()
    doc = json.loads(json.dumps(attention_to_json(uas)))
    back = [UncertainAttention(d["layer"], d["partition"], d["mean"], d["variance"], d["n_samples"]) for d in doc]
    for a, b in zip(uas, back):
        np.testing.assert_array_equal(a.mean, b.mean)
        assert a.partition == b.partition and a.n_samples == b.n_samples


def test_dot_export_parses_with_edges_for_nonzero_entries():
    uas = _uas()
    (graph,) = pydot.graph_from_dot_data(attention_to_dot(uas))
    clusters = graph.get_subgraphs()
    assert [c.get_name() for c in clusters] == ["cluster_l0", "cluster_l1p2"]
    edges = clusters[0].get_edges()
    assert len(edges) == int(np.count_nonzero(uas[0].mean))
    for e in edges:
        i = int(e.get_destination().split("_")[1])
        j = int(e.get_source().split("_")[1])
        assert float(e.get("attn_mean").strip('"')) == uas[0].mean[i, j]
        assert float(e.get("attn_var").strip('"')) == uas[0].variance[i, j]
    assert len(clusters[1].get_edges()) == 3
