import json

import numpy as np
import pytest

from vgcn import autodiff as ad
from vgcn.autodiff import Tape, Tensor, backward
from vgcn.data import gen_ego_task, gen_skeleton_task, split_indices
from vgcn.errors import CompatibilityError, ConfigError, ContractError, DataError, MalformedFileError, VersionError
from vgcn.models import ArchConfig, Model, SPATIAL_KINDS, TEMPORAL_KINDS
from vgcn.rng import RandomStream
from vgcn.training import (
    FORMAT_VERSION,
    TrainConfig,
    checkpoint_bytes,
    cross_entropy,
    init_from_pretrained,
    load_checkpoint,
    multi_sample_loss,
    optimizer_step,
    predict_dataset,
    save_checkpoint,
    train,
    twin_name,
)
from vgcn.var_layers import VARIANCE_FLOOR


def spatial_cfg(kind, widths=(6,), **kw):
    return ArchConfig(kind=kind, in_channels=4, widths=list(widths), n_classes=2, mask_mode="direct", **kw)


def temporal_cfg(kind, widths=(4,), **kw):
    return ArchConfig(kind=kind, in_channels=2, widths=list(widths), n_classes=2, n_nodes=7, kt=3, **kw)


class TestLoss:
    def test_uniform_logits_give_log_two(self):
        assert cross_entropy(Tensor(np.zeros((5, 2))), [0, 1, 1, 0, 1]).item() == pytest.approx(np.log(2))

    def test_saturated_correct_logits(self):
        labels = np.array([0, 1, 1])
        logits = np.where(np.eye(2)[labels] > 0, 50.0, -50.0)
        assert cross_entropy(Tensor(logits), labels).item() < 1e-9

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            cross_entropy(Tensor(np.zeros((2, 2))), [0, 2])
        model = Model(spatial_cfg("gcn"))
        ds = gen_ego_task(2, (5, 5))
        x = np.stack([s.features for s in ds.samples])
        with pytest.raises(DataError):
            multi_sample_loss(model, (x, np.stack([s.graph.adjacency for s in ds.samples]), [0, 3]), 1, None)

    def test_duplicate_draws_equal_single_sample(self):
        class Repeating(RandomStream):
            def split(self, index):
                return RandomStream(self.seed, self.path)

        model = Model(spatial_cfg("vgcn", init_variance=0.3), seed=2)
        ds = gen_ego_task(4, (6, 6), seed=1)
        batch = (np.stack([s.features for s in ds.samples]),
                 np.stack([s.graph.adjacency for s in ds.samples]), ds.labels)
        one = multi_sample_loss(model, batch, 1, Repeating(7)).item()
        two = multi_sample_loss(model, batch, 2, Repeating(7)).item()
        assert one == pytest.approx(two, rel=1e-14)
        other = multi_sample_loss(model, batch, 2, RandomStream(7)).item()
        assert other != pytest.approx(one, rel=1e-6)

    def test_loss_gradient_matches_softmax_minus_onehot(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        labels = np.array([0, 3, 1])
        with Tape():
            backward(cross_entropy(logits, labels))
        p = np.exp(logits.data) / np.exp(logits.data).sum(-1, keepdims=True)
        np.testing.assert_allclose(logits.grad, (p - np.eye(4)[labels]) / 3, atol=1e-14)


def _param(value, grad):
    p = Tensor(np.asarray(value, dtype=float), requires_grad=True)
    p.grad = np.asarray(grad, dtype=float)
    return p


class TestOptimizer:
    def test_sgd_step(self):
        p = _param([1.0], [1.0])
        optimizer_step({"w": p}, {}, TrainConfig(learning_rate=0.1, optimizer="sgd"))
        assert p.data[0] == pytest.approx(0.9)

    @pytest.mark.parametrize("scale", [1e-4, 1.0, 1e4])
    def test_adam_first_step_is_learning_rate(self, scale):
        p = _param([0.0, 0.0], [scale, -scale])
        optimizer_step({"w": p}, {}, TrainConfig(learning_rate=0.01))
        np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-3)

    @pytest.mark.parametrize("opt", ["sgd", "sgd-momentum", "adam"])
    def test_zero_gradient_leaves_parameters(self, opt):
        p = _param([0.5, -2.0], [0.0, 0.0])
        optimizer_step({"w": p}, {}, TrainConfig(learning_rate=0.1, optimizer=opt))
        np.testing.assert_array_equal(p.data, [0.5, -2.0])

    def test_momentum_accumulates(self):
        p = _param([0.0], [1.0])
        cfg = TrainConfig(learning_rate=0.1, optimizer="sgd-momentum", momentum=0.5)
        state = optimizer_step({"w": p}, {}, cfg)
        optimizer_step({"w": p}, state, cfg)
        assert p.data[0] == pytest.approx(-0.1 - 0.15)

    def test_missing_gradient(self):
        with pytest.raises(ContractError):
            optimizer_step({"w": Tensor(np.ones(1), requires_grad=True)}, {}, TrainConfig())

    @pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": -1.0},
                                        {"optimizer": "rmsprop"}, {"eval_samples": 0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestTrainLoop:
    def test_zero_learning_rate_keeps_parameters(self):
        ds = gen_ego_task(30, seed=2)
        model = Model(spatial_cfg("vgat", init_variance=0.1), seed=3)
        before = {n: p.data.copy() for n, p in model.params.items()}
        res = train(model, ds, TrainConfig(epochs=3, batch_size=8, learning_rate=0.0, eval_samples=2))
        for name, value in before.items():
            np.testing.assert_array_equal(res.final_model.params[name].data, value)

    def test_same_seed_same_log_and_checkpoint(self):
        ds = gen_ego_task(30, seed=4)
        cfg = TrainConfig(epochs=3, batch_size=8, learning_rate=1e-2, seed=5, eval_samples=4)
        runs = [train(Model(spatial_cfg("vgcn"), seed=1), ds, cfg) for _ in range(2)]
        assert runs[0].log_csv() == runs[1].log_csv()
        assert checkpoint_bytes(runs[0].model) == checkpoint_bytes(runs[1].model)

    def test_log_has_train_and_val_rows(self):
        ds = gen_ego_task(20, seed=6)
        res = train(Model(spatial_cfg("gcn")), ds, TrainConfig(epochs=2, batch_size=8))
        assert [(r["epoch"], r["split"]) for r in res.log] == [(1, "train"), (1, "val"), (2, "train"), (2, "val")]
        assert res.log_csv().splitlines()[0] == "epoch,split,loss,metric"
        assert res.model.metadata["epoch"] == res.best_epoch

    def test_empty_dataset(self):
        ds = gen_ego_task(5, seed=0)
        ds.samples = []
        with pytest.raises(DataError):
            train(Model(spatial_cfg("gcn")), ds, TrainConfig(epochs=1))

    def test_bn_running_stats_move_during_training(self):
        ds = gen_skeleton_task(12, T=8, seed=0)
        model = Model(temporal_cfg("stgcn"), seed=0)
        res = train(model, ds, TrainConfig(epochs=1, batch_size=4, learning_rate=1e-2))
        assert not np.allclose(res.final_model.buffers["blocks.0.bn.running_var"], 1.0)

    @pytest.mark.parametrize("kind", SPATIAL_KINDS + TEMPORAL_KINDS)
    def test_loss_decreases_over_ten_epochs(self, kind):
        temporal = kind in TEMPORAL_KINDS
        worse = []
        for seed in range(10):
            if temporal:
                ds = gen_skeleton_task(16, T=8, seed=seed)
                cfg = temporal_cfg(kind)
            else:
                ds = gen_ego_task(24, seed=seed)
                cfg = spatial_cfg(kind)
            res = train(Model(cfg, seed=seed), ds,
                        TrainConfig(epochs=10, batch_size=8, learning_rate=1e-2, seed=seed, eval_samples=2))
            losses = [r["loss"] for r in res.log if r["split"] == "train"]
            if not losses[-1] < losses[0]:
                worse.append(seed)
        assert not worse, f"loss did not decrease for seeds {worse}"


class TestPretrained:
    def _pair(self, kind="vgat", det="gat"):
        source = Model(spatial_cfg(det, widths=(5, 5)), seed=4)
        return Model(spatial_cfg(kind, widths=(5, 5)), seed=9), source

    def test_mean_branch_is_copied_bitwise(self):
        target, source = self._pair()
        out = init_from_pretrained(target, source, 1e-3)
        for name, p in out.params.items():
            twin = twin_name(name)
            if twin is not None:
                np.testing.assert_array_equal(p.data, source.params[twin].data)
            elif ".sigma." in name:
                np.testing.assert_array_equal(p.data, 0.0)

    def test_floor_variance_reproduces_source(self):
        target, source = self._pair()
        out = init_from_pretrained(target, source, VARIANCE_FLOOR).eval()
        ds = gen_ego_task(40, seed=11)
        idx = np.arange(40)
        probs, _ = predict_dataset(out, ds, idx, 32)
        ref, _ = predict_dataset(source.eval(), ds, idx, 1)
        np.testing.assert_array_equal(probs.argmax(-1), ref.argmax(-1))
        np.testing.assert_allclose(probs, ref, atol=1e-3)

    def test_width_mismatch_names_parameter(self):
        source = Model(spatial_cfg("gat", widths=(5, 4)))
        target = Model(spatial_cfg("vgat", widths=(5, 5)))
        with pytest.raises(CompatibilityError) as info:
            init_from_pretrained(target, source, 1e-3)
        assert info.value.parameter == "layers.1.W"

    def test_wrong_twin(self):
        with pytest.raises(CompatibilityError):
            init_from_pretrained(Model(spatial_cfg("vgat")), Model(spatial_cfg("gcn")), 1e-3)

    def test_temporal_twin_copies_buffers(self):
        src = Model(temporal_cfg("agcn"), seed=1)
        src.buffers["blocks.0.bn_outer.running_mean"][:] = 0.25
        out = init_from_pretrained(Model(temporal_cfg("vagcn")), src, 1e-3)
        np.testing.assert_array_equal(out.buffers["blocks.0.bn_outer.running_mean"], 0.25)


class TestCheckpoint:
    def _model(self):
        return Model(spatial_cfg("vgat", widths=(4, 3)), seed=7)

    def test_round_trip_bitwise(self, tmp_path):
        model = self._model()
        model.params["layers.0.mu.W"].data[0, 0] = 0.1 + 0.2  # a value with a long repr
        save_checkpoint(model, tmp_path / "a.json", {"seed": 3})
        back = load_checkpoint(tmp_path / "a.json")
        for name, p in model.params.items():
            np.testing.assert_array_equal(back.params[name].data, p.data)
        assert back.metadata == {"seed": 3}
        save_checkpoint(back, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_bytes(checkpoint_bytes(self._model())[:200])
        with pytest.raises(MalformedFileError):
            load_checkpoint(path)

    def test_future_version(self, tmp_path):
        doc = json.loads(checkpoint_bytes(self._model()))
        doc["format_version"] = FORMAT_VERSION + 1
        path = tmp_path / "v.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(VersionError, match=f"{FORMAT_VERSION + 1}.*{FORMAT_VERSION}"):
            load_checkpoint(path)

    def test_shape_mismatch(self, tmp_path):
        doc = json.loads(checkpoint_bytes(self._model()))
        doc["architecture"]["widths"] = [4, 4]
        path = tmp_path / "s.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(CompatibilityError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "nope.json")

    def test_attention_cache_survives(self, tmp_path):
        model = self._model()
        model.attention_cache = [(np.ones((1, 2, 2)), np.zeros((1, 2, 2))), None]
        save_checkpoint(model, tmp_path / "m.json")
        back = load_checkpoint(tmp_path / "m.json")
        np.testing.assert_array_equal(back.attention_cache[0][0], 1.0)
        assert back.attention_cache[1] is None


def test_split_is_disjoint_and_covering():
    tr, va, te = split_indices(50, seed=0)
    assert len(tr) == 30 and len(va) == 10 and len(te) == 10
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(50))
