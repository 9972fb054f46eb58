import subprocess
import sys

import numpy as np
import pytest

from milab import autodiff as ad
from milab.autodiff import Tensor
from milab.model import (CheckpointError, MilConfig, MilModel, UnsupportedVariantError, attention_weights,
                         checkpoint_bytes, featurize, forward, load_model, model_from_bytes, param_shapes, pool,
                         save_model, self_attention_mix)

from conftest import random_bag, random_model


def identity_model(dim=2, classes=2, **kw) -> MilModel:
    """Featurizer and predictor both reduce to the identity on non-negative inputs."""
    cfg = MilConfig(input_dim=dim, feature_dim=dim, featurizer_hidden=dim, predictor_hidden=dim,
                    num_classes=classes, attention_hidden=2, centered_predictor=False, **kw)
    params = {k: np.zeros(s) for k, s in param_shapes(cfg).items()}
    for k in ("f.W1", "f.W2", "p.W1", "p.W2"):
        params[k] = np.eye(dim)
    return MilModel(cfg, params)


def linear_predictor_model(rng, composition="additive", pooling="attention") -> MilModel:
    """Random featurizer and scorer; psi_p made linear by keeping its hidden layer positive."""
    cfg = MilConfig(input_dim=3, feature_dim=4, featurizer_hidden=5, predictor_hidden=4, num_classes=3,
                    pooling=pooling, composition=composition, centered_predictor=False, seed=3)
    model = MilModel(cfg)
    p = model.state_dict()
    p["p.W1"] = np.eye(4)  # relu(x @ I) == x for the non-negative featurizer output
    p["p.b1"] = np.zeros(4)
    p["p.b2"] = np.zeros(3)
    return MilModel(cfg, p)


class TestConfig:
    @pytest.mark.parametrize("pooling", ["mean", "attention", "self-attention"])
    @pytest.mark.parametrize("composition", ["joint", "additive"])
    def test_all_six_combinations(self, pooling, composition):
        model = MilModel(MilConfig(pooling=pooling, composition=composition))
        out = forward(model, np.ones((3, 16)))
        assert out.logits.shape == (3,)
        assert (out.contributions is not None) == (composition == "additive")

    @pytest.mark.parametrize("bad", [{"num_classes": 1}, {"input_dim": 0}, {"pooling": "max"},
                                     {"composition": "both"}, {"feature_dim": 0}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            MilConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(KeyError, match="colour"):
            MilConfig.from_dict({"colour": 1})

    def test_shapes_from_config(self):
        a, b = MilModel(MilConfig(seed=1)), MilModel(MilConfig(seed=2))
        assert {k: v.shape for k, v in a.params.items()} == {k: v.shape for k, v in b.params.items()}


class TestFeaturize:
    def test_identity(self):
        out = featurize(identity_model(), np.array([[1.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_permutation(self, rng):
        model = MilModel(MilConfig())
        x = rng.normal(size=(7, 16))
        perm = rng.permutation(7)
        np.testing.assert_array_equal(featurize(model, x[perm]).data, featurize(model, x).data[perm])

    def test_row_independence(self, rng):
        model = MilModel(MilConfig())
        x = rng.normal(size=(5, 16))
        y = x.copy()
        y[3] += 1.0
        a, b = featurize(model, x).data, featurize(model, y).data
        np.testing.assert_array_equal(np.delete(a, 3, 0), np.delete(b, 3, 0))

    def test_dim_mismatch(self):
        with pytest.raises(ad.DimensionError):
            featurize(MilModel(MilConfig()), np.ones((3, 15)))

    def test_byte_identical_across_processes(self):
        code = ("import numpy as np; from milab.model import *; "
                "m = MilModel(MilConfig(seed=9)); x = np.random.default_rng(1).normal(size=(6, 16)); "
                "import sys; sys.stdout.write(featurize(m, x).data.tobytes().hex())")
        outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
                for _ in range(2)}
        assert len(outs) == 1


class TestAttention:
    def test_single_instance(self):
        model = MilModel(MilConfig())
        a = attention_weights(model, featurize(model, np.ones((1, 16))))
        assert a.data.tolist() == [1.0]

    def test_equal_scores_uniform(self):
        model = MilModel(MilConfig())
        feats = Tensor(np.tile(np.arange(32.0) / 32, (4, 1)))
        np.testing.assert_allclose(attention_weights(model, feats).data, 0.25, atol=1e-15)

    def test_duplicates_equal(self, rng):
        model = MilModel(MilConfig())
        x = rng.normal(size=(4, 16))
        x[2] = x[0]
        a = forward(model, x).attention.data
        assert a[0] == a[2]

    def test_mean_pooling_rejected(self):
        model = MilModel(MilConfig(pooling="mean"))
        with pytest.raises(UnsupportedVariantError):
            attention_weights(model, Tensor(np.ones((2, 32))))


class TestPool:
    def test_one_hot(self, rng):
        model = MilModel(MilConfig())
        feats = Tensor(rng.normal(size=(4, 5)))
        _, pooled = pool(model, feats, Tensor([0.0, 0.0, 1.0, 0.0]))
        np.testing.assert_array_equal(pooled.data, feats.data[2])

    def test_uniform_identical(self):
        model = MilModel(MilConfig())
        feats = Tensor(np.array([[1.5, -2.0], [1.5, -2.0]]))
        _, pooled = pool(model, feats, Tensor([0.5, 0.5]))
        np.testing.assert_array_equal(pooled.data, [1.5, -2.0])

    def test_sum_definitional(self, rng):
        model = MilModel(MilConfig())
        m, pooled = pool(model, Tensor(rng.normal(size=(6, 3))), Tensor(rng.dirichlet(np.ones(6))))
        np.testing.assert_array_equal(pooled.data, ad.sum_axis(m, 0).data)

    def test_length_mismatch(self):
        with pytest.raises(ad.DimensionError):
            pool(MilModel(MilConfig()), Tensor(np.ones((3, 2))), Tensor([0.5, 0.5]))


class TestMixer:
    def model(self, **kw):
        return MilModel(MilConfig(pooling="self-attention", **kw))

    def test_single_instance(self, rng):
        model = self.model()
        f = Tensor(rng.normal(size=(1, 32)))
        p = model.params
        expected = f.data + f.data @ p["mix.0.Wv"].data @ p["mix.0.Wo"].data
        np.testing.assert_allclose(self_attention_mix(model, f).data, expected, rtol=1e-14)

    def test_equivariance(self, rng):
        model = self.model(self_attention_heads=2)
        f = rng.normal(size=(6, 32))
        perm = rng.permutation(6)
        np.testing.assert_allclose(self_attention_mix(model, Tensor(f[perm])).data,
                                   self_attention_mix(model, Tensor(f)).data[perm], atol=1e-12)

    def test_zero_value_projection(self, rng):
        model = self.model()
        model.params["mix.0.Wv"].data[:] = 0.0
        f = rng.normal(size=(5, 32))
        np.testing.assert_array_equal(self_attention_mix(model, Tensor(f)).data, f)

    def test_rows_interact(self, rng):
        model = self.model()
        f = rng.normal(size=(3, 32))
        g = f.copy()
        g[2] += 1.0
        a, b = self_attention_mix(model, Tensor(f)).data, self_attention_mix(model, Tensor(g)).data
        assert not np.allclose(a[0], b[0])


class TestForward:
    def test_additive_identity_row_sums(self):
        # instance 0 has m = [1, 3], instance 1 has m = [2, 4]; contributions C x N = [[1,2],[3,4]]
        model = identity_model(composition="additive")
        out = forward(model, np.array([[1.0, 3.0], [2.0, 4.0]]), alpha=np.ones(2))
        np.testing.assert_array_equal(out.contributions.data, [[1, 2], [3, 4]])
        np.testing.assert_array_equal(out.logits.data, [3, 7])

    @pytest.mark.parametrize("pooling", ["mean", "attention", "self-attention"])
    def test_single_instance_compositions_coincide(self, rng, pooling):
        cfg = dict(pooling=pooling, seed=4)
        j = MilModel(MilConfig(composition="joint", **cfg))
        a = MilModel(MilConfig(composition="additive", **cfg))
        x = rng.normal(size=(1, 16))
        np.testing.assert_array_equal(forward(j, x).logits.data, forward(a, x).logits.data)

    @pytest.mark.parametrize("composition", ["joint", "additive"])
    def test_duplication_linear_predictor(self, rng, composition):
        model = linear_predictor_model(rng, composition)
        x = rng.normal(size=(5, 3))
        once, twice = forward(model, x), forward(model, np.vstack([x, x]))
        np.testing.assert_allclose(twice.attention.data[:5], once.attention.data / 2, rtol=1e-12)
        np.testing.assert_allclose(twice.logits.data, once.logits.data, rtol=1e-12, atol=1e-14)

    def test_attention_sums_to_one(self, rng):
        for pooling in ("mean", "attention", "self-attention"):
            model = random_model(rng, pooling=pooling)
            out = forward(model, random_bag(rng, model, 9))
            assert abs(out.attention.data.sum() - 1.0) <= 1e-9

    def test_additivity_random(self, rng):
        for _ in range(30):
            model = random_model(rng, composition="additive")
            out = forward(model, random_bag(rng, model, int(rng.integers(1, 40))))
            assert np.max(np.abs(out.logits.data - out.contributions.data.sum(axis=1))) <= 1e-9

    @pytest.mark.parametrize("pooling", ["mean", "attention"])
    def test_locality(self, rng, pooling):
        model = MilModel(MilConfig(pooling=pooling, composition="additive", seed=11))
        x = rng.normal(size=(6, 16))
        base = forward(model, x)
        alpha = base.attention.data

        y = x.copy()
        y[4] += 2.0  # change instance j = 4
        frozen = forward(model, y, alpha=alpha).contributions.data
        np.testing.assert_array_equal(np.delete(frozen, 4, 1), np.delete(base.contributions.data, 4, 1))
        free = forward(model, y).contributions.data
        if pooling == "attention":
            assert not np.allclose(free[:, 0], base.contributions.data[:, 0])

        z = x.copy()
        z[1] += 2.0
        assert not np.allclose(forward(model, z, alpha=alpha).contributions.data[:, 1],
                               base.contributions.data[:, 1])

    def test_permutation(self, rng):
        for pooling in ("mean", "attention", "self-attention"):
            for comp in ("joint", "additive"):
                model = random_model(rng, pooling=pooling, composition=comp)
                x = random_bag(rng, model, 11)
                perm = rng.permutation(11)
                a, b = forward(model, x), forward(model, x[perm])
                assert np.max(np.abs(a.logits.data - b.logits.data)) <= 1e-9
                if comp == "additive":
                    np.testing.assert_allclose(b.contributions.data, a.contributions.data[:, perm],
                                               rtol=0, atol=1e-12)

    def test_centered_predictor_zero_sum(self, rng):
        model = MilModel(MilConfig(composition="additive"))
        out = forward(model, rng.normal(size=(8, 16)))
        np.testing.assert_allclose(out.contributions.data.sum(axis=0), 0.0, atol=1e-12)


class TestCheckpoint:
    @pytest.mark.parametrize("pooling", ["mean", "attention", "self-attention"])
    def test_round_trip_bit_exact(self, tmp_path, rng, pooling):
        model = MilModel(MilConfig(pooling=pooling, composition="additive", self_attention_heads=2, seed=5))
        path = tmp_path / "m.milab"
        save_model(model, path, meta={"note": "x"})
        loaded, meta = load_model(path)
        assert meta == {"note": "x"}
        assert loaded.config == model.config
        x = rng.normal(size=(10, 16))
        a, b = forward(model, x), forward(loaded, x)
        assert a.logits.data.tobytes() == b.logits.data.tobytes()
        assert a.contributions.data.tobytes() == b.contributions.data.tobytes()

    def test_layout(self):
        model = MilModel(MilConfig(seed=1))
        blob = checkpoint_bytes(model)
        assert blob[:8] == b"MILABCK\x00"
        assert int.from_bytes(blob[8:12], "little") == 1
        h = int.from_bytes(blob[12:20], "little")
        data = np.frombuffer(blob[20 + h:], dtype="<f8")
        assert data.size == model.num_parameters()

    def test_bad_magic(self):
        blob = bytearray(checkpoint_bytes(MilModel(MilConfig())))
        blob[0] = ord("X")
        with pytest.raises(CheckpointError):
            model_from_bytes(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(checkpoint_bytes(MilModel(MilConfig())))
        blob[8] = 99
        with pytest.raises(CheckpointError, match="version"):
            model_from_bytes(bytes(blob))

    def test_truncated(self):
        blob = checkpoint_bytes(MilModel(MilConfig()))
        with pytest.raises(CheckpointError):
            model_from_bytes(blob[:-8])
