import numpy as np
import pytest

from namecraft.cnn import (
    CnnConfig,
    CnnModel,
    Nadam,
    PlateauSchedule,
    encode,
    encode_batch,
    grad_check,
    train_cnn,
)
from namecraft.corpus import Dataset, NameRecord, class_weights, default_profile, generate_synthetic, make_classes
from namecraft.corpus import split_dataset
from namecraft.errors import ShapeMismatchError, TooLongError, UnknownCharError

from conftest import random_ids, random_model, tiny_config


class TestEncode:
    def test_example(self):
        # default alphabet: A..Z = 1..26, then { = 27, } = 28
        assert encode("{AB}", 6).tolist() == [27, 1, 2, 28, 0, 0]

    def test_full_length(self):
        assert (encode("{ABCD}", 6) != 0).all()

    def test_unknown_char(self):
        with pytest.raises(UnknownCharError):
            encode("{A3}", 8)

    def test_too_long(self):
        with pytest.raises(TooLongError):
            encode("{ABCDEFG}", 4)

    def test_truncate_warns(self):
        with pytest.warns(UserWarning):
            x = encode_batch(["{ABCDEFG}"], 4, truncate=True)
        assert x.shape == (1, 4)


class TestForward:
    def test_zero_parameters(self):
        model = random_model(0)
        for arr in model.params.values():
            arr[...] = 0.0
        model.buffers = {k: (np.ones_like(v) if k.endswith("var") else np.zeros_like(v))
                         for k, v in model.buffers.items()}
        p, _ = model.forward(random_ids(np.random.default_rng(0), 5, 10))
        assert np.all(p == 0.5)

    def test_duplicates_identical(self):
        model = random_model(1)
        x = random_ids(np.random.default_rng(1), 1, 10)
        p, _ = model.forward(np.repeat(x, 4, axis=0))
        assert np.all(p == p[0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            random_model(0).forward(np.zeros((2, 7), dtype=int))

    def test_hand_built(self):
        alphabet = "AB"
        cfg = CnnConfig(alphabet=alphabet, max_len=4, embed_dim=2, kernel_sizes=(1,), filters=(1,),
                        dense_units=0, batch_norm=False, conv_activation="linear")
        params = {
            "embedding": np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
            "conv1.W": np.array([[[0.7], [-1.2]]]),
            "conv1.b": np.array([0.1]),
            "out.W": np.array([[2.0]]),
            "out.b": np.array([-0.3]),
        }
        model = CnnModel(cfg, ["x"], params, {})
        x = encode_batch(["AB", "BB", "ABAB"], 4, alphabet)
        # per-position conv values: A -> 0.8, B -> -1.1, padding -> 0.1
        expected_pool = np.array([0.8, 0.1, 0.8])
        expected = 1.0 / (1.0 + np.exp(-(2.0 * expected_pool - 0.3)))
        assert np.allclose(model.forward(x)[0].ravel(), expected, atol=1e-15)

    def test_outputs_in_open_interval(self):
        model = random_model(2)
        p, _ = model.forward(random_ids(np.random.default_rng(2), 50, 10))
        assert np.all((p > 0) & (p < 1))

    def test_padding_neutrality(self):
        # bias-free, relu: widening the input with padding cannot change pooled features
        model = random_model(3, conv_bias=False, batch_norm=False, conv_activation="relu")
        for k in (1, 2, 3):
            model.params[f"conv{k}.b"][...] = 0.0
        wide_cfg = CnnConfig(**{**model.config.to_dict(), "max_len": 14})
        wide = CnnModel(wide_cfg, model.classes, model.params, model.buffers)
        # names leave at least (widest kernel - 1) padding slots
        x = np.c_[random_ids(np.random.default_rng(3), 20, 8), np.zeros((20, 2), dtype=int)]
        xw = np.c_[x, np.zeros((20, 4), dtype=int)]
        a = model.forward(x)[1]["pooled"]
        b = wide.forward(xw)[1]["pooled"]
        assert np.all(b >= a)
        assert np.array_equal(a, b)

    def test_padding_row_inert(self):
        model = random_model(4)
        assert np.all(model.params["embedding"][0] == 0)


class TestBatchNormStats:
    def _stats(self, model, x, k):
        _, cache = model.forward(x, training=True, update_stats=False)
        z = cache[f"conv{k}"]["z"]
        return z.mean(axis=(0, 1)), z.var(axis=(0, 1))

    def test_first_update_is_batch_statistics(self):
        model = CnnModel.initialise(tiny_config(dropout_post=0.0), ["a", "b"], np.random.default_rng(0))
        x = random_ids(np.random.default_rng(1), 20, 10)
        mu, var = self._stats(model, x, 2)
        model.forward(x, training=True)
        assert np.allclose(model.buffers["bn2.mean"], mu, rtol=0, atol=1e-15)
        assert np.allclose(model.buffers["bn2.var"], var, rtol=0, atol=1e-15)

    def test_second_update_is_weighted_average(self):
        model = CnnModel.initialise(tiny_config(), ["a"], np.random.default_rng(0))
        rng = np.random.default_rng(2)
        x1, x2 = random_ids(rng, 20, 10), random_ids(rng, 20, 10)
        _, v1 = self._stats(model, x1, 1)
        _, v2 = self._stats(model, x2, 1)
        model.forward(x1, training=True)
        model.forward(x2, training=True)
        mom = model.config.bn_momentum
        assert np.allclose(model.buffers["bn1.var"], (mom * v1 + v2) / (1 + mom), rtol=1e-12)

    def test_inference_matches_batch_mode_after_training(self, synthetic_3k):
        tr, va, te = split_dataset(synthetic_3k, seed=0)
        cfg = CnnConfig(embed_dim=8, kernel_sizes=(1, 2, 3), filters=(8, 8, 8), dense_units=8,
                        batch_size=256, epochs=2, dropout_embed=0.0, dropout_post=0.0)
        model, _ = train_cnn(cfg, tr, va, class_weights(tr.labels, 2), seed=0)
        x = encode_batch(te.names, model.config.max_len, truncate=True)
        infer = model.forward(x)[0].argmax(1)
        batch = model.copy().forward(x, training=True, update_stats=False)[0].argmax(1)
        assert (infer == batch).mean() >= 0.97


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_grad_check(self, seed):
        model = random_model(seed, k=int(1 + seed % 3))
        rng = np.random.default_rng(100 + seed)
        x = random_ids(rng, 6, 10)
        y = rng.integers(0, model.n_classes, size=6)
        assert grad_check(model, x, y, n_params=200, seed=seed) <= 1e-4

    def test_saturated_point_skipped(self):
        model = random_model(0, k=1)
        model.params["out.b"][...] = 60.0
        x = random_ids(np.random.default_rng(0), 3, 10)
        assert grad_check(model, x, np.zeros(3, dtype=int), n_params=100) == 0.0

    def test_linear_degenerate(self):
        cfg = tiny_config(kernel_sizes=(1,), filters=(2,), dense_units=0, batch_norm=False,
                          conv_activation="linear")
        model = CnnModel.initialise(cfg, ["a", "b"], np.random.default_rng(9))
        x = random_ids(np.random.default_rng(9), 5, 10)
        assert grad_check(model, x, np.array([0, 1, 0, 1, 1]), n_params=300) <= 1e-7


class TestOptimiser:
    def test_nadam_first_step(self):
        params = {"w": np.array([1.0, -2.0])}
        opt = Nadam(params, lr=0.1)
        opt.step(params, {"w": np.array([0.5, -0.5])})
        # closed form at t=1: m_hat = g (1 + mu2 (1 - mu1) / (1 - mu1 mu2)), v_hat = g^2
        mu1 = 0.9 * (1 - 0.5 * 0.96 ** 0.004)
        mu2 = 0.9 * (1 - 0.5 * 0.96 ** 0.008)
        step = 0.1 * (1 + mu2 * (1 - mu1) / (1 - mu1 * mu2))
        expected = np.array([1.0 - step, -2.0 + step])
        assert np.allclose(params["w"], expected, rtol=0, atol=1e-8)

    def test_plateau_schedule(self):
        s = PlateauSchedule(1e-3, 0.5, patience=2, min_lr=2e-4)
        rates = [s.update(v) for v in [1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99, 1.0, 1.0, 1.0]]
        assert rates == [1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4, 2e-4, 2e-4, 2e-4]


def _one_example():
    ds = Dataset((NameRecord("{ABC}", None, 0),), make_classes(["only"]))
    return ds


class TestTraining:
    def test_memorise_single_example(self):
        ds = _one_example()
        cfg = tiny_config(epochs=300, batch_size=1, learning_rate=0.03, min_lr=0.03)
        model, hist = train_cnn(cfg, ds, ds, seed=0)
        assert hist.epochs[-1].train_loss < 0.01

    def test_deterministic(self, synthetic_small):
        tr, va, _ = split_dataset(synthetic_small, seed=0)
        cfg = tiny_config(max_len=None, epochs=2)
        a, ha = train_cnn(cfg, tr, va, seed=4)
        b, hb = train_cnn(cfg, tr, va, seed=4)
        assert ha.to_csv() == hb.to_csv()
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_padding_row_stays_zero(self, synthetic_small):
        tr, va, _ = split_dataset(synthetic_small, seed=0)
        model, _ = train_cnn(tiny_config(max_len=None, epochs=2), tr, va, seed=1)
        assert np.all(model.params["embedding"][0] == 0)

    def test_lr_schedule_in_history(self, synthetic_small):
        tr, va, _ = split_dataset(synthetic_small, seed=0)
        cfg = tiny_config(max_len=None, epochs=12, patience=1, learning_rate=0.05, min_lr=1e-3)
        _, hist = train_cnn(cfg, tr, va, seed=2)
        rates = [e.lr for e in hist.epochs]
        for a, b in zip(rates, rates[1:]):
            assert b == a or b == pytest.approx(max(a * 0.5, 1e-3))

    def test_separable_corpus(self):
        ds = generate_synthetic(default_profile(), 200, seed=0)
        tr, va, _ = split_dataset(ds, seed=0)
        cfg = CnnConfig(embed_dim=16, kernel_sizes=(1, 2, 3), filters=(32, 32, 32), dense_units=32,
                        batch_size=16, epochs=30, dropout_embed=0.0, dropout_post=0.1)
        model, _ = train_cnn(cfg, tr, va, class_weights(tr.labels, 2), seed=0)
        x = encode_batch(va.names, model.config.max_len, truncate=True)
        assert (model.predict_proba(x).argmax(axis=1) == va.labels).mean() >= 0.95
