import numpy as np
import pytest

from freezenet import data, nn, selection, train
from freezenet.errors import DataError, NumericError, ParameterError
from freezenet.rng import RngStream


def tiny_spec():
    return nn.NetworkSpec(
        "tiny", (6,),
        (nn.linear(6, 8), nn.relu(), nn.linear(8, 4), nn.relu(),
         nn.linear(4, 3), nn.log_softmax()), 3)


def synthetic_dataset(n=120, seed=0, easy=False):
    """Small labeled set; easy=True makes classes linearly separable."""
    r = np.random.default_rng(seed)
    labels = r.integers(0, 3, n)
    x = r.normal(0, 1, (n, 6)).astype(np.float32)
    if easy:
        for c in range(3):
            x[labels == c, c] += 4.0
    return data.Dataset(x, labels, "train")


def cfg(**kw):
    base = dict(epochs=2, lr=0.1, momentum=0.9, weight_decay=5e-4,
                batch_size=10, split="9/1", seeds=train.default_seeds(1))
    base.update(kw)
    return train.TrainConfig(**base)


class TestSgdStep:
    def test_hand_simulated_two_steps(self):
        spec = nn.NetworkSpec("one", (1,), (nn.linear(1, 1),), 1)
        params = nn.ParamSet(spec, np.array([0.5]), np.array([0.0]))
        state = train.new_state(params, train.all_ones_mask(spec))
        c = train.TrainConfig(epochs=1, lr=0.1, momentum=0.9, weight_decay=0.0)
        g = nn.Gradients(np.array([1.0]), np.array([0.0]))
        train.sgd_step(state, g, state.mask, c)
        assert state.velocity_w[0] == 1.0
        assert np.isclose(params.weights[0], 0.4)
        train.sgd_step(state, nn.Gradients(np.array([1.0]), np.array([0.0])), state.mask, c)
        assert state.velocity_w[0] == 1.9
        assert np.isclose(params.weights[0], 0.4 - 0.19)

    def test_lr_schedule_steps(self):
        spec = nn.NetworkSpec("one", (1,), (nn.linear(1, 1),), 1)
        params = nn.ParamSet(spec, np.array([0.5]), np.array([0.0]))
        state = train.new_state(params, train.all_ones_mask(spec))
        c = train.TrainConfig(epochs=1, lr=0.1, momentum=0.0, weight_decay=0.0,
                              lr_decay_every=3, lr_decay_factor=0.1)
        seen = []
        for _ in range(7):
            train.sgd_step(state, nn.Gradients(np.zeros(1), np.zeros(1)), state.mask, c)
            seen.append(round(state.last_lr, 12))
        assert seen == [0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.001]

    def test_wd_all_geometric_shrink(self):
        spec = nn.NetworkSpec("one", (4,), (nn.linear(4, 1),), 1)
        w0 = np.array([0.5, -0.25, 0.125, -1.0])
        params = nn.ParamSet(spec, w0.copy(), np.zeros(1))
        mask = selection.FreezeMask(np.zeros(4, np.uint8), selection.as_rate(0), 0, 0)
        mask.bits[0] = 1  # one trainable, three frozen
        state = train.new_state(params, mask)
        c = train.TrainConfig(epochs=1, lr=0.1, momentum=0.0, weight_decay=0.01,
                              wd_mode="all_weights")
        zero = nn.Gradients(np.zeros(4), np.zeros(1))
        prev = np.abs(params.weights[1:]).copy()
        for t in range(1, 201):
            train.sgd_step(state, zero, mask, c)
            cur = np.abs(params.weights[1:])
            assert np.all(cur <= prev)
            prev = cur.copy()
        np.testing.assert_allclose(params.weights[1:], w0[1:] * (1 - 0.1 * 0.01) ** 200,
                                   rtol=1e-10)

    def test_layout_mismatch(self):
        spec = nn.NetworkSpec("one", (1,), (nn.linear(1, 1),), 1)
        params = nn.ParamSet(spec, np.array([0.5]), np.array([0.0]))
        state = train.new_state(params, train.all_ones_mask(spec))
        with pytest.raises(ParameterError):
            train.sgd_step(state, nn.Gradients(np.zeros(3), np.zeros(1)),
                           state.mask, cfg())


class TestTrainModes:
    def test_frozen_weights_bitwise_immutable(self):
        ds = synthetic_dataset()
        c = cfg(epochs=3)
        state, _ = train.train(tiny_spec(), c, ds, "freezenet", q=0.8)
        init = nn.init_params(tiny_spec(), "xavier_normal", RngStream(1, "init"))
        frozen = state.mask.bits == 0
        assert frozen.sum() > 0
        assert np.array_equal(state.params.weights[frozen], init.weights[frozen])
        assert np.all(state.velocity_w[frozen] == 0.0)
        # and the trainable part did move
        assert not np.array_equal(state.params.weights[~frozen], init.weights[~frozen])

    def test_pruned_weights_stay_exactly_zero(self):
        ds = synthetic_dataset()
        state, _ = train.train(tiny_spec(), cfg(epochs=3), ds, "snip", q=0.8)
        dropped = state.mask.bits == 0
        assert dropped.sum() > 0
        assert not state.params.weights[dropped].any()

    def test_random_freeze_uses_rescue_stream_scores(self):
        ds = synthetic_dataset()
        a, _ = train.train(tiny_spec(), cfg(), ds, "random_freeze", q=0.7)
        b, _ = train.train(tiny_spec(), cfg(), ds, "random_freeze", q=0.7)
        assert np.array_equal(a.mask.bits, b.mask.bits)
        c2 = cfg(seeds=train.default_seeds(2))
        d, _ = train.train(tiny_spec(), c2, ds, "random_freeze", q=0.7)
        assert not np.array_equal(a.mask.bits, d.mask.bits)

    def test_baseline_rejects_nonzero_q(self):
        with pytest.raises(ParameterError):
            train.train(tiny_spec(), cfg(), synthetic_dataset(), "baseline", q=0.5)

    def test_unknown_mode(self):
        with pytest.raises(ParameterError):
            train.train(tiny_spec(), cfg(), synthetic_dataset(), "magnitude", q=0.5)

    def test_rejects_zero_epochs(self):
        with pytest.raises(ParameterError):
            cfg(epochs=0)

    def test_empty_dataset(self):
        empty = data.Dataset(np.zeros((0, 6), np.float32), np.zeros(0, np.int64), "train")
        with pytest.raises(DataError):
            train.train(tiny_spec(), cfg(), empty, "baseline")

    def test_nan_loss_aborts(self):
        ds = synthetic_dataset()
        with np.errstate(all="ignore"), pytest.raises(NumericError):
            train.train(tiny_spec(), cfg(lr=1e30, epochs=1), ds, "baseline")

    def test_freezenet_wd_forces_all_weights(self):
        ds = synthetic_dataset()
        state, hist = train.train(tiny_spec(), cfg(epochs=2, weight_decay=0.01),
                                  ds, "freezenet_wd", q=0.8)
        init = nn.init_params(tiny_spec(), "xavier_normal", RngStream(1, "init"))
        frozen = state.mask.bits == 0
        # frozen weights moved (shrunk), unlike plain freezenet
        assert not np.array_equal(state.params.weights[frozen], init.weights[frozen])
        assert np.all(np.abs(state.params.weights[frozen]) <= np.abs(init.weights[frozen]))
        assert hist[-1]["max_frozen_magnitude"] < hist[0]["max_frozen_magnitude"]

    def test_replay_determinism(self):
        ds = synthetic_dataset()
        a_state, a_hist = train.train(tiny_spec(), cfg(epochs=3), ds, "freezenet", q=0.5)
        b_state, b_hist = train.train(tiny_spec(), cfg(epochs=3), ds, "freezenet", q=0.5)
        assert np.array_equal(a_state.best_snapshot.weights, b_state.best_snapshot.weights)
        assert np.array_equal(a_state.best_snapshot.biases, b_state.best_snapshot.biases)
        assert a_hist == b_hist

    def test_early_stopping_earliest_best(self):
        ds = synthetic_dataset(n=200, easy=True)
        state, hist = train.train(tiny_spec(), cfg(epochs=4), ds, "baseline")
        vals = [h["val_acc"] for h in hist]
        assert state.best_val_acc == max(vals)
        assert state.epoch_of_best == vals.index(max(vals)) + 1
        assert state.best_snapshot is not None

    def test_history_schema(self):
        ds = synthetic_dataset()
        _, hist = train.train(tiny_spec(), cfg(epochs=2), ds, "freezenet", q=0.5)
        assert [h["epoch"] for h in hist] == [1, 2]
        for h in hist:
            assert set(h) == {"epoch", "train_loss", "train_acc", "val_acc", "lr",
                              "grad_flow", "max_frozen_magnitude"}
            assert h["lr"] == 0.1
            assert h["max_frozen_magnitude"] > 0


class TestReinitialize:
    def test_same_scheme_same_stream_identical(self):
        spec = tiny_spec()
        mask = train.all_ones_mask(spec)
        a = nn.init_params(spec, "pm_sigma", RngStream(5, "init"))
        b = train.reinitialize(spec, mask, "pm_sigma", RngStream(5, "init"))
        assert np.array_equal(a.weights, b.weights)

    def test_mask_and_frozen_values_after_reinit_run(self):
        ds = synthetic_dataset()
        plain, _ = train.train(tiny_spec(), cfg(), ds, "freezenet", q=0.7)
        re_cfg = cfg(reinit_scheme="kaiming_uniform")
        redone, _ = train.train(tiny_spec(), re_cfg, ds, "freezenet", q=0.7)
        # mask identical (scores come from the theta_0 draw in both runs)
        assert np.array_equal(plain.mask.bits, redone.mask.bits)
        # frozen weights equal the reinit draw, not the original init
        reinit = nn.init_params(tiny_spec(), "kaiming_uniform", RngStream(1, "reinit"))
        frozen = redone.mask.bits == 0
        assert np.array_equal(redone.params.weights[frozen], reinit.weights[frozen])


class TestGradFlowProbe:
    def test_self_ratio_exactly_one(self):
        ds = synthetic_dataset()
        spec = tiny_spec()
        params = nn.init_params(spec, "xavier_normal", RngStream(1, "init"))
        mask = train.all_ones_mask(spec)
        base = train.gradient_flow_probe(spec, params, mask, ds, batch_size=20)
        again = train.gradient_flow_probe(spec, params, mask, ds, batch_size=20,
                                          baseline_mean=base.mean_abs_grad)
        assert again.ratio == 1.0

    def test_zero_layer_kills_upstream_flow(self):
        spec = tiny_spec()
        params = nn.init_params(spec, "xavier_normal", RngStream(2, "init"))
        params.weight_view(4)[:] = 0.0  # last linear zeroed
        params.bump()
        ds = synthetic_dataset()
        rep = train.gradient_flow_probe(spec, params, train.all_ones_mask(spec), ds,
                                        batch_size=20)
        assert rep.per_layer_weight_l1[0] == 0.0
        assert rep.per_layer_weight_l1[1] == 0.0
        assert rep.per_layer_weight_l1[2] > 0.0  # the zero layer itself still learns

    def test_trainable_count(self):
        spec = tiny_spec()
        params = nn.init_params(spec, "xavier_normal", RngStream(1, "init"))
        bits = np.zeros(spec.weight_count, np.uint8)
        bits[:10] = 1
        mask = selection.FreezeMask(bits, selection.as_rate(0.5), 10, 0)
        rep = train.gradient_flow_probe(spec, params, mask, synthetic_dataset(),
                                        batch_size=30)
        assert rep.trainable_count == 10 + spec.bias_count


class TestReinitAccuracyParity:
    def test_redrawn_frozen_weights_match_plain_accuracy(self, mnist_dir):
        # redrawing the frozen weights from a second scheme should not move
        # test accuracy by more than a point at q=0.99
        train_ds = data.load_idx(mnist_dir / "train-images-idx3-ubyte.gz",
                                 mnist_dir / "train-labels-idx1-ubyte.gz")
        test_ds = data.load_idx(mnist_dir / "t10k-images-idx3-ubyte.gz",
                                mnist_dir / "t10k-labels-idx1-ubyte.gz", role="test")
        spec = nn.ARCHITECTURES["lenet300100"]()
        accs = {}
        for scheme in (None, "kaiming_uniform"):
            c = train.TrainConfig(epochs=5, seeds=train.default_seeds(1),
                                  reinit_scheme=scheme)
            state, _ = train.train(spec, c, train_ds, "freezenet", q=0.99)
            _, accs[scheme] = train.evaluate(spec, state.best_snapshot, test_ds)
        assert accs[None] > 0.9 and accs["kaiming_uniform"] > 0.9
        assert abs(accs[None] - accs["kaiming_uniform"]) <= 0.01
