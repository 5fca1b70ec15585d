import numpy as np
import pytest

from fuzzyseg.fcn import (
    FuzzyFCNSegmenter,
    NetworkConfig,
    UNet,
    config_from_state,
    infer,
    one_hot,
    parameter_count,
    predict_proba,
    train,
)
from fuzzyseg.tensor import Tensor, cross_entropy, softmax_channels
from gradcheck import check_gradients


def toy_sample(rng, side=8):
    y = np.zeros((1, side, side), int)
    q = side // 4
    y[0, q:2 * q] = 2
    y[0, 2 * q:3 * q] = 3
    y[0, 3 * q:] = 4
    y[0, q + 1:3 * q - 1, q + 1:3 * q - 1] = 1
    x = rng.uniform(0, 0.2, (1, 3, side, side)) + y[:, None] / 5
    return x, y


class TestArchitecture:
    def test_parameter_count_closed_form(self):
        cfg = NetworkConfig(width=8, depth=2, image_size=64)
        # convolutions, hand-summed level by level
        enc = (8 * 3 * 9 + 8) + (8 * 8 * 9 + 8) + (16 * 8 * 9 + 16) + (16 * 16 * 9 + 16)
        bottom = (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32)
        dec = 2 * (16 * 32 * 9 + 16) + (16 * 16 * 9 + 16) + 2 * (8 * 16 * 9 + 8) + (8 * 8 * 9 + 8)
        head = 5 * 8 + 5
        assert enc + bottom + dec + head == 32701
        fuzzy = 2 * 5 * 64 * 64 * (3 + 8)
        assert parameter_count(cfg) == 32701 + fuzzy == 483261
        assert UNet(cfg).parameter_count() == parameter_count(cfg)
        plain = NetworkConfig(width=8, depth=2, image_size=64, membership=None)
        assert UNet(plain).parameter_count() == 32701

    def test_variants_differ_only_by_fuzzy_blocks(self):
        cfg = NetworkConfig(width=4, depth=1, image_size=16)
        fuzzy = set(UNet(cfg).parameters())
        plain = set(UNet(NetworkConfig(width=4, depth=1, image_size=16, membership=None)).parameters())
        assert plain < fuzzy
        assert fuzzy - plain == {"fuzzy_in.a", "fuzzy_in.b", "fuzzy_feat.a", "fuzzy_feat.b"}

    def test_untrained_near_uniform(self):
        rng = np.random.default_rng(0)
        net = UNet(NetworkConfig(width=8, depth=2, image_size=32))
        prob = predict_proba(net, rng.uniform(0, 1, (2, 3, 32, 32)))
        np.testing.assert_allclose(prob.sum(axis=1), 1.0, atol=1e-12)
        entropy = -(prob * np.log(prob)).sum(axis=1).mean()
        assert entropy > 1.5
        assert np.all(np.isfinite(net(Tensor(np.zeros((1, 3, 32, 32), np.float32))).data))

    def test_zero_uncertainty_matches_plain(self):
        rng = np.random.default_rng(1)
        fuzzy = UNet(NetworkConfig(width=4, depth=2, image_size=16, dtype="float64"))
        plain = UNet(NetworkConfig(width=4, depth=2, image_size=16, dtype="float64", membership=None))
        plain.load_state_dict({k: v for k, v in fuzzy.state_dict().items() if not k.startswith("fuzzy")})
        x = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
        np.testing.assert_array_equal(fuzzy(x, zero_uncertainty=True).data, plain(x).data)
        assert not np.array_equal(fuzzy(x).data, plain(x).data)

    @pytest.mark.parametrize(
        "changes, match",
        [
            ({"membership": "triangle"}, "membership"),
            ({"image_size": 20, "depth": 3}, "divisible"),
            ({"in_channels": 2}, "in_channels"),
            ({"dtype": "float16"}, "dtype"),
            ({"epochs": -1}, "epochs"),
        ],
    )
    def test_config_validation(self, changes, match):
        with pytest.raises(ValueError, match=match):
            NetworkConfig(**changes).validate()

    def test_one_hot(self):
        out = one_hot(np.array([[[0, 4], [1, 1]]]))
        assert out.shape == (1, 5, 2, 2)
        assert out[0, 4, 0, 1] == 1 and out[0, :, 0, 1].sum() == 1


class TestTraining:
    @pytest.mark.parametrize("membership", ["sigmoid", None])
    def test_memorizes_one_sample(self, membership):
        x, y = toy_sample(np.random.default_rng(2))
        cfg = NetworkConfig(membership=membership, width=8, depth=1, image_size=8, batch_size=1,
                            epochs=200, decay=1.0, dtype="float64")
        net = UNet(cfg)
        trace = train(net, x, y, cfg)
        assert trace[-1][2] < 0.05
        assert np.mean(predict_proba(net, x).argmax(axis=1) == y) > 0.99
        losses = np.array([t[2] for t in trace])
        smooth = losses[: len(losses) // 10 * 10].reshape(-1, 10).mean(axis=1)
        assert np.all(np.diff(smooth) < 0)

    def test_zero_epochs_keeps_initialization(self):
        x, y = toy_sample(np.random.default_rng(3), side=16)
        cfg = NetworkConfig(membership=None, width=4, depth=1, image_size=16, epochs=0)
        net = UNet(cfg)
        before = net.state_dict()
        assert train(net, x, y, cfg) == []
        after = net.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x = np.concatenate([toy_sample(rng, 16)[0] for _ in range(4)])
        y = np.concatenate([toy_sample(rng, 16)[1] for _ in range(4)])
        cfg = NetworkConfig(width=4, depth=1, image_size=16, batch_size=2, epochs=2)
        runs = []
        for _ in range(2):
            net = UNet(cfg)
            runs.append((train(net, x, y, cfg), net.state_dict()))
        assert runs[0][0] == runs[1][0]
        assert all(runs[0][1][k].tobytes() == runs[1][1][k].tobytes() for k in runs[0][1])

    def test_label_shape_checked(self):
        cfg = NetworkConfig(width=4, depth=1, image_size=8, epochs=1)
        with pytest.raises(ValueError, match="do not match"):
            train(UNet(cfg), np.zeros((2, 3, 8, 8)), np.zeros((2, 4, 4), int), cfg)


class TestGradients:
    def test_network_gradcheck(self):
        rng = np.random.default_rng(5)
        cfg = NetworkConfig(width=4, depth=1, image_size=16, dtype="float64")
        net = UNet(cfg)
        x, y = toy_sample(rng, 16)
        x = x + rng.uniform(0, 0.05, x.shape)
        target = Tensor(one_hot(y))
        names = sorted(net.params)
        # move the membership parameters off their data-free start
        for n in names:
            if n.startswith("fuzzy"):
                net.params[n].data[...] = rng.uniform(0.2, 0.8, net.params[n].shape)

        def loss(x, *params):
            for n, p in zip(names, params):
                block, key = n.split(".", 1)
                if block.startswith("fuzzy"):
                    setattr(getattr(net, block).params, "first" if key == "a" else "second", p)
                else:
                    net.params[n] = p
            return cross_entropy(softmax_channels(net(x)), target)

        inputs = [x] + [net.params[n].data.copy() for n in names]
        # a small step keeps bias perturbations from crossing ReLU kinks
        err = check_gradients(loss, inputs, step=1e-5, max_entries=12, seed=6, extrapolate=False)
        assert err < 1e-3


class TestCheckpointState:
    def test_load_state_errors(self):
        net = UNet(NetworkConfig(width=4, depth=1, image_size=8))
        state = net.state_dict()
        missing = {k: v for k, v in state.items() if k != "head.w"}
        with pytest.raises(ValueError, match="missing parameter 'head.w'"):
            net.load_state_dict(missing)
        with pytest.raises(ValueError, match="unexpected parameter 'extra'"):
            net.load_state_dict({**state, "extra": np.zeros(1)})
        with pytest.raises(ValueError, match="'head.b' has shape"):
            net.load_state_dict({**state, "head.b": np.zeros(7)})

    @pytest.mark.parametrize("membership", ["sigmoid", "gaussian", None])
    def test_config_from_state(self, membership):
        cfg = NetworkConfig(membership=membership, width=4, depth=2, image_size=16, in_channels=1)
        back = config_from_state(UNet(cfg).state_dict())
        assert (back.membership, back.width, back.depth, back.in_channels) == (membership, 4, 2, 1)
        if membership is not None:
            assert back.image_size == 16


class TestEstimator:
    def test_fit_predict_and_restore(self):
        x, y = toy_sample(np.random.default_rng(7), 16)
        est = FuzzyFCNSegmenter(width=4, depth=1, epochs=3, batch_size=1).fit(x, y)
        prob = est.predict_proba(x)
        assert prob.shape == (1, 5, 16, 16)
        np.testing.assert_array_equal(est.predict(x), prob.argmax(axis=1))
        assert 0.0 <= est.score(x, y) <= 1.0
        assert len(est.loss_trace_) == 3
        clone = FuzzyFCNSegmenter.from_state(est.network_.state_dict())
        np.testing.assert_array_equal(clone.predict_proba(x), prob)
        np.testing.assert_array_equal(infer(est.network_, x[0]).prob, prob[0])

    def test_not_fitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            FuzzyFCNSegmenter().predict(np.zeros((1, 3, 8, 8)))

    def test_square_images_only(self):
        with pytest.raises(ValueError, match="square"):
            FuzzyFCNSegmenter(depth=1).fit(np.zeros((1, 3, 8, 16)), np.zeros((1, 8, 16), int))
