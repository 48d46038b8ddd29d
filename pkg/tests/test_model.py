from __future__ import annotations

import numpy as np
import pytest

from pcn import kernels, model
from pcn import tensor as tn


def relu(x):
    return np.maximum(x, 0)


def pool(x):
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).max(axis=(3, 5))


def upsample(x):
    uh = tn.upsample_matrix(x.shape[2], "float64")
    uw = tn.upsample_matrix(x.shape[3], "float64")
    return uh @ x @ uw.T


def reference_pcn(params, x, T):
    """Straight transcription of the recursion on raw arrays."""
    layers = params.config.layers
    L = len(layers)
    W = [w.data for w in params.ff_weights]
    Wb = [w.data for w in params.fb_weights]
    bias = [b.data for b in params.ff_biases]
    a = [relu(v.data)[None, :, None, None] for v in params.rate_a]
    b = [relu(v.data)[None, :, None, None] for v in params.rate_b]
    r = [x]
    for k in range(L):
        h = relu(kernels.conv2d(r[k], W[k], bias[k]))
        r.append(pool(h) if layers[k].pools_after else h)
    for _ in range(T):
        p = [None] * L
        for l in range(L, 0, -1):
            src = upsample(r[l]) if layers[l - 1].pools_after else r[l]
            p[l - 1] = kernels.conv_transpose2d(src, Wb[l - 1])
            if l > 1:
                r[l - 1] = relu((1 - b[l - 2]) * r[l - 1] + b[l - 2] * p[l - 1])
        for l in range(L):
            e = r[l] - p[l]
            d = kernels.conv2d(e, W[l])
            d = pool(d) if layers[l].pools_after else d
            r[l + 1] = relu(r[l + 1] + a[l] * d)
    feat = r[-1].mean(axis=(2, 3))
    return feat @ params.fc_weight.data.T + params.fc_bias.data


def small_config(pools=(False, True, False)):
    chans = [2, 3, 4, 4]
    layers = tuple(model.LayerSpec(chans[i], chans[i + 1], p) for i, p in enumerate(pools))
    return model.ArchConfig("S", layers, num_classes=5, input_channels=2, input_size=8)


def conv_count(chans):
    return sum(9 * a * b for a, b in zip(chans[:-1], chans[1:]))


class TestArchitectures:
    @pytest.mark.parametrize("arch", list(model.CHANNELS))
    def test_pool_after_third_and_fifth(self, arch):
        cfg = model.arch_config(arch)
        assert [i for i, s in enumerate(cfg.layers) if s.pools_after] == [2, 4]

    def test_mnist_spatial_sizes(self):
        assert model.arch_config("E", "mnist").spatial_sizes() == [28, 28, 28, 14, 14, 7, 7]

    def test_cifar_spatial_sizes(self):
        assert model.arch_config("A").spatial_sizes() == [32, 32, 32, 16, 16, 8, 8, 8, 8]

    def test_unknown_names(self):
        with pytest.raises(ValueError):
            model.arch_config("F")
        with pytest.raises(ValueError):
            model.arch_config("A", "svhn")

    def test_odd_pooling_rejected(self):
        layers = (model.LayerSpec(1, 2, True),)
        with pytest.raises(ValueError):
            model.validate_config(model.ArchConfig("X", layers, 10, 1, 7))

    def test_channel_chain_checked(self):
        layers = (model.LayerSpec(1, 2, False), model.LayerSpec(3, 4, False))
        with pytest.raises(ValueError):
            model.validate_config(model.ArchConfig("X", layers, 10, 1, 8))

    def test_config_round_trip(self):
        cfg = model.arch_config("B", "cifar100")
        assert model.ArchConfig.from_dict(cfg.to_dict()) == cfg


class TestParamCounts:
    """Exact integers from the layer shapes."""

    @pytest.mark.parametrize("arch", list(model.CHANNELS))
    def test_plain_formula(self, arch):
        chans = [3] + list(model.CHANNELS[arch])
        expect = conv_count(chans) + sum(chans[1:]) + chans[-1] * 10 + 10
        assert model.count_params(model.build_plain(model.arch_config(arch))) == expect

    @pytest.mark.parametrize("arch,plain,untied", [
        ("A", 2_328_138, 4_654_858), ("B", 583_466, 1_166_218), ("C", 288_298, 575_626),
    ])
    def test_known_integers(self, arch, plain, untied):
        cfg = model.arch_config(arch)
        assert model.count_params(model.build_plain(cfg)) == plain
        assert model.count_params(model.build_pcn(cfg, tied=False)) == untied

    def test_mnist_e(self):
        cfg = model.arch_config("E", "mnist")
        assert model.count_params(model.build_plain(cfg)) == 72_442
        assert model.count_params(model.build_pcn(cfg, tied=True)) == 72_826
        assert model.count_params(model.build_pcn(cfg, tied=False)) == 144_394

    def test_tied_adds_only_rates(self):
        cfg = model.arch_config("C")
        rates = 2 * sum(model.CHANNELS["C"]) - model.CHANNELS["C"][-1]
        assert (model.count_params(model.build_pcn(cfg, tied=True))
                - model.count_params(model.build_plain(cfg))) == rates


class TestBuild:
    def test_feedforward_part_matches_plain(self):
        cfg = model.arch_config("E", "mnist")
        plain = model.build_plain(cfg, seed=3)
        pcn = model.build_pcn(cfg, tied=False, seed=3)
        for (n1, p1), (n2, p2) in zip(plain.named_parameters(), pcn.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_tied_shares_objects(self):
        pcn = model.build_pcn(model.arch_config("E", "mnist"), tied=True)
        assert all(a is b for a, b in zip(pcn.ff_weights, pcn.fb_weights))
        assert not any(n.startswith("fb_weight") for n, _ in pcn.named_parameters())

    def test_untied_independent(self):
        pcn = model.build_pcn(model.arch_config("E", "mnist"), tied=False)
        assert not np.allclose(pcn.ff_weights[0].data, pcn.fb_weights[0].data)

    def test_initial_rates_and_init_range(self):
        pcn = model.build_pcn(model.arch_config("E", "mnist"), tied=False, seed=1)
        assert all(np.all(a.data == 1.0) for a in pcn.rate_a)
        assert all(np.all(b.data == 0.5) for b in pcn.rate_b)
        assert len(pcn.rate_a) == 6 and len(pcn.rate_b) == 5
        w = pcn.ff_weights[2].data
        assert np.abs(w).max() <= 1 / np.sqrt(16 * 9)

    def test_decay_flags(self):
        pcn = model.build_pcn(model.arch_config("E", "mnist"), tied=False)
        decayed = {n for n, p in pcn.named_parameters() if p.decay}
        assert all(n.startswith(("ff_weight", "fb_weight", "fc_weight")) for n in decayed)

    def test_cast_preserves_ties(self):
        pcn = model.build_pcn(model.arch_config("E", "mnist"), tied=True)
        c = model.cast_params(pcn, np.float64)
        assert c.ff_weights[0] is c.fb_weights[0]
        assert c.ff_weights[0].dtype == np.float64


class TestNames:
    @pytest.mark.parametrize("name,parsed", [
        ("Plain-A", ("A", None, False)), ("PCN-E-4", ("E", 4, False)),
        ("PCN-C-1 (tied)", ("C", 1, True)),
    ])
    def test_round_trip(self, name, parsed):
        assert model.parse_model_name(name) == parsed
        assert model.model_name(*parsed) == name

    def test_bad_name(self):
        with pytest.raises(ValueError):
            model.parse_model_name("PCN-Z-2")


class TestForward:
    @pytest.mark.parametrize("tied", [True, False])
    @pytest.mark.parametrize("T", [0, 1, 3])
    def test_matches_reference_recursion(self, T, tied, rng):
        cfg = small_config()
        with tn.precision(np.float64):
            params = model.build_pcn(cfg, tied=tied, seed=5)
            for v in params.rate_a + params.rate_b:
                v.data[...] = rng.uniform(0.1, 0.9, v.shape)
            x = rng.standard_normal((3, 2, 8, 8))
            got = model.pcn_forward(params, x, T).data
        np.testing.assert_allclose(got, reference_pcn(params, x, T), rtol=1e-10, atol=1e-12)

    def test_mnist_e_matches_reference(self, rng):
        cfg = model.arch_config("E", "mnist")
        with tn.precision(np.float64):
            params = model.build_pcn(cfg, tied=False, seed=2)
            x = rng.standard_normal((2, 1, 28, 28))
            got = model.pcn_forward(params, x, 2).data
        np.testing.assert_allclose(got, reference_pcn(params, x, 2), rtol=1e-9, atol=1e-12)

    def test_t0_equals_plain(self, rng):
        cfg = model.arch_config("E", "mnist")
        x = rng.standard_normal((2, 1, 28, 28)).astype(np.float32)
        plain = model.build_plain(cfg, seed=4)
        pcn = model.build_pcn(cfg, tied=False, seed=4)
        np.testing.assert_array_equal(model.pcn_forward(pcn, x, 0).data,
                                      model.plain_forward(plain, x).data)

    def test_zero_rates_freeze_representations(self, rng):
        """Rates clipped to zero make every cycle a no-op."""
        cfg = small_config()
        params = model.build_pcn(cfg, tied=False, seed=0)
        for v in params.rate_a + params.rate_b:
            v.data[...] = -1.0
        x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(model.pcn_forward(params, x, 3).data,
                                      model.pcn_forward(params, x, 0).data)

    def test_trace_does_not_perturb(self, rng):
        params = model.build_pcn(model.arch_config("E", "mnist"), tied=True, seed=0)
        x = rng.standard_normal((2, 1, 28, 28)).astype(np.float32)
        plain = model.pcn_forward(params, x, 3).data
        traced, snaps, _ = model.pcn_forward(params, x, 3, trace=True)
        np.testing.assert_array_equal(plain, traced.data)
        assert [s.cycle for s in snaps] == [0, 1, 2, 3]
        np.testing.assert_array_equal(snaps[-1].logits, plain)

    def test_bad_input_shape(self):
        params = model.build_plain(model.arch_config("E", "mnist"))
        with pytest.raises(ValueError):
            model.plain_forward(params, np.zeros((1, 3, 28, 28), np.float32))

    def test_negative_cycles(self):
        params = model.build_pcn(model.arch_config("E", "mnist"))
        with pytest.raises(ValueError):
            model.pcn_forward(params, np.zeros((1, 1, 28, 28), np.float32), -1)

    def test_predict_shapes(self, rng):
        cfg = model.arch_config("E", "mnist")
        params = model.build_pcn(cfg)
        state = model.initial_state(params, rng.standard_normal((1, 1, 28, 28)).astype(np.float32))
        for l in range(1, cfg.depth + 1):
            assert model.predict(params, l, state.r[l]).shape == state.r[l - 1].shape
        with pytest.raises(ValueError):
            model.predict(params, 0, state.r[0])

    def test_feedforward_needs_predictions(self, rng):
        params = model.build_pcn(small_config())
        state = model.initial_state(params, rng.standard_normal((1, 2, 8, 8)).astype(np.float32))
        with pytest.raises(RuntimeError):
            model.feedforward_sweep(params, state)


class TestEnergy:
    def test_zero(self):
        assert model.error_energy(np.zeros(4)) == 0.0

    def test_arithmetic(self):
        assert model.error_energy(np.array([3.0, 4.0])) == 25.0

    def test_normalized(self, rng):
        e = rng.standard_normal(50)
        r = rng.standard_normal(50)
        assert model.error_energy(e, r) == pytest.approx(np.sum(e ** 2) / np.var(r, ddof=1))

    def test_variance_floor(self):
        assert model.error_energy(np.ones(2), np.zeros(2)) == pytest.approx(2 / model.VARIANCE_FLOOR)
