from __future__ import annotations

import numpy as np
import pytest

from pcn import gradcheck


class TestGradcheck:
    def test_groups(self):
        assert gradcheck.group_of("ff_weight.3") == "ff_weights"
        assert gradcheck.group_of("fb_weight.0") == "fb_weights"
        assert gradcheck.group_of("rate_b.2") == "rates"
        assert gradcheck.group_of("ff_bias.1") == "biases"
        assert gradcheck.group_of("fc_bias") == "biases"
        assert gradcheck.group_of("fc_weight") == "fc"

    def test_rel_error_floor(self):
        assert gradcheck.rel_error(1.0, 1.1, 1e-4) == pytest.approx(0.1 / 1.1)
        assert gradcheck.rel_error(0.0, 1e-9, 1e-4) == pytest.approx(1e-5)

    def test_plain_network_64bit(self):
        rep = gradcheck.check_gradients("E", None, samples=10, dtype=np.float64)
        assert set(rep.groups) == {"ff_weights", "biases", "fc"}
        assert rep.max_rel_error < 1e-5

    def test_small_groups_use_every_coordinate(self):
        rep = gradcheck.check_gradients("E", 0, tied=False, samples=250, dtype=np.float64)
        assert rep.groups["biases"].samples == 16 + 16 + 32 + 32 + 64 + 64 + 10
        assert rep.groups["rates"].samples == 250  # of 224 + 160

    def test_detects_a_wrong_gradient(self, monkeypatch):
        from pcn import tensor as tn

        real = tn.relu

        def bad_relu(x):
            out = real(x)
            back = out._backward
            if back is not None:
                out._backward = lambda g: tuple(2 * v for v in back(g))
            return out

        monkeypatch.setattr(tn, "relu", bad_relu)
        rep = gradcheck.check_gradients("E", 1, samples=5, dtype=np.float64)
        assert rep.max_rel_error > 0.1

    def test_table(self):
        rep = gradcheck.check_gradients("E", 0, samples=3)
        assert "max_rel_error" in rep.table()

    def test_samples_positive(self):
        with pytest.raises(ValueError):
            gradcheck.check_gradients(samples=0)
