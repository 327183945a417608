import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from amaut.errors import ConfigError
from amaut.losses import (
    ProbabilityClampWarning,
    TTDAConfig,
    en_loss,
    gen_loss,
    lsr_loss,
    nm_loss,
    ttda_objective,
)
from amaut.numerics import grad_check


def t(x):
    return torch.tensor(np.asarray(x), dtype=torch.float64)


def simplex_rows(rng, B, C):
    return rng.dirichlet(np.ones(C), size=B)


class TestLSR:
    def test_uniform_two_class(self):
        assert lsr_loss(t([[0.5, 0.5]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_minimum_at_smoothed_target(self):
        target = np.array([0.95, 0.05])
        at_target = lsr_loss(t([target]), [0]).item()
        assert at_target == pytest.approx(-np.sum(target * np.log(target)), abs=1e-12)
        for p0 in np.linspace(0.01, 0.99, 99):
            assert lsr_loss(t([[p0, 1 - p0]]), [0]).item() >= at_target - 1e-12

    def test_batch_of_identical_rows(self):
        row = [0.2, 0.3, 0.5]
        assert lsr_loss(t([row, row]), [2, 2]).item() == pytest.approx(lsr_loss(t([row]), [2]).item())

    def test_zero_probability_clamped_with_warning(self):
        with pytest.warns(ProbabilityClampWarning):
            loss = lsr_loss(t([[1.0, 0.0]]), [0])
        expected = -(0.95 * math.log(1.0) + 0.05 * math.log(1e-12))
        assert loss.item() == pytest.approx(expected)

    def test_label_errors(self):
        with pytest.raises(ValueError):
            lsr_loss(t([[0.5, 0.5]]), [2])
        with pytest.raises(ValueError):
            lsr_loss(t([[0.5, 0.5]]), [0, 1])


class TestNM:
    def test_one_hot(self):
        p = torch.zeros(4, 10, dtype=torch.float64)
        p[torch.arange(4), torch.tensor([0, 3, 3, 9])] = 1
        assert nm_loss(p).item() == pytest.approx(-0.05, abs=1e-12)

    @pytest.mark.parametrize("B,C", [(1, 2), (4, 10), (7, 3)])
    def test_uniform_rows(self, B, C):
        p = torch.full((B, C), 1.0 / C, dtype=torch.float64)
        assert nm_loss(p).item() == pytest.approx(-math.sqrt(B / C) / (B * C), abs=1e-14)

    def test_inverse_sqrt_batch_scaling(self):
        row = simplex_rows(np.random.default_rng(0), 5, 4)
        small = nm_loss(t(row)).item()
        big = nm_loss(t(np.tile(row, (4, 1)))).item()
        assert big / small == pytest.approx(0.5, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(2, 6), st.integers(0, 10**6))
    def test_non_positive(self, B, C, seed):
        assert nm_loss(t(simplex_rows(np.random.default_rng(seed), B, C))).item() <= 0


class TestEN:
    def test_one_hot(self):
        assert abs(en_loss(t([[0, 1.0, 0, 0]])).item()) <= 2e-6

    def test_uniform_four(self):
        assert en_loss(t([[0.25] * 4])).item() == pytest.approx(math.log(4), abs=1e-5)

    def test_uniform_is_maximum(self):
        rng = np.random.default_rng(4)
        top = en_loss(t([[1 / 3] * 3])).item()
        assert all(en_loss(t([p])).item() <= top + 1e-12 for p in simplex_rows(rng, 1000, 3))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(2, 6), st.integers(0, 10**6))
    def test_lower_bound(self, B, C, seed):
        p = simplex_rows(np.random.default_rng(seed), B, C)
        assert en_loss(t(p)).item() >= -C * 1e-6


class TestGEN:
    @pytest.mark.parametrize("q", [0.8, 1.1, 2.0])
    def test_one_hot_zero(self, q):
        assert gen_loss(t([[0, 0, 1.0]]), q).item() == pytest.approx(0.0, abs=1e-15)

    def test_uniform_two_class(self):
        expected = (1 - 2 ** -0.1) / 0.1
        assert gen_loss(t([[0.5, 0.5]]), 1.1).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.66967, abs=1e-5)

    def test_shannon_limit(self):
        p = t(simplex_rows(np.random.default_rng(1), 20, 5))
        assert gen_loss(p, 1.0001).item() == pytest.approx(en_loss(p, eps=0.0).item(), abs=1e-3)

    def test_pole(self):
        with pytest.raises(ValueError):
            gen_loss(t([[0.5, 0.5]]), 1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(1.01, 3.0), st.integers(0, 10**6))
    def test_non_negative_for_q_above_one(self, q, seed):
        assert gen_loss(t(simplex_rows(np.random.default_rng(seed), 4, 3)), q).item() >= -1e-15


class TestGradients:
    @pytest.mark.parametrize("name", ["lsr", "nm", "en", "gen"])
    def test_finite_difference_through_softmax(self, name):
        labels = [0, 2, 1, 2]
        fns = {
            "lsr": lambda z: lsr_loss(torch.softmax(z, -1), labels),
            "nm": lambda z: nm_loss(torch.softmax(z, -1)),
            "en": lambda z: en_loss(torch.softmax(z, -1)),
            "gen": lambda z: gen_loss(torch.softmax(z, -1), 1.1),
        }
        for trial in range(3):
            logits = np.random.default_rng([trial, 5]).standard_normal((4, 3))
            rep = grad_check(fns[name], [logits], seed=trial)
            assert rep.passed, str(rep)


class TestTTDAConfig:
    def test_defaults_match_am_row(self):
        c = TTDAConfig()
        assert (c.alpha, c.beta, c.gamma, c.q, c.lr, c.lam, c.eta) == (1.0, 0.5, 0.5, 1.1, 1e-3, 10, 40)

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ConfigError):
            TTDAConfig(alpha=0, beta=0, gamma=0)

    def test_other_guards(self):
        for kw in ({"q": 1.0}, {"alpha": -1}, {"update_scope": "heads"}, {"epochs": -1}):
            with pytest.raises(ConfigError):
                TTDAConfig(**kw)

    def test_objective_is_weighted_sum(self):
        p = t(simplex_rows(np.random.default_rng(2), 6, 4))
        cfg = TTDAConfig(alpha=0.2, beta=1.0, gamma=0.3, q=0.8)
        expected = 0.2 * nm_loss(p) + 1.0 * en_loss(p) + 0.3 * gen_loss(p, 0.8)
        assert ttda_objective(p, cfg).item() == pytest.approx(expected.item(), abs=1e-14)

    def test_zero_weight_terms_skipped(self):
        p = t([[1.0, 0.0]])
        cfg = TTDAConfig(alpha=0.0, beta=1.0, gamma=0.0, q=0.8)
        assert ttda_objective(p, cfg).item() == pytest.approx(en_loss(p).item())
