import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crclip import oracles
from crclip import tensor as T
from crclip.errors import ContractError, InputError
from crclip.gradcheck import check
from crclip.losses import (SmsConfig, check_relevance, mimm_loss, relevance_gap,
                           similarity_matrix, sms_loss)
from crclip.synthdata import build_relevance
from crclip.tensor import Tensor

GRADES = [0.0, 0.25, 0.5, 0.75, 1.0]


def sms(S, C, tau=0.05, gamma=10.0):
    return sms_loss(Tensor(S), C, SmsConfig(tau, gamma)).item()


def square_case(draw_size):
    return st.integers(1, draw_size).flatmap(lambda b: st.tuples(
        arrays(np.float64, (b, b), elements=st.floats(-1, 1)),
        arrays(np.float64, (b, b), elements=st.sampled_from(GRADES))))


class TestRelevanceGap:
    def test_hard_extreme(self):
        assert relevance_gap(np.array([[1.0, 0.0]]), 0, 0, 1) == 1.0

    def test_tie(self):
        assert relevance_gap(np.array([[0.4, 0.4]]), 0, 0, 1) == 0.0

    def test_antisymmetry(self):
        C = np.array([[0.5, 0.3]])
        assert relevance_gap(C, 0, 0, 1) == pytest.approx(0.2, abs=1e-15)
        assert relevance_gap(C, 0, 1, 0) == pytest.approx(-0.2, abs=1e-15)

    @pytest.mark.parametrize("ijk", [(1, 0, 0), (0, 2, 0), (0, 0, -1)])
    def test_out_of_range(self, ijk):
        with pytest.raises(InputError):
            relevance_gap(np.zeros((1, 2)), *ijk)


class TestSmsLoss:
    def test_all_equal_relevance_is_zero(self, rng):
        assert sms(rng.uniform(-1, 1, (4, 4)), np.full((4, 4), 0.5)) == 0.0

    def test_gaps_within_tau_is_zero(self, rng):
        C = 0.3 + rng.uniform(0, 0.05, size=(5, 5))
        assert sms(rng.uniform(-1, 1, (5, 5)), C, tau=0.05) == 0.0

    def test_two_by_two_hand_value(self):
        got = sms(np.array([[1.0, -1.0], [-1.0, 1.0]]), np.eye(2), tau=0.0, gamma=1.0)
        assert got == pytest.approx(2 * math.log1p(math.exp(-2.0)), rel=1e-14)
        assert round(got, 4) == 0.2539

    def test_random_b5_matches_triple_loop(self, rng):
        S = rng.uniform(-1, 1, (5, 5))
        C = rng.uniform(0, 1, (5, 5))
        assert abs(sms(S, C) - oracles.sms_loss(S, C, 0.05, 10.0)) < 1e-12

    def test_rectangular(self, rng):
        S, C = rng.uniform(-1, 1, (3, 5)), rng.choice(GRADES, (3, 5))
        assert abs(sms(S, C) - oracles.sms_loss(S, C, 0.05, 10.0)) < 1e-12

    def test_monotone_in_top_relevance_entries(self, rng):
        # an entry holding the largest relevance of its row and column is only ever
        # a positive candidate, so raising its score cannot increase the loss
        labels = rng.integers(0, 3, size=(5, 2))
        C = build_relevance(labels, labels)
        S = rng.uniform(-1, 1, (5, 5))
        base = sms(S, C)
        for i in range(5):
            for eps in (1e-3, 0.1, 0.5):
                bumped = S.copy()
                bumped[i, i] += eps
                assert sms(bumped, C) <= base + 1e-15

    def test_gradient(self, rng):
        S = Tensor(rng.uniform(-1, 1, (4, 4)))
        C = rng.choice(GRADES, (4, 4))
        assert check(lambda: sms_loss(S, C), [S]) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            sms_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))

    def test_relevance_out_of_range(self):
        with pytest.raises(InputError):
            check_relevance(np.array([[1.5]]))

    @pytest.mark.parametrize("tau,gamma", [(1.0, 10.0), (-0.1, 10.0), (0.05, 0.0)])
    def test_config_validation(self, tau, gamma):
        with pytest.raises(ContractError):
            SmsConfig(tau, gamma)

    @settings(max_examples=60, deadline=None)
    @given(square_case(6))
    def test_transpose_symmetry(self, case):
        S, C = case
        assert abs(sms(S, C) - sms(S.T, C.T)) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(square_case(6))
    def test_matches_oracle_and_nonnegative(self, case):
        S, C = case
        got = sms(S, C)
        assert got >= 0.0
        assert abs(got - oracles.sms_loss(S, C, 0.05, 10.0)) <= 1e-12


class TestMimmLoss:
    def test_satisfied_margins(self):
        S = 2 * np.eye(4) - 1
        assert mimm_loss(Tensor(S), 0.2).item() == 0.0

    def test_constant_half(self):
        assert mimm_loss(Tensor(np.full((2, 2), 0.5)), 0.2).item() == pytest.approx(0.4, rel=1e-14)

    def test_matches_loop_oracle(self, rng):
        S = rng.uniform(-1, 1, (6, 6))
        assert abs(mimm_loss(Tensor(S), 0.2).item() - oracles.mimm_loss(S, 0.2)) < 1e-12

    def test_subgradient_away_from_kinks(self, rng):
        while True:
            S = rng.uniform(-1, 1, (5, 5))
            d = np.diag(S)[:, None]
            if min(np.abs(0.2 - d + S).min(), np.abs(0.2 - d + S.T).min()) >= 1e-3:
                break
        St = Tensor(S)
        assert check(lambda: mimm_loss(St, 0.2), [St]) < 1e-5

    @settings(max_examples=80, deadline=None)
    @given(st.integers(2, 5).flatmap(
        lambda b: arrays(np.float64, (b, b), elements=st.floats(-1, 1))))
    def test_zero_iff_all_margins_hold(self, S):
        d = np.diag(S)[:, None]
        off = ~np.eye(len(S), dtype=bool)
        satisfied = np.all((0.2 - d + S)[off] <= 0) and np.all((0.2 - d + S.T)[off] <= 0)
        assert (mimm_loss(Tensor(S), 0.2).item() == 0.0) == satisfied

    def test_non_square(self):
        with pytest.raises(InputError):
            mimm_loss(Tensor(np.zeros((2, 3))))


class TestSimilarityMatrix:
    def test_orthonormal_rows(self, rng):
        Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        S = similarity_matrix(Tensor(Q[:4]), Tensor(Q[:4])).data
        assert np.allclose(S, np.eye(4), atol=1e-12)

    def test_anti_parallel(self):
        v = np.array([[0.6, 0.8]])
        assert similarity_matrix(Tensor(v), Tensor(-v)).data[0, 0] == pytest.approx(-1.0, abs=1e-15)

    def test_bounded(self, rng):
        V = T.l2_normalize(Tensor(rng.normal(size=(9, 7)))).data
        X = T.l2_normalize(Tensor(rng.normal(size=(11, 7)))).data
        assert np.abs(similarity_matrix(Tensor(V), Tensor(X)).data).max() <= 1 + 1e-9

    def test_inner_dim_mismatch(self):
        with pytest.raises(InputError):
            similarity_matrix(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))
