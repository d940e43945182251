import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from homotopy_attack.homotopy import (
    AttackReport,
    DegenerateOracleError,
    HomotopyParams,
    PostAttackParams,
    coarse_lambda,
    homotopy_attack,
    lambda_search,
    post_attack,
    trigger_check,
)
from homotopy_attack.harness import build_tile_partition
from homotopy_attack.nmapg import CompositeObjective, NmapgParams
from homotopy_attack.oracle import AttackGoal
from homotopy_attack.tensor_core import BoxBounds, compute_box_bounds

from conftest import LinearOracle, affine_model


def linear_toy(n=5):
    g = np.zeros(n)
    g[0] = -0.1
    bounds = BoxBounds(np.full(n, -0.05), np.full(n, 0.05))
    return CompositeObjective(LinearOracle(g), 0.0, bounds)


class TestParams:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(c=0.5), dict(v=0), dict(v=2, v_small=3), dict(beta=0.0), dict(gamma=1.0),
         dict(gamma=0.0), dict(lambda_decay=1.0), dict(fine_decay=0.0), dict(max_outer=0)],
    )
    def test_homotopy_rejects(self, kwargs):
        with pytest.raises(ValueError):
            HomotopyParams(**kwargs)

    @pytest.mark.parametrize(
        "kwargs", [dict(w1=1.0, w2=0.02), dict(p=3), dict(step_size=0.0), dict(w2=0.0)]
    )
    def test_post_attack_rejects(self, kwargs):
        with pytest.raises(ValueError):
            PostAttackParams(**kwargs)

    def test_post_attack_inf_serializes(self):
        assert PostAttackParams(p=math.inf).as_dict()["p"] == "inf"


class TestLambdaSearch:
    def test_coarse_stops_above_prox_threshold(self):
        # one unit prox step zeroes d iff 2*lam >= 0.1^2 - 0.05^2, i.e. lam >= 0.00375
        hp = HomotopyParams(beta=3e-4)
        assert coarse_lambda(linear_toy(), hp, NmapgParams()) == pytest.approx(13 * 3e-4)

    def test_threshold_by_direct_prox_evaluation(self):
        obj = linear_toy()
        s = np.zeros(5)
        s[0] = 0.1
        assert np.any(obj.with_lambda(0.0037).prox(s, 1.0))
        assert not np.any(obj.with_lambda(0.0038).prox(s, 1.0))

    def test_search_returns_c_times_first_moving_weight(self):
        hp = HomotopyParams(beta=3e-4, c=10.0, fine_decay=0.5)
        assert lambda_search(linear_toy(), hp, NmapgParams()) == pytest.approx(10 * 13 * 3e-4 * 0.5)

    def test_tight_fine_decay_approaches_threshold(self):
        hp = HomotopyParams(beta=1e-4, c=1.0, fine_decay=0.999)
        lam = lambda_search(linear_toy(), hp, NmapgParams())
        assert 0.00375 * 0.999 < lam < 0.00375

    def test_zero_gradient_is_degenerate(self):
        bounds = BoxBounds(np.full(3, -0.05), np.full(3, 0.05))
        obj = CompositeObjective(LinearOracle(np.zeros(3)), 0.0, bounds)
        with pytest.raises(DegenerateOracleError):
            lambda_search(obj, HomotopyParams(), NmapgParams())

    def test_coarse_cap(self, monkeypatch):
        # a step that never zeroes runs into the 1e6 * beta cap
        import homotopy_attack.homotopy as h

        calls = []
        monkeypatch.setattr(h, "_single_step", lambda obj, *a: calls.append(obj.lam) or np.ones(5))
        with pytest.raises(DegenerateOracleError):
            coarse_lambda(linear_toy(), HomotopyParams(beta=1e-3), NmapgParams())
        assert len(calls) == 10**6
        assert calls[-1] == pytest.approx(1e3)


class TestTrigger:
    def test_examples(self):
        assert trigger_check(np.full(10, 0.001), 0.05, 0.3)
        assert not trigger_check(np.full(10, 0.045), 0.05, 0.3)
        assert not trigger_check(np.zeros(10), 0.05, 0.3)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-0.05, 0.05), min_size=1, max_size=20), st.floats(0.01, 0.99))
    def test_matches_definition(self, d, gamma):
        d = np.array(d)
        l0 = np.count_nonzero(np.abs(d) > 1e-12)
        expect = l0 > 0 and np.abs(d).sum() / l0 <= 0.05 * gamma
        assert trigger_check(d, 0.05, gamma) == expect


class TestPostAttack:
    def _setup(self, n=4):
        g = np.zeros(n)
        g[0] = -1.0
        return LinearOracle(g), BoxBounds(np.full(n, -0.05), np.full(n, 0.05))

    def test_zero_unchanged(self):
        oracle, b = self._setup()
        assert_array_equal(post_attack(np.zeros(4), oracle, b, PostAttackParams()), np.zeros(4))

    def test_negative_slope_pushes_to_wall(self):
        oracle, b = self._setup()
        d = np.array([0.01, 0.0, 0.0, 0.0])
        # each step adds 0.01 * (1 - 0.01) = 0.0099; five steps cross 0.05
        out = post_attack(d, oracle, b, PostAttackParams(iters_per_l0=10))
        assert_array_equal(out, [0.05, 0.0, 0.0, 0.0])
        one = post_attack(d, oracle, b, PostAttackParams(iters_per_l0=1))
        assert one[0] == pytest.approx(0.0199)

    @pytest.mark.parametrize("p", [1, 2, math.inf])
    def test_support_never_grows(self, p):
        rng = np.random.default_rng(0)
        for _ in range(30):
            g = rng.normal(size=12)
            b = BoxBounds(-rng.uniform(0, 0.1, 12), rng.uniform(0, 0.1, 12))
            d = np.where(rng.random(12) < 0.4, b.upper, 0.0)
            out = post_attack(d, LinearOracle(g), b, PostAttackParams(p=p, iters_per_l0=3))
            assert not np.any(out[d == 0])
            assert b.contains(out)


class TestAttack:
    def test_already_misclassified(self):
        m = affine_model(np.eye(2), np.zeros(2))
        x0 = np.array([0.9, 0.1])  # predicted class 0
        rep = homotopy_attack(m, x0, AttackGoal.nontargeted(1), 0.05)
        assert rep.success and rep.norms.l0 == 0 and rep.outer_iterations == 0

    @pytest.mark.parametrize("mode", ["full", "pure_homotopy", "nmapg_only"])
    def test_trained_model_modes(self, trained_model, correct_test_images, mode):
        for _, x0, y in correct_test_images[:2]:
            for goal in [AttackGoal.targeted((y + 1) % 10), AttackGoal.nontargeted(y)]:
                rep = homotopy_attack(trained_model, x0, goal, 0.05, mode=mode)
                b = compute_box_bounds(x0, 0.05)
                assert b.contains(rep.delta)
                assert rep.success == goal.satisfied_by(trained_model.predict(x0 + rep.delta))
                assert rep.success
                assert rep.predicted == trained_model.predict(x0 + rep.delta)

    def test_stage_records_respect_budget(self, trained_model, correct_test_images):
        hp = HomotopyParams()
        _, x0, y = correct_test_images[3]
        rep = homotopy_attack(trained_model, x0, AttackGoal.targeted((y + 4) % 10), 0.05, keep_traces=True)
        lams = rep.lambda_path
        assert all(b < a for a, b in zip(lams, lams[1:])) and all(l > 0 for l in lams)
        for stage, trace in zip(rep.stages, rep.traces):
            assert stage["budget"] in (hp.v, hp.v_small)
            assert stage["out"] <= stage["base"] + stage["budget"]
            assert all(row["l0"] <= stage["base"] + stage["budget"] for row in trace)

    def test_group_mode(self, trained_model, correct_test_images):
        _, x0, y = correct_test_images[0]
        part = build_tile_partition(x0.shape, 3)
        rep = homotopy_attack(trained_model, x0, AttackGoal.targeted((y + 2) % 10), 0.05, partition=part)
        assert rep.success
        assert rep.groups == part.count_nonzero(rep.delta)
        # support is a union of whole tiles' worth of budget, never more entries than kept groups allow
        assert rep.norms.l0 <= rep.groups * 27

    def test_exhaustion_returns_failure(self, trained_model, correct_test_images):
        _, x0, y = correct_test_images[0]
        rep = homotopy_attack(trained_model, x0, AttackGoal.targeted((y + 1) % 10), 1e-4,
                              HomotopyParams(max_outer=3))
        assert not rep.success and rep.outer_iterations == 3
        assert compute_box_bounds(x0, 1e-4).contains(rep.delta)

    def test_deterministic_reports(self, trained_model, correct_test_images):
        _, x0, y = correct_test_images[1]
        goal = AttackGoal.targeted((y + 3) % 10)
        a = homotopy_attack(trained_model, x0, goal, 0.05)
        b = homotopy_attack(trained_model, x0, goal, 0.05)
        assert a.to_json() == b.to_json()

    def test_record_roundtrip(self, trained_model, correct_test_images):
        _, x0, y = correct_test_images[2]
        rep = homotopy_attack(trained_model, x0, AttackGoal.nontargeted(y), 0.05)
        rec = json.loads(rep.to_json())
        assert "wall_time" not in rec
        assert AttackReport.delta_from_record(rec).tobytes() == rep.delta.tobytes()
        assert rec["norms"]["l0"] == len(rec["delta"]["indices"])
        assert "wall_time" in rep.to_record(include_timing=True)

    def test_rejects_unknown_mode(self, trained_model, correct_test_images):
        _, x0, y = correct_test_images[0]
        with pytest.raises(ValueError):
            homotopy_attack(trained_model, x0, AttackGoal.targeted(0), 0.05, mode="greedy")
