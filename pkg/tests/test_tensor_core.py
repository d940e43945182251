import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from homotopy_attack.tensor_core import (
    BoxBounds,
    GroupPartition,
    TensorFormatError,
    compute_box_bounds,
    decode_tensor,
    encode_tensor,
    load_tensor,
    lp_norms,
    project_box,
    save_tensor,
    truncate_top_k,
    truncate_top_k_groups,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


class TestBoxBounds:
    @pytest.mark.parametrize(
        "x, lo, hi",
        [(0.0, 0.0, 0.05), (0.5, -0.05, 0.05), (0.98, -0.05, 0.02)],
    )
    def test_pixel_examples(self, x, lo, hi):
        b = compute_box_bounds(np.array([x]), 0.05)
        assert_allclose(b.lower, [lo], atol=1e-15)
        assert_allclose(b.upper, [hi], atol=1e-15)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            compute_box_bounds(np.array([1.2]), 0.05)
        with pytest.raises(ValueError):
            compute_box_bounds(np.array([-0.1]), 0.05)
        with pytest.raises(ValueError):
            compute_box_bounds(np.array([0.5]), 0.0)
        with pytest.raises(ValueError):
            compute_box_bounds(np.array([np.nan]), 0.1)

    def test_box_must_contain_zero(self):
        with pytest.raises(ValueError):
            BoxBounds(np.array([0.1]), np.array([0.2]))
        with pytest.raises(ValueError):
            BoxBounds(np.array([0.0]), np.array([-0.1]))
        with pytest.raises(ValueError):
            BoxBounds(np.zeros(2), np.zeros(3))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 20, elements=st.floats(0, 1)), st.floats(1e-4, 1.0))
    def test_bounds_respect_both_constraints(self, x0, eps):
        b = compute_box_bounds(x0, eps)
        assert np.all(np.maximum(np.abs(b.lower), np.abs(b.upper)) <= eps)
        assert np.all(x0 + b.lower >= 0) and np.all(x0 + b.upper <= 1)
        assert np.all(b.lower <= 0) and np.all(b.upper >= 0)


class TestProjectBox:
    def test_examples(self):
        b = BoxBounds(np.array([-0.05, -0.05, 0.0]), np.array([0.05, 0.05, 0.05]))
        assert_array_equal(project_box(np.array([0.1, 0.01, -1.0]), b), [0.05, 0.01, 0.0])

    def test_shape_mismatch(self):
        b = BoxBounds(np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            project_box(np.zeros(3), b)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 15, elements=finite), arrays(np.float64, 15, elements=st.floats(0, 1)))
    def test_idempotent(self, v, w):
        b = BoxBounds(-w / 2, w)
        once = project_box(v, b)
        assert_array_equal(project_box(once, b), once)
        assert b.contains(once)


class TestNorms:
    def test_hand_example(self):
        n = lp_norms(np.array([0.05, 0.0, -0.03]), zero_tol=0.0)
        assert n.l0 == 2
        assert n.l1 == pytest.approx(0.08)
        assert n.l2 == pytest.approx(math.sqrt(0.0034))
        assert n.linf == pytest.approx(0.05)

    def test_zero(self):
        assert lp_norms(np.zeros(5)).as_dict() == {"l0": 0, "l1": 0.0, "l2": 0.0, "linf": 0.0}

    def test_tolerance_filters_dust(self):
        assert lp_norms(np.array([1e-15, 0.05]), zero_tol=1e-12).l0 == 1

    def test_chain_on_random_tensors(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            d = rng.normal(size=rng.integers(1, 30)) * (rng.random() < 0.9)
            d[rng.random(d.size) < 0.5] = 0.0
            n = lp_norms(d, zero_tol=0.0)
            assert n.linf <= n.l1 + 1e-15
            assert n.l2 <= n.l1 + 1e-12
            assert n.l1 <= n.l0 * n.linf + 1e-12


class TestTruncation:
    def test_examples(self):
        d = np.array([0.3, -0.5, 0.1])
        assert_array_equal(truncate_top_k(d, 2), [0.3, -0.5, 0.0])
        assert_array_equal(truncate_top_k(d, 0), np.zeros(3))
        assert_array_equal(truncate_top_k(d, 5), d)

    def test_ties_lowest_index_first(self):
        d = np.array([0.05, -0.05, 0.05, 0.05])
        assert_array_equal(truncate_top_k(d, 2), [0.05, -0.05, 0.0, 0.0])

    def test_ties_use_tiebreak_before_index(self):
        d = np.array([0.05, -0.05, 0.05, 0.01])
        out = truncate_top_k(d, 2, tiebreak=np.array([0.0, 1.0, 2.0, 9.0]))
        assert_array_equal(out, [0.0, -0.05, 0.05, 0.0])

    def test_input_untouched(self):
        d = np.array([0.3, -0.5, 0.1])
        truncate_top_k(d, 1)
        assert_array_equal(d, [0.3, -0.5, 0.1])

    def test_groups_example(self):
        p = GroupPartition([[0, 1], [2, 3]])
        out = truncate_top_k_groups(np.array([0.1, 0.1, 0.2, 0.0]), p, 1)
        assert_array_equal(out, [0.0, 0.0, 0.2, 0.0])
        d = np.array([0.1, 0.1, 0.2, 0.0])
        assert_array_equal(truncate_top_k_groups(d, p, 2), d)

    @settings(max_examples=300, deadline=None)
    @given(arrays(np.float64, 12, elements=finite), st.integers(0, 14))
    def test_never_increases_norms(self, d, k):
        out = truncate_top_k(d, k)
        a, b = lp_norms(d), lp_norms(out)
        assert b.l0 <= min(a.l0, k)
        assert b.l1 <= a.l1 and b.l2 <= a.l2 and b.linf <= a.linf
        kept = out != 0
        assert_array_equal(out[kept], d[kept])

    def test_singleton_groups_match_elementwise(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 20))
            d = rng.choice([0.0, 0.05, -0.05, 0.02], size=n) * (rng.random(n) < 0.7)
            k = int(rng.integers(0, n + 2))
            p = GroupPartition.singletons(n)
            assert_array_equal(truncate_top_k_groups(d, p, k), truncate_top_k(d, k))


class TestGroupPartition:
    def test_rejects_overlap_gap_and_empty(self):
        with pytest.raises(ValueError, match="overlap"):
            GroupPartition([[0, 1], [1, 2]])
        with pytest.raises(ValueError, match="cover"):
            GroupPartition([[0], [2]], 3)
        with pytest.raises(ValueError):
            GroupPartition([[0], []])
        with pytest.raises(ValueError):
            GroupPartition([])

    def test_counts(self):
        p = GroupPartition([[0, 1], [2], [3, 4, 5]])
        assert p.m == 3 and p.n == 6
        assert p.count_nonzero(np.array([0, 0, 1.0, 0, 0, -2.0])) == 2
        with pytest.raises(ValueError):
            p.count_nonzero(np.zeros(4))


class TestTensorFile:
    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
                  elements=st.floats(allow_nan=False)))
    def test_roundtrip_bit_exact(self, t):
        out = decode_tensor(encode_tensor(t))
        assert out.shape == t.shape
        assert out.tobytes() == t.tobytes()

    def test_layout(self):
        blob = encode_tensor(np.arange(6.0).reshape(2, 3))
        assert blob[:4] == b"TSR1"
        assert struct.unpack("<3I", blob[4:16]) == (2, 2, 3)
        assert struct.unpack("<6d", blob[16:]) == (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)

    def test_corruption(self):
        blob = encode_tensor(np.ones((2, 2)))
        with pytest.raises(TensorFormatError):
            decode_tensor(b"XXXX" + blob[4:])
        with pytest.raises(TensorFormatError):
            decode_tensor(blob[:-3])
        with pytest.raises(TensorFormatError):
            decode_tensor(blob[:10])
        with pytest.raises(TensorFormatError):
            decode_tensor(blob + b"\x00" * 8)

    def test_file_roundtrip(self, tmp_path):
        t = np.random.default_rng(0).normal(size=(3, 4, 2))
        save_tensor(tmp_path / "t.tsr", t)
        assert load_tensor(tmp_path / "t.tsr").tobytes() == t.tobytes()
