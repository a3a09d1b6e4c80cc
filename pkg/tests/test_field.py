import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from simplexpde.field import (AdtfError, ClassMask, DomainError, Grid2D, SimplexField, argmax_mask, class_mass,
                              project_field, project_simplex, quantize, read_adtf, read_adtf_array,
                              simplex_violation, write_adtf, write_adtf_array)


def reference_projection(v):
    """Bisection on the threshold: find theta with sum(max(v - theta, 0)) = 1."""
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.maximum(v - mid, 0).sum() > 1:
            lo = mid
        else:
            hi = mid
    return np.maximum(v - 0.5 * (lo + hi), 0)


finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
vectors = st.integers(2, 6).flatmap(lambda k: arrays(np.float64, k, elements=finite))


class TestGrid:
    def test_rejects_degenerate(self):
        with pytest.raises(DomainError):
            Grid2D(1, 5)
        with pytest.raises(DomainError):
            Grid2D(4, 4, 0.0)

    def test_shape(self):
        assert Grid2D(3, 5).shape == (3, 5)


class TestProjectSimplex:
    def test_on_simplex_is_fixed(self):
        np.testing.assert_allclose(project_simplex([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5], atol=1e-15)

    def test_symmetric_negative(self):
        np.testing.assert_allclose(project_simplex([-1, -1, -1]), [1 / 3] * 3, atol=1e-15)

    def test_threshold_example(self):
        # theta = (1.6 - 1) / 2 = 0.3
        np.testing.assert_allclose(project_simplex([0.8, 0.8, 0.0]), [0.5, 0.5, 0.0], atol=1e-15)

    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            project_simplex([np.nan, 0.0])
        with pytest.raises(DomainError):
            project_simplex([np.inf, 0.0])

    @given(vectors)
    def test_matches_bisection_oracle(self, v):
        out = project_simplex(v)
        assert out.min() >= 0
        assert abs(out.sum() - 1) <= 1e-9
        np.testing.assert_allclose(out, reference_projection(v), atol=1e-9)

    @given(vectors)
    def test_idempotent(self, v):
        once = project_simplex(v)
        np.testing.assert_allclose(project_simplex(once), once, atol=1e-12)

    @given(st.integers(2, 6).flatmap(lambda k: st.tuples(arrays(np.float64, k, elements=finite),
                                                         arrays(np.float64, k, elements=finite))))
    def test_one_lipschitz(self, pair):
        a, b = pair
        assert np.linalg.norm(project_simplex(a) - project_simplex(b)) <= np.linalg.norm(a - b) + 1e-9

    @given(vectors, st.integers(0, 2**31 - 1))
    def test_optimal_against_sampled_simplex_points(self, v, seed):
        out = project_simplex(v)
        rng = np.random.default_rng(seed)
        others = rng.dirichlet(np.ones(len(v)), size=20)
        d_out = np.linalg.norm(v - out)
        assert np.all(np.linalg.norm(v - others, axis=1) >= d_out - 1e-9)


class TestProjectField:
    def test_one_hot_fixed(self):
        labels = np.array([[0, 1], [2, 1]])
        f = SimplexField.one_hot(labels, 3)
        out = project_field(f.values)
        assert np.array_equal(out.values, f.values)

    def test_two_zero_zero(self):
        raw = np.zeros((3, 4, 5))
        raw[0] = 2.0
        out = project_field(raw)
        assert np.array_equal(out.values[0], np.ones((4, 5)))
        assert not out.values[1:].any()

    def test_all_zero_k4(self):
        out = project_field(np.zeros((4, 3, 3)))
        np.testing.assert_allclose(out.values, 0.25, atol=1e-15)

    def test_rejects_nan(self):
        raw = np.zeros((2, 3, 3))
        raw[0, 1, 1] = np.nan
        with pytest.raises(DomainError):
            project_field(raw)

    @given(arrays(np.float64, (3, 4, 4), elements=finite))
    def test_per_pixel_oracle(self, raw):
        out = project_field(raw).values
        for i in range(4):
            for j in range(4):
                np.testing.assert_allclose(out[:, i, j], reference_projection(raw[:, i, j]), atol=1e-9)

    @given(st.integers(0, 2**31 - 1))
    def test_on_simplex_unchanged(self, seed):
        rng = np.random.default_rng(seed)
        vals = np.moveaxis(rng.dirichlet(np.ones(4), size=(5, 6)), -1, 0)
        out = project_field(vals).values
        assert np.max(np.abs(out - vals)) <= 1e-12


class TestSimplexField:
    def test_rejects_off_simplex(self):
        with pytest.raises(DomainError):
            SimplexField(Grid2D(2, 2), np.full((2, 2, 2), 0.6))

    def test_rejects_nan(self):
        v = np.full((2, 2, 2), 0.5)
        v[0, 0, 0] = np.nan
        with pytest.raises(DomainError):
            SimplexField(Grid2D(2, 2), v)

    def test_rejects_wrong_shape(self):
        with pytest.raises(DomainError):
            SimplexField(Grid2D(3, 3), np.full((2, 2, 2), 0.5))

    def test_values_read_only(self):
        f = SimplexField.uniform(Grid2D(2, 2), 2)
        with pytest.raises(ValueError):
            f.values[0, 0, 0] = 1.0

    def test_tolerance_boundary(self):
        v = np.full((2, 2, 2), 0.5)
        v[0] += 5e-7
        SimplexField(Grid2D(2, 2), v)
        v[0] += 1e-6
        with pytest.raises(DomainError):
            SimplexField(Grid2D(2, 2), v)


class TestArgmax:
    def test_one_hot_support(self):
        labels = np.array([[0, 1, 1], [2, 0, 1]])
        f = SimplexField.one_hot(labels, 3)
        for k in range(3):
            assert np.array_equal(argmax_mask(f, k).bits, labels == k)

    def test_uniform_ties_to_lowest(self):
        f = SimplexField.uniform(Grid2D(3, 3), 3)
        assert argmax_mask(f, 0).bits.all()
        assert not argmax_mask(f, 1).bits.any()

    def test_pixel_tie(self):
        v = np.zeros((3, 2, 2))
        v[:, :, :] = np.array([0.4, 0.4, 0.2])[:, None, None]
        f = SimplexField(Grid2D(2, 2), v)
        assert argmax_mask(f, 0).bits.all()
        assert not argmax_mask(f, 1).bits.any()

    def test_index_bounds(self):
        with pytest.raises(IndexError):
            argmax_mask(SimplexField.uniform(Grid2D(2, 2), 2), 2)

    @given(st.integers(0, 2**31 - 1), st.integers(2, 5))
    def test_partition(self, seed, K):
        rng = np.random.default_rng(seed)
        vals = np.moveaxis(rng.dirichlet(np.ones(K), size=(6, 7)), -1, 0)
        # force some exact ties
        vals[:, 0, 0] = 1.0 / K
        f = SimplexField(Grid2D(6, 7), vals)
        masks = np.stack([argmax_mask(f, k).bits for k in range(K)])
        assert np.array_equal(masks.sum(axis=0), np.ones((6, 7)))


class TestClassMass:
    def test_uniform(self):
        assert class_mass(SimplexField.uniform(Grid2D(4, 4), 2), 0) == 8.0

    def test_one_hot(self):
        f = SimplexField.one_hot(np.zeros((8, 8), dtype=int), 2)
        assert class_mass(f, 0) == 64.0

    def test_single_pixel(self):
        v = np.zeros((2, 3, 3))
        v[1] = 1.0
        v[0, 1, 1], v[1, 1, 1] = 0.3, 0.7
        assert class_mass(SimplexField(Grid2D(3, 3), v), 0) == pytest.approx(0.3, abs=1e-15)

    def test_spacing_scales(self):
        f = SimplexField.uniform(Grid2D(4, 4, 0.5), 2)
        assert class_mass(f, 0) == pytest.approx(2.0)

    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 3.0))
    def test_total_mass(self, seed, h):
        rng = np.random.default_rng(seed)
        vals = np.moveaxis(rng.dirichlet(np.ones(3), size=(5, 9)), -1, 0)
        f = SimplexField(Grid2D(5, 9, h), vals)
        total = sum(class_mass(f, k) for k in range(3))
        assert abs(total - h * h * 45) <= 1e-6 * 45 * max(1.0, h * h)


class TestClassMask:
    def test_shape_checked(self):
        with pytest.raises(DomainError):
            ClassMask(Grid2D(3, 3), np.zeros((2, 2), dtype=bool))

    def test_count(self):
        assert ClassMask.from_bits(np.eye(4, dtype=bool)).count() == 4


class TestAdtf:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        vals = quantize(np.moveaxis(rng.dirichlet(np.ones(3), size=(5, 7)), -1, 0))
        f = SimplexField(Grid2D(5, 7, 0.5), vals)
        write_adtf(tmp_path / "f.adtf", f)
        g = read_adtf(tmp_path / "f.adtf")
        assert g == f
        assert g.grid.spacing == 0.5

    def test_header_and_layout(self, tmp_path):
        vals = np.arange(2 * 2 * 3, dtype=np.float64).reshape(3, 2, 2)
        write_adtf_array(tmp_path / "a.adtf", vals)
        raw = (tmp_path / "a.adtf").read_bytes()
        header, payload = raw.split(b"\n", 1)
        assert header == b'{"magic":"ADTF","version":1,"height":2,"width":2,"classes":3,"spacing":1.0}'
        data = np.frombuffer(payload, dtype="<f4")
        # class index innermost: pixel (0,0) holds classes 0,1,2 first
        assert list(data[:3]) == [vals[0, 0, 0], vals[1, 0, 0], vals[2, 0, 0]]
        assert len(data) == 12

    def test_truncated_payload_names_file(self, tmp_path):
        write_adtf_array(tmp_path / "t.adtf", np.zeros((2, 3, 3)))
        path = tmp_path / "t.adtf"
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(AdtfError, match="t.adtf.*payload length"):
            read_adtf_array(path)

    def test_bad_magic_and_version(self, tmp_path):
        p = tmp_path / "x.adtf"
        p.write_bytes(b'{"magic":"NOPE","version":1,"height":2,"width":2,"classes":1}\n' + bytes(16))
        with pytest.raises(AdtfError, match="magic"):
            read_adtf_array(p)
        p.write_bytes(b'{"magic":"ADTF","version":2,"height":2,"width":2,"classes":1}\n' + bytes(16))
        with pytest.raises(AdtfError, match="version"):
            read_adtf_array(p)
        p.write_bytes(b"not json\n")
        with pytest.raises(AdtfError, match="header"):
            read_adtf_array(p)


def test_simplex_violation_reports_worst_case():
    v = np.full((2, 2, 2), 0.5)
    v[0, 0, 0] = -0.1
    v[1, 0, 0] = 1.1
    assert simplex_violation(v) == pytest.approx(0.1)
