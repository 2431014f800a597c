import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from scatterfuse.geometry import (Correspondence, DegenerateConfiguration,
                                  EmptyCorrespondenceSet, Point2, TooFewCorrespondences,
                                  Transform2D, apply_transform, fit_transform, invert,
                                  load_correspondences, load_transform, read_numeric_csv,
                                  registration_error, save_correspondences, save_transform,
                                  transform_points)


def random_affine(rng, scale=2.0):
    while True:
        lin = rng.uniform(-scale, scale, (2, 2))
        if abs(np.linalg.det(lin)) > 0.2:
            return Transform2D(lin, rng.uniform(-50, 50, 2))


class TestTransform:
    def test_apply_examples(self):
        assert apply_transform(Transform2D.identity(), (3.5, -1)) == Point2(3.5, -1)
        assert apply_transform(Transform2D.translation(1, 2), (0, 0)) == Point2(1, 2)
        rot = Transform2D.from_params(np.pi / 2)
        assert_allclose(apply_transform(rot, (1, 0)), (0, 1), atol=1e-15)

    def test_rejects_singular_and_nonfinite(self):
        with pytest.raises(ValueError):
            Transform2D([[1, 2], [2, 4]], [0, 0])
        with pytest.raises(ValueError):
            Transform2D([[1, 0], [0, np.nan]], [0, 0])

    def test_compose_order(self):
        t = Transform2D.translation(1, 0)
        r = Transform2D.from_params(np.pi / 2)
        # rotate first, then translate
        assert_allclose(t.compose(r)((1, 0)), (1, 1), atol=1e-15)
        assert_allclose(r.compose(t)((1, 0)), (0, 2), atol=1e-15)

    def test_scalar_and_batch_agree_bitwise(self, rng):
        t = random_affine(rng)
        pts = rng.normal(size=(50, 2)) * 100
        batch = transform_points(t, pts)
        for p, q in zip(pts, batch):
            assert np.array_equal(transform_points(t, p), q)

    @given(st.integers(0, 2**32 - 1))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        t = random_affine(rng)
        p = rng.uniform(-1000, 1000, (20, 2))
        assert_allclose(invert(t)(t(p)), p, atol=1e-9)

    def test_json_round_trip(self, tmp_path, rng):
        t = random_affine(rng)
        save_transform(t, tmp_path / "t.json")
        doc = json.loads((tmp_path / "t.json").read_text())
        assert set(doc) == {"linear", "offset", "model"}
        u = load_transform(tmp_path / "t.json")
        assert np.array_equal(u.linear, t.linear) and np.array_equal(u.offset, t.offset)


class TestFit:
    def test_identity_affine(self):
        a = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        rep = fit_transform((a, a), "affine")
        assert_allclose(rep.transform.linear, np.eye(2), atol=1e-15)
        assert_allclose(rep.transform.offset, 0, atol=1e-15)
        assert_allclose(rep.residuals, 0, atol=1e-15)

    def test_translation(self):
        a = np.array([[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]])
        pairs = [Correspondence(Point2(*p), Point2(p[0] + 1.0, p[1] + 2.0)) for p in a]
        rep = fit_transform(pairs, "translation")
        assert_allclose(rep.transform.offset, (1.0, 2.0), atol=1e-14)
        assert rep.max_error < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_recovers_known_affine(self, seed):
        rng = np.random.default_rng(seed)
        t = random_affine(rng)
        a = rng.uniform(-100, 100, (5, 2))
        rep = fit_transform((a, t(a)), "affine")
        assert_allclose(rep.transform(a), t(a), atol=1e-9)
        assert rep.max_error < 1e-9

    @pytest.mark.parametrize("kind", ["rigid", "similarity"])
    def test_recovers_similarity(self, kind, rng):
        scale = 1.0 if kind == "rigid" else 1.7
        t = Transform2D.from_params(0.7, scale, 4.0, -3.0)
        a = rng.uniform(-10, 10, (6, 2))
        rep = fit_transform((a, t(a)), kind)
        assert_allclose(rep.transform.linear, t.linear, atol=1e-12)
        assert rep.max_error < 1e-9

    def test_rigid_never_reflects(self, rng):
        a = rng.uniform(-10, 10, (8, 2))
        b = a * np.array([-1.0, 1.0])
        rep = fit_transform((a, b), "rigid")
        assert np.linalg.det(rep.transform.linear) > 0

    def test_too_few(self):
        a = np.zeros((2, 2))
        with pytest.raises(TooFewCorrespondences):
            fit_transform((a, a), "affine")
        with pytest.raises(TooFewCorrespondences):
            fit_transform((a[:1], a[:1]), "rigid")
        with pytest.raises(TooFewCorrespondences):
            fit_transform((a[:0], a[:0]), "translation")

    def test_collinear_affine(self):
        a = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [5.0, 5.0]])
        with pytest.raises(DegenerateConfiguration):
            fit_transform((a, a + 1), "affine")

    @pytest.mark.parametrize("kind", ["translation", "rigid", "similarity", "affine"])
    def test_least_squares_optimality(self, kind, rng):
        a = rng.uniform(-20, 20, (12, 2))
        b = Transform2D.from_params(0.3, 1.1, 2, 1)(a) + rng.normal(0, 0.3, (12, 2))
        rep = fit_transform((a, b), kind)
        best = np.sum(rep.residuals**2)
        lin0 = rep.transform.linear
        for _ in range(100):
            # perturb within the model family
            if kind == "affine":
                lin = lin0 + rng.normal(0, 1e-3, (2, 2))
            elif kind == "translation":
                lin = lin0
            else:
                dth = rng.normal(0, 1e-3)
                ds = 1.0 if kind == "rigid" else 1 + rng.normal(0, 1e-3)
                lin = ds * Transform2D.from_params(dth).linear @ lin0
            off = rep.transform.offset + rng.normal(0, 1e-2, 2)
            other = registration_error((a, b), Transform2D(lin, off))
            assert np.sum(other.residuals**2) >= best - 1e-12

    @pytest.mark.parametrize("kind", ["translation", "rigid", "similarity"])
    def test_swap_consistency(self, kind, rng):
        # Noiseless pairs: the reverse fit is the inverse of the forward fit.
        # (With noise the similarity scale estimate is not symmetric.)
        t = Transform2D.from_params(-0.4, 1.0 if kind != "similarity" else 0.8, 3, 7)
        if kind == "translation":
            t = Transform2D.translation(3, 7)
        a = rng.uniform(-10, 10, (10, 2))
        b = t(a)
        fwd = fit_transform((a, b), kind).transform
        rev = fit_transform((b, a), kind).transform
        assert_allclose(invert(rev)(a), invert(invert(fwd))(a), atol=1e-6)
        assert_allclose(invert(fwd)(b), rev(b), atol=1e-6)


class TestRegistrationError:
    def test_exact(self, rng):
        t = random_affine(rng)
        a = rng.normal(size=(7, 2))
        rep = registration_error((a, t(a)), t)
        assert rep.mean_error < 1e-12 and rep.max_error < 1e-12

    def test_constructed_offset(self):
        a = np.column_stack([np.linspace(0, 10, 11), np.zeros(11)])
        b = a + np.array([0.0, 0.2])
        rep = registration_error((a, b), Transform2D.identity())
        assert_allclose(rep.mean_error, 0.2, rtol=1e-12)
        assert rep.mean_error <= rep.max_error

    def test_summaries(self):
        a = np.zeros((4, 2))
        b = np.array([[1.0, 0], [2.0, 0], [3.0, 0], [10.0, 0]])
        rep = registration_error((a, b), Transform2D.identity())
        assert rep.u_hat() == 4.0
        assert rep.u_hat("max") == 10.0
        assert rep.u_hat("median") == 2.5
        assert_allclose(rep.u_hat("p50"), 2.5)
        with pytest.raises(ValueError):
            rep.u_hat("mode")

    def test_empty(self):
        with pytest.raises(EmptyCorrespondenceSet):
            registration_error((np.zeros((0, 2)), np.zeros((0, 2))), Transform2D.identity())


class TestIO:
    def test_correspondence_round_trip(self, tmp_path, rng):
        a, b = rng.normal(size=(9, 2)), rng.normal(size=(9, 2))
        save_correspondences(a, b, tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "ax,ay,bx,by"
        a2, b2 = load_correspondences(tmp_path / "c.csv")
        assert np.array_equal(a, a2) and np.array_equal(b, b2)

    def test_malformed_line_is_named(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("ax,ay,bx,by\n1,2,3,4\n1,2,x,4\n")
        with pytest.raises(ValueError, match=r"c\.csv:3"):
            read_numeric_csv(p, ["ax", "ay", "bx", "by"])

    def test_missing_column(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("ax,ay,bx\n1,2,3\n")
        with pytest.raises(ValueError, match="missing columns"):
            load_correspondences(p)
