import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsegain import model
from sparsegain.model import (
    AdmmOptions,
    DimensionMismatch,
    InputBound,
    LtiSystem,
    NegativeParameter,
    NotPositiveDefinite,
    ParseError,
    StructurePattern,
    SynthesisProblem,
    UnsupportedFeature,
)


def two_state_problem(**kwargs):
    system = LtiSystem([[-1.0, 0.2], [0.0, -2.0]], [[1.0], [0.5]], [[1.0, 0.0]])
    defaults = dict(system=system, q_weight=np.eye(2), r_weight=np.eye(1),
                    lam=0.0, noise_cov=np.eye(2))
    defaults.update(kwargs)
    return SynthesisProblem(**defaults)


class TestValidate:
    def test_accepts_identity_weights(self):
        problem = two_state_problem()
        assert model.validate(problem) is problem

    def test_zero_r_not_positive_definite(self):
        violations = model.validate(two_state_problem(r_weight=[[0.0]]))
        assert isinstance(violations, list)
        assert any(isinstance(v, NotPositiveDefinite) and "r_weight" in str(v)
                   for v in violations)

    def test_mask_shape_mismatch(self):
        bad = StructurePattern(np.ones((2, 2), dtype=bool))
        violations = model.validate(two_state_problem(pattern=bad))
        assert any(isinstance(v, DimensionMismatch) for v in violations)

    def test_negative_lambda(self):
        violations = model.validate(two_state_problem(lam=-1.0))
        assert any(isinstance(v, NegativeParameter) for v in violations)

    def test_q_slightly_negative_within_tolerance(self):
        q = np.eye(2) * 1e-12
        q[0, 0] = -1e-10
        assert model.validate(two_state_problem(q_weight=q)) is not None


class TestLtiSystem:
    def test_shapes(self):
        s = LtiSystem(np.eye(3), np.ones((3, 2)), np.ones((1, 3)))
        assert (s.n, s.m, s.p) == (3, 2, 1)

    def test_rejects_b_rows(self):
        with pytest.raises(DimensionMismatch):
            LtiSystem(np.eye(3), np.ones((2, 2)), np.ones((1, 3)))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            LtiSystem([[np.nan]], [[1.0]], [[1.0]])

    def test_arrays_read_only(self):
        s = LtiSystem(np.eye(2), np.eye(2), np.eye(2))
        with pytest.raises(ValueError):
            s.a_matrix[0, 0] = 5.0


class TestLoadProblem:
    def test_minimal_file_defaults(self):
        problem = model.load_problem('{"A": [[-1.0]], "B": [[1.0]], "C": [[1.0]]}')
        assert problem.lam == 0.0
        assert np.array_equal(problem.noise_cov, np.eye(1))
        assert problem.pattern.mask.all()
        assert np.array_equal(problem.q_weight, np.eye(1))

    def test_omitting_n_defaults_to_identity(self):
        text = '{"A": [[-1.0, 0.0],[0.0,-2.0]], "B": [[1.0],[0.0]], "C": [[1.0, 0.0]]}'
        problem = model.load_problem(text)
        assert np.array_equal(problem.noise_cov, np.eye(2))

    def test_ragged_matrix_named_in_error(self):
        with pytest.raises(ParseError, match="'B'"):
            model.load_problem('{"A": [[-1.0]], "B": [[1.0, 2.0], [1.0]], "C": [[1.0]]}')

    def test_unknown_key_warns(self):
        with pytest.warns(UserWarning, match="unknown problem keys"):
            model.load_problem('{"A": [[-1.0]], "B": [[1.0]], "C": [[1.0]], "frobnicate": 1}')

    def test_output_bound_rejected(self):
        text = ('{"A": [[-1.0]], "B": [[1.0]], "C": [[1.0]], '
                '"input_bound": {"norm": "two", "u_max": 1.0, "x0": [1.0], "y_max": 2.0}}')
        with pytest.raises(UnsupportedFeature):
            model.load_problem(text)

    def test_input_bound_parsed(self):
        text = ('{"A": [[-1.0]], "B": [[1.0]], "C": [[1.0]], '
                '"input_bound": {"norm": "inf", "u_max": 3.0, "x0": [0.5]}}')
        problem = model.load_problem(text)
        assert problem.input_bound.norm_kind == "inf"
        assert problem.input_bound.u_max == 3.0

    def test_invalid_json_parse_error(self):
        with pytest.raises(ParseError, match="line"):
            model.load_problem("{not json")


class TestRoundTrip:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_serialize_load_identical(self, seed):
        rng = np.random.default_rng(seed)
        n, m, p = 3, 2, 2
        system = LtiSystem(rng.normal(size=(n, n)), rng.normal(size=(n, m)),
                           rng.normal(size=(p, n)))
        q = rng.normal(size=(n, n))
        problem = SynthesisProblem(
            system=system, q_weight=q @ q.T, r_weight=np.eye(m) * rng.uniform(0.5, 2.0),
            lam=float(rng.uniform(0, 5)), noise_cov=np.eye(n),
            pattern=StructurePattern(rng.random((m, p)) > 0.3),
            input_bound=InputBound("two", float(rng.uniform(0.5, 4.0)), rng.normal(size=n)),
        )
        text = model.serialize(problem)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            again = model.load_problem(text)
        assert np.array_equal(again.system.a_matrix, problem.system.a_matrix)
        assert np.array_equal(again.q_weight, problem.q_weight)
        assert np.array_equal(again.pattern.mask, problem.pattern.mask)
        assert again.lam == problem.lam
        assert np.array_equal(again.input_bound.x0, problem.input_bound.x0)
        assert model.serialize(again) == text

    def test_options_round_trip(self):
        opts = AdmmOptions(penalty_rho=55.0, eps_star=1e-5)
        problem = two_state_problem()
        text = model.serialize(problem, opts)
        parsed = model.load_options(text)
        assert parsed.penalty_rho == 55.0
        assert parsed.eps_star == 1e-5


class TestAdmmOptions:
    def test_defaults(self):
        opts = AdmmOptions()
        assert opts.penalty_rho == 100.0
        assert opts.reweight_delta == 1e-4
        assert opts.eps_star == 1e-4
        assert opts.truncation_mode == "certified"

    def test_rejects_nonpositive(self):
        with pytest.raises(NegativeParameter):
            AdmmOptions(penalty_rho=0.0)

    def test_manual_mode_needs_xi(self):
        with pytest.raises(NegativeParameter):
            AdmmOptions(truncation_mode="manual")
        assert AdmmOptions(truncation_mode="manual", manual_xi=0.1).manual_xi == 0.1


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10_000),
       st.floats(min_value=0.1, max_value=10.0))
def test_pattern_set_closed_under_addition_and_scaling(seed, alpha):
    rng = np.random.default_rng(seed)
    mask = rng.random((3, 4)) > 0.4
    pattern = StructurePattern(mask)
    k1 = pattern.apply(rng.normal(size=(3, 4)))
    k2 = pattern.apply(rng.normal(size=(3, 4)))
    assert np.array_equal(pattern.apply(k1 + k2), k1 + k2)
    assert np.array_equal(pattern.apply(alpha * k1), alpha * k1)
