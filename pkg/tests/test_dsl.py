from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contraction_lab import dsl
from contraction_lab.errors import DSLSyntaxError, EvaluationError, UnknownIdentifier
from contraction_lab.model import parse_field


def test_negation_field():
    f = parse_field("-x1", 1)
    assert f(np.array([[2.0]]))[0, 0] == -2.0


def test_cubic_field():
    f = parse_field("x1 - x1^3", 1)
    assert f(np.array([[1.5]]))[0, 0] == pytest.approx(-1.875, abs=1e-15)


def _python_twin(source: str):
    """Independent evaluator: the same text run through Python's own arithmetic."""
    text = source.replace("^", "**").replace("norm(x)", "math.hypot(x1, x2)")
    return lambda x1, x2: eval(text, {"math": math}, {"x1": x1, "x2": x2})


def test_norm_field_against_second_evaluator():
    parts = ["-(norm(x)^0.5)*x1", "-(norm(x)^0.5)*x2"]
    f = parse_field(", ".join(parts), 2)
    assert np.allclose(f(np.array([[1.0, 0.0]]))[0], [-1.0, 0.0], atol=0)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(100, 2)) * 3
    got = f(X)
    twins = [_python_twin(p) for p in parts]
    want = np.array([[t(*x) for t in twins] for x in X])
    np.testing.assert_allclose(got, want, rtol=1e-14, atol=0)


def test_power_binds_right_and_above_unary_minus():
    names = dsl.state_variables(1)
    assert dsl.evaluate_scalar(dsl.parse_expression("2^3^2", names), [0.0]) == 512.0
    assert dsl.evaluate_scalar(dsl.parse_expression("-2^2", names), [0.0]) == -4.0


def test_syntax_error_reports_byte_offset_and_expected():
    with pytest.raises(DSLSyntaxError) as info:
        dsl.parse_expression("x1 + * 2", ("x1",))
    assert info.value.offset == 5
    assert info.value.expected


def test_unknown_identifier_offset():
    with pytest.raises(UnknownIdentifier) as info:
        dsl.parse_expression("x1 + y", ("x1",))
    assert info.value.name == "y" and info.value.offset == 5


@pytest.mark.parametrize("source", ["log(x1)", "sqrt(x1)", "1/x1", "x1^0.5"])
def test_undefined_points_raise(source):
    node = dsl.parse_expression(source, ("x1",))
    with pytest.raises(EvaluationError):
        dsl.evaluate(node, np.array([[0.0], [-1.0]]))


def _trees(d: int):
    leaves = st.one_of(
        st.floats(0, 10, allow_nan=False).map(dsl.Num),
        st.integers(0, d - 1).map(lambda i: dsl.Var(f"x{i + 1}", i)),
        st.just(dsl.Norm()),
    )

    def extend(children):
        return st.one_of(
            children.map(dsl.Neg),
            st.tuples(st.sampled_from("+-*/"), children, children).map(lambda t: dsl.BinOp(*t)),
            st.tuples(children, st.integers(0, 3)).map(lambda t: dsl.BinOp("^", t[0], dsl.Num(float(t[1])))),
            st.tuples(st.sampled_from(dsl.FUNCTIONS), children).map(lambda t: dsl.Call(*t)),
        )

    return st.recursive(leaves, extend, max_leaves=12)


def _outcome(node, X):
    try:
        return dsl.evaluate(node, X)
    except EvaluationError:
        return "error"


@settings(max_examples=1000, deadline=None)
@given(_trees(2), st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=2))
def test_print_parse_evaluate_roundtrip(node, point):
    X = np.array([point])
    again = dsl.parse_expression(dsl.to_source(node), dsl.state_variables(2))
    a, b = _outcome(node, X), _outcome(again, X)
    if isinstance(a, str):
        assert b == "error"
    else:
        np.testing.assert_array_equal(a, b)
