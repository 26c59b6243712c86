import math

import pytest
from hypothesis import given, strategies as st

from upmdp_cert.expr import BinOp, ExprSyntaxError, Num, OneMinus, Param, parse_expr


def test_precedence():
    assert parse_expr("1 + 2 * 3").evaluate({}) == 7
    assert parse_expr("(1 + 2) * 3").evaluate({}) == 9
    assert parse_expr("8 / 4 / 2").evaluate({}) == 1


def test_parameters_and_constants():
    e = parse_expr("(1 - q) / 3")
    assert e.params() == {"q"}
    assert not e.is_constant()
    assert parse_expr("0.25 + 0.5").is_constant()
    assert math.isclose(e.evaluate({"q": 0.4}), 0.2)


def test_one_minus_is_canonical():
    assert isinstance(parse_expr("1 - p"), OneMinus)
    assert parse_expr("1 - p") == parse_expr("1-(p)")
    assert isinstance(parse_expr("2 - p"), BinOp)


def test_atoms():
    assert parse_expr("p") == Param("p")
    assert parse_expr("0.5") == Num(0.5)


@pytest.mark.parametrize("text", ["", "p +", "(p", "p)", "2 ** p", "p q", "1 - "])
def test_syntax_errors(text):
    with pytest.raises(ExprSyntaxError):
        parse_expr(text)


def test_error_position():
    with pytest.raises(ExprSyntaxError) as info:
        parse_expr("p + $")
    assert info.value.pos == 4


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_str_round_trip(p, q):
    for text in ["p * q / 3", "1 - 2 * q / 3", "(1 - p) * (q / 3)", "0.4 + p / 5"]:
        e = parse_expr(text)
        again = parse_expr(str(e))
        assert again == e
        assert again.evaluate({"p": p, "q": q}) == e.evaluate({"p": p, "q": q})
