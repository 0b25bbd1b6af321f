"""Binary success/failure validators for equation-writing and tool-call tasks.

Every check is a pure function returning a :class:`VerifierOutcome` whose
category pins down exactly one failure mode, so downstream error breakdowns
always partition cleanly.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Optional, Union

OPS = ("+", "-", "*", "/")

COUNTDOWN_CATEGORIES = ("InvalidEquation", "WrongNumbers", "MissedTarget")
TOOLCALL_CATEGORIES = ("ToolChoiceError", "ParameterError", "FormatError")


class ParseError(ValueError):
    """Raised when text does not conform to the arithmetic grammar."""


class DivisionByZero(ArithmeticError):
    """Raised when an expression divides by an exactly-zero subexpression."""


# --- expression trees ---------------------------------------------------


@dataclass(frozen=True)
class Lit:
    value: int

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("literals are non-negative")


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown operator {self.op!r}")


Expr = Union[Lit, BinOp]


@dataclass(frozen=True)
class VerifierOutcome:
    """Success flag plus a single failure category and human-readable detail."""

    success: bool
    category: str
    detail: str = ""

    def __post_init__(self):
        if self.success != (self.category == "Success"):
            raise ValueError("success flag must mirror the Success category")


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict[str, Any]

    def __post_init__(self):
        if not self.name:
            raise ValueError("tool call name must be nonempty")


# --- boxed answer extraction --------------------------------------------

_BOX_MARKER = "\\boxed{"


def extract_answer(model_output: str) -> Optional[str]:
    """Return the contents of the last balanced ``\\boxed{...}``, or None."""
    best = None
    start = model_output.find(_BOX_MARKER)
    while start != -1:
        depth = 1
        i = start + len(_BOX_MARKER)
        while i < len(model_output) and depth > 0:
            if model_output[i] == "{":
                depth += 1
            elif model_output[i] == "}":
                depth -= 1
            i += 1
        if depth == 0:
            best = model_output[start + len(_BOX_MARKER) : i - 1]
        start = model_output.find(_BOX_MARKER, start + 1)
    return best


# --- arithmetic grammar ---------------------------------------------------
#
#   expr   := term (('+'|'-') term)*
#   term   := factor (('*'|'/') factor)*
#   factor := INT | '(' expr ')'
#
# Left-associative, standard precedence. Anything else (unary minus,
# exponents, floats, variables) is a ParseError.

_TOKEN_RE = re.compile(r"\s*(?:(\d+)|([+\-*/()]))")


def _tokenize(text: str) -> list[str]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            stripped = text[pos:].strip()
            if not stripped:
                break
            raise ParseError(f"unexpected character {stripped[0]!r}")
        tokens.append(m.group(1) or m.group(2))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Optional[str]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> str:
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of input")
        self.pos += 1
        return tok

    def parse_expr(self) -> Expr:
        node = self.parse_term()
        while self.peek() in ("+", "-"):
            op = self.next()
            node = BinOp(op, node, self.parse_term())
        return node

    def parse_term(self) -> Expr:
        node = self.parse_factor()
        while self.peek() in ("*", "/"):
            op = self.next()
            node = BinOp(op, node, self.parse_factor())
        return node

    def parse_factor(self) -> Expr:
        tok = self.next()
        if tok == "(":
            node = self.parse_expr()
            if self.next() != ")":
                raise ParseError("expected ')'")
            return node
        if tok.isdigit():
            return Lit(int(tok))
        raise ParseError(f"unexpected token {tok!r}")


def parse_expression(text: str) -> Expr:
    """Parse +,-,*,/ arithmetic over non-negative integer literals."""
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError("empty expression")
    parser = _Parser(tokens)
    node = parser.parse_expr()
    if parser.peek() is not None:
        raise ParseError(f"trailing token {parser.peek()!r}")
    return node


_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def render_expression(e: Expr) -> str:
    """Render with the minimal parentheses that re-parse to the same tree."""
    if isinstance(e, Lit):
        return str(e.value)
    left = render_expression(e.left)
    right = render_expression(e.right)
    prec = _PRECEDENCE[e.op]
    if isinstance(e.left, BinOp) and _PRECEDENCE[e.left.op] < prec:
        left = f"({left})"
    # the grammar is left-associative, so a same-precedence right child
    # would re-associate without parentheses
    if isinstance(e.right, BinOp) and _PRECEDENCE[e.right.op] <= prec:
        right = f"({right})"
    return f"{left}{e.op}{right}"


def evaluate(e: Expr) -> Fraction:
    """Exact rational value of the tree; no floating point anywhere."""
    if isinstance(e, Lit):
        return Fraction(e.value)
    left = evaluate(e.left)
    right = evaluate(e.right)
    if e.op == "+":
        return left + right
    if e.op == "-":
        return left - right
    if e.op == "*":
        return left * right
    if right == 0:
        raise DivisionByZero(render_expression(e.right))
    return left / right


def collect_operands(e: Expr) -> Counter:
    """Multiset of leaf literals, multiplicity preserved."""
    if isinstance(e, Lit):
        return Counter({e.value: 1})
    counts = collect_operands(e.left)
    counts.update(collect_operands(e.right))
    return counts


def verify_countdown(numbers, target: int, model_output: str) -> VerifierOutcome:
    """Categorize a Countdown answer: format first, then operands, then value."""
    answer = extract_answer(model_output)
    if answer is None:
        return VerifierOutcome(False, "InvalidEquation", "no boxed answer found")
    try:
        expr = parse_expression(answer)
        value = evaluate(expr)
    except (ParseError, DivisionByZero) as exc:
        return VerifierOutcome(False, "InvalidEquation", str(exc))
    if collect_operands(expr) != Counter(numbers):
        return VerifierOutcome(
            False, "WrongNumbers", f"used {sorted(collect_operands(expr).elements())}, given {sorted(numbers)}"
        )
    if value != Fraction(target):
        return VerifierOutcome(False, "MissedTarget", f"evaluates to {value}, target {target}")
    return VerifierOutcome(True, "Success", answer.strip())


# --- tool-call parsing and matching ---------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)
_TOOLTAG_RE = re.compile(r"<tool_call>\s*(.*?)\s*</tool_call>", re.DOTALL | re.IGNORECASE)


class FormatError(ValueError):
    """Raised when model output contains no parseable tool call."""


def _strip_wrappers(text: str) -> str:
    m = _TOOLTAG_RE.search(text)
    if m:
        text = m.group(1)
    m = _FENCE_RE.search(text)
    if m:
        text = m.group(1)
    return text.strip()


def _find_json_value(text: str):
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch in "[{":
            try:
                value, _ = decoder.raw_decode(text, i)
                return value
            except json.JSONDecodeError:
                continue
    raise FormatError("no JSON object found")


def _as_call(obj: Any) -> ToolCall:
    if not isinstance(obj, dict):
        raise FormatError(f"call is not an object: {obj!r}")
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise FormatError("call has no usable 'name'")
    args = obj.get("arguments", obj.get("parameters"))
    if args is None:
        args = {}
    if not isinstance(args, dict):
        raise FormatError("arguments must be a mapping")
    return ToolCall(name=name, arguments=args)


def parse_calls(text: str) -> list[ToolCall]:
    """Extract tool calls from assistant text.

    Accepts one call object or a list of them, either "arguments" or
    "parameters" as the key, with surrounding tool-call tags / code fences
    stripped. Raises FormatError when nothing parseable is found.
    """
    value = _find_json_value(_strip_wrappers(text))
    if isinstance(value, dict):
        value = [value]
    if not isinstance(value, list) or not value:
        raise FormatError("expected a call object or nonempty list of them")
    return [_as_call(item) for item in value]


def _canonical(value: Any) -> Any:
    """Normalize for structural equality: numbers by value, keys unordered."""
    if isinstance(value, bool):
        return ("bool", value)
    if isinstance(value, (int, float)):
        return ("num", Fraction(str(value)))
    if isinstance(value, dict):
        return ("map", tuple(sorted((k, _canonical(v)) for k, v in value.items())))
    if isinstance(value, list):
        return ("list", tuple(_canonical(v) for v in value))
    return ("atom", value)


def _canonical_call(call: ToolCall):
    return (call.name, _canonical(call.arguments))


def verify_toolcall(expected: list[ToolCall], model_output: str) -> VerifierOutcome:
    """Exact structural match against the gold calls.

    Call-list order and argument-key order are ignored; numeric argument
    values compare by value (1 == 1.0); strings compare byte-exact.
    """
    if not expected:
        raise ValueError("expected call list must be nonempty")
    try:
        got = parse_calls(model_output)
    except FormatError as exc:
        return VerifierOutcome(False, "FormatError", str(exc))
    if Counter(_canonical_call(c) for c in got) == Counter(_canonical_call(c) for c in expected):
        return VerifierOutcome(True, "Success", f"matched {len(expected)} call(s)")
    if Counter(c.name for c in got) != Counter(c.name for c in expected):
        return VerifierOutcome(
            False, "ToolChoiceError", f"called {sorted(c.name for c in got)}, expected {sorted(c.name for c in expected)}"
        )
    return VerifierOutcome(False, "ParameterError", "argument names or values differ")
