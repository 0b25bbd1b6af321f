"""Task instances, prompt templates, and the exhaustive equation solver.

Two task kinds exist: number-combination problems ("countdown") verified by
exact arithmetic, and function-calling tasks verified by structural match
against gold calls. Prompt rendering is deterministic and golden-file tested.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from itertools import permutations
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .verifiers import OPS, BinOp, DivisionByZero, Expr, Lit, ToolCall, evaluate


class GenerationExhausted(RuntimeError):
    """Raised when no solvable problem fits the config within the retry budget."""


class FileError(OSError):
    pass


class RecordError(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class StageError(ValueError):
    """History does not match the requested episode stage."""


@dataclass(frozen=True)
class Problem:
    numbers: tuple[int, ...]
    target: int
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.numbers:
            raise ValueError("numbers must be nonempty")
        object.__setattr__(self, "numbers", tuple(int(n) for n in self.numbers))


@dataclass(frozen=True)
class ToolTask:
    query: str
    tools: tuple[dict, ...]
    expected: tuple[ToolCall, ...]

    def __post_init__(self):
        object.__setattr__(self, "tools", tuple(self.tools))
        object.__setattr__(self, "expected", tuple(self.expected))
        if not 1 <= len(self.tools) <= 8:
            raise ValueError(f"expected 1..8 tools, got {len(self.tools)}")
        names = {t.get("name") for t in self.tools}
        for call in self.expected:
            if call.name not in names:
                raise ValueError(f"expected call {call.name!r} not among provided tools")


@dataclass(frozen=True)
class CountdownConfig:
    """Instance-shape knobs; defaults are the learnable mini scale."""

    min_numbers: int = 2
    max_numbers: int = 3
    min_value: int = 1
    max_value: int = 9
    min_target: int = 1
    max_target: int = 30
    max_attempts: int = 1000

    def __post_init__(self):
        if not (1 <= self.min_numbers <= self.max_numbers):
            raise ValueError("bad number-count range")
        if self.min_value > self.max_value or self.min_value < 1:
            raise ValueError("bad value range")
        if self.min_target > self.max_target or self.min_target < 1:
            raise ValueError("bad target range")


# --- exhaustive solver -----------------------------------------------------


def _expressions_over(leaves: tuple[int, ...]) -> Iterable[Expr]:
    """All binary trees with these leaves in this order, all operator choices."""
    if len(leaves) == 1:
        yield Lit(leaves[0])
        return
    for split in range(1, len(leaves)):
        for left in _expressions_over(leaves[:split]):
            for right in _expressions_over(leaves[split:]):
                for op in OPS:
                    yield BinOp(op, left, right)


def solve_countdown(numbers: Sequence[int], target: int) -> Optional[Expr]:
    """Exhaustive search for an expression hitting the target exactly.

    Enumerates every distinct leaf ordering, tree shape, and operator
    assignment with exact rational arithmetic; deterministic order, so the
    same instance always yields the same witness.
    """
    if not 1 <= len(numbers) <= 5:
        raise ValueError("solver handles 1..5 numbers")
    goal = Fraction(target)
    for perm in sorted(set(permutations(numbers))):
        for expr in _expressions_over(perm):
            try:
                value = evaluate(expr)
            except DivisionByZero:
                continue
            if value == goal:
                return expr
    return None


def _random_tree(rng: random.Random, leaves: list[int]) -> Expr:
    if len(leaves) == 1:
        return Lit(leaves[0])
    split = rng.randint(1, len(leaves) - 1)
    return BinOp(rng.choice(OPS), _random_tree(rng, leaves[:split]), _random_tree(rng, leaves[split:]))


def generate_countdown(seed: int, config: CountdownConfig = CountdownConfig()) -> Problem:
    """Sample a solvable problem: the target is the value of a random tree.

    Deterministic in seed. Raises GenerationExhausted when the config leaves
    no attainable targets within the retry budget.
    """
    rng = random.Random(seed)
    for _ in range(config.max_attempts):
        count = rng.randint(config.min_numbers, config.max_numbers)
        numbers = [rng.randint(config.min_value, config.max_value) for _ in range(count)]
        shuffled = list(numbers)
        rng.shuffle(shuffled)
        tree = _random_tree(rng, shuffled)
        try:
            value = evaluate(tree)
        except DivisionByZero:
            continue
        if value.denominator == 1 and config.min_target <= value <= config.max_target:
            return Problem(numbers=tuple(numbers), target=int(value), seed=seed)
    raise GenerationExhausted(f"no solvable instance after {config.max_attempts} attempts")


# --- problem persistence ---------------------------------------------------


def write_problems(path, problems: Iterable[Problem]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            fh.write(json.dumps({"numbers": list(p.numbers), "target": p.target, "seed": p.seed}) + "\n")


def read_problems(path) -> list[Problem]:
    problems = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FileError(str(exc)) from exc
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            problems.append(Problem(numbers=tuple(rec["numbers"]), target=int(rec["target"]), seed=rec.get("seed")))
        except (ValueError, KeyError, TypeError) as exc:
            raise RecordError(i, str(exc)) from exc
    return problems


# --- task serialization ------------------------------------------------------


def task_to_json(task) -> dict:
    if isinstance(task, Problem):
        return {"kind": "countdown", "numbers": list(task.numbers), "target": task.target, "seed": task.seed}
    if isinstance(task, ToolTask):
        return {
            "kind": "toolcall",
            "query": task.query,
            "tools": [dict(t) for t in task.tools],
            "expected": [{"name": c.name, "arguments": c.arguments} for c in task.expected],
        }
    raise TypeError(f"unknown task type {type(task).__name__}")


def task_from_json(data: dict):
    kind = data.get("kind")
    if kind == "countdown":
        return Problem(numbers=tuple(data["numbers"]), target=int(data["target"]), seed=data.get("seed"))
    if kind == "toolcall":
        expected = tuple(ToolCall(name=c["name"], arguments=c.get("arguments", {})) for c in data["expected"])
        return ToolTask(query=data["query"], tools=tuple(data["tools"]), expected=expected)
    raise ValueError(f"unknown task kind {kind!r}")


# --- function-calling dataset loader ---------------------------------------


def _maybe_json(value):
    # real-world exports sometimes double-encode list fields as strings
    if isinstance(value, str):
        return json.loads(value)
    return value


def load_apigen(path) -> list[ToolTask]:
    """Load record-per-line tasks with fields query, tools, answers."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FileError(str(exc)) from exc
    tasks = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordError(i, f"bad JSON: {exc}") from exc
        try:
            query = rec["query"]
            tools = _maybe_json(rec["tools"])
            answers = _maybe_json(rec["answers"])
            if not isinstance(query, str):
                raise TypeError("query must be a string")
            expected = tuple(
                ToolCall(name=a["name"], arguments=a.get("arguments", a.get("parameters", {}))) for a in answers
            )
            if not expected:
                raise ValueError("answers must be nonempty")
            tasks.append(ToolTask(query=query, tools=tuple(tools), expected=expected))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordError(i, str(exc)) from exc
    return tasks


# --- prompt templates --------------------------------------------------------


class Stage(Enum):
    FIRST_ATTEMPT = "first_attempt"
    REFLECTION = "reflection"
    RETRY = "retry"


@dataclass(frozen=True)
class PromptTemplate:
    kind: str  # "countdown" | "toolcall"
    family: str
    system: str
    first_user: str
    reflection: str
    retry: str


_BOXED_INSTRUCTION = "Please reason step by step, and put your final answer within \\boxed{}."

COUNTDOWN_TEMPLATE = PromptTemplate(
    kind="countdown",
    family="countdown",
    system=_BOXED_INSTRUCTION,
    first_user=(
        "Using the numbers {numbers}, create an equation that equals {target}. "
        "You can use basic arithmetic operations (+, -, *, /) and each number can only be used once.\n"
        + _BOXED_INSTRUCTION
    ),
    reflection=(
        "You tried solving the problem and got the wrong answer. Reflect on what went wrong "
        "and write a short explanation that will help you do better next time."
    ),
    retry=(
        "Using the numbers {numbers}, create an equation that equals {target}. "
        "You can use basic arithmetic operations (+, -, *, /) and each number can only be used once.\n"
        + _BOXED_INSTRUCTION
    ),
)

_TOOL_REFLECTION = (
    "You tried performing the task, but failed in generating the correct tool call. "
    "Reflect on what went wrong and write a short explanation that will help you do better next time."
)

_QWEN_SYSTEM = """You are a helpful assistant that can answer questions and help with tasks.

# Tools

You may call one or more functions to assist with the user query.

You are provided with function signatures within <tools></tools> XML tags:
<tools>
{tools}
</tools>

For each function call, return a json object with function name and arguments within <tool_call></tool_call> XML tags:
<tool_call>
{"name": <function-name>, "arguments": <args-json-object>}
</tool_call>"""

TOOL_QWEN_TEMPLATE = PromptTemplate(
    kind="toolcall",
    family="tool_qwen",
    system=_QWEN_SYSTEM,
    first_user="{query}",
    reflection=_TOOL_REFLECTION,
    # the second attempt re-issues the system instructions plus the query
    retry=_QWEN_SYSTEM + "\n\n{query}",
)

TOOL_LLAMA_TEMPLATE = PromptTemplate(
    kind="toolcall",
    family="tool_llama",
    system=(
        "When you receive a tool call response, use the output to format an answer to the original user question.\n"
        "\n"
        "You are a helpful assistant with tool calling capabilities."
    ),
    first_user=(
        "Given the following functions, please respond with a JSON for a function call with its proper arguments "
        "that best answers the given prompt.\n"
        "\n"
        'Respond in the format {"name": function name, "parameters": dictionary of argument name and its value}. '
        "Do not use variables.\n"
        "\n"
        "{tools}\n"
        "\n"
        "Question: {query}"
    ),
    reflection=_TOOL_REFLECTION,
    retry="{query}",
)

TEMPLATES = {
    "countdown": COUNTDOWN_TEMPLATE,
    "tool_qwen": TOOL_QWEN_TEMPLATE,
    "tool_llama": TOOL_LLAMA_TEMPLATE,
}


def template_for(task, family: Optional[str] = None) -> PromptTemplate:
    if isinstance(task, Problem):
        return COUNTDOWN_TEMPLATE
    if isinstance(task, ToolTask):
        return TEMPLATES[family or "tool_qwen"]
    raise TypeError(f"unknown task type {type(task).__name__}")


def _render_tools(tools: Sequence[dict]) -> str:
    return "\n".join(json.dumps(t) for t in tools)


def _fill(text: str, task) -> str:
    # literal-text replacement; templates legitimately contain bare braces
    if isinstance(task, Problem):
        return text.replace("{numbers}", str(list(task.numbers))).replace("{target}", str(task.target))
    return text.replace("{tools}", _render_tools(task.tools)).replace("{query}", task.query)


def _expect_roles(history: Sequence[dict], roles: Sequence[str], stage: Stage) -> None:
    got = [m.get("role") for m in history]
    if got != list(roles):
        raise StageError(f"{stage.value} requires history roles {list(roles)}, got {got}")


def render_messages(template: PromptTemplate, task, stage: Stage, history: Sequence[dict] = ()) -> list[dict]:
    """Produce the full message list for the next generation call.

    FirstAttempt starts a conversation; Reflection requires a completed first
    attempt in history; Retry additionally requires the reflection.
    """
    history = list(history)
    if stage is Stage.FIRST_ATTEMPT:
        _expect_roles(history, [], stage)
        return [
            {"role": "system", "content": _fill(template.system, task)},
            {"role": "user", "content": _fill(template.first_user, task)},
        ]
    if stage is Stage.REFLECTION:
        _expect_roles(history, ["system", "user", "assistant"], stage)
        return history + [{"role": "user", "content": template.reflection}]
    if stage is Stage.RETRY:
        _expect_roles(history, ["system", "user", "assistant", "user", "assistant"], stage)
        return history + [{"role": "user", "content": _fill(template.retry, task)}]
    raise StageError(f"unknown stage {stage!r}")
