import re

import pytest

from reflectrl.episode import Completion, EpisodeConfig, LocalGenerator, ScriptedGenerator, verify_output
from reflectrl.report import (
    CATEGORY_ORDER,
    ErrorBreakdown,
    EvalResult,
    GridRow,
    evaluate,
    parse_csv_report,
    render_report,
)
from reflectrl.tasks import Problem, generate_countdown, solve_countdown
from reflectrl.verifiers import render_expression

PROBLEMS = [generate_countdown(s) for s in range(25)]


def perfect_answer(messages):
    text = messages[1]["content"]
    nums = [int(x) for x in re.findall(r"\d+", text.split("]")[0])]
    target = int(re.search(r"equals (\d+)", text).group(1))
    return "\\boxed{" + render_expression(solve_countdown(nums, target)) + "}"


class FlipGenerator:
    """Wrong on attempt one, perfect on the retry."""

    name = "flip"
    supports_token_ids = False

    def complete(self, messages, *, temperature, max_new_tokens, seed):
        n_assistant = sum(1 for m in messages if m["role"] == "assistant")
        if n_assistant == 0:
            return Completion("\\boxed{123456}")
        if n_assistant == 1:
            return Completion("thinking about it")
        return Completion(perfect_answer(messages))


class TestEvaluate:
    def test_perfect_generator(self):
        res = evaluate(ScriptedGenerator(perfect_answer), PROBLEMS, verify_output, label="perfect")
        assert res.row.first_try == 1.0 and res.row.second_try == 1.0
        assert res.breakdown.total == 0

    def test_always_wrong_generator(self):
        res = evaluate(ScriptedGenerator(lambda m: "\\boxed{99999}"), PROBLEMS, verify_output, label="wrong")
        assert res.row.first_try == 0.0 and res.row.second_try == 0.0
        assert res.breakdown.total == len(PROBLEMS)

    def test_flip_generator_columns(self):
        res = evaluate(FlipGenerator(), PROBLEMS, verify_output, label="flip")
        assert res.row.first_try == 0.0
        assert res.row.second_try == 1.0

    def test_breakdown_conservation(self):
        res = evaluate(ScriptedGenerator(lambda m: "\\boxed{99999}"), PROBLEMS, verify_output)
        failures = round((1 - res.row.first_try) * res.row.samples)
        assert res.breakdown.total == failures

    def test_column_dominance_enforced(self):
        with pytest.raises(ValueError):
            GridRow("x", first_try=0.9, second_try=0.5, samples=10)

    def test_empty_test_set_rejected(self):
        with pytest.raises(ValueError):
            evaluate(ScriptedGenerator([]), [], verify_output)

    def test_local_generator_deterministic(self):
        from reflectrl import policy as policy_mod

        params = policy_mod.init_params(
            policy_mod.PolicyConfig(layers=1, width=16, heads=2, context=192), policy_mod.countdown_vocab(), seed=0
        )
        cfg = EpisodeConfig(temperature=0.0, max_attempt_tokens=10, max_reflection_tokens=6, seed=4)
        a = evaluate(LocalGenerator(params), PROBLEMS[:6], verify_output, cfg)
        b = evaluate(LocalGenerator(params), PROBLEMS[:6], verify_output, cfg)
        assert a.row == b.row
        assert a.breakdown.counts == b.breakdown.counts


class TestRender:
    ROWS = [GridRow("vanilla", 0.326, 0.348, 200), GridRow("trained", 0.486, 0.529, 200)]
    BREAKS = [
        ErrorBreakdown("vanilla", "countdown", {"InvalidEquation": 5, "WrongNumbers": 100, "MissedTarget": 30}),
        ErrorBreakdown("trained", "countdown", {"InvalidEquation": 1, "WrongNumbers": 70, "MissedTarget": 32}),
    ]

    def test_markdown_grid(self):
        doc = render_report(self.ROWS, self.BREAKS, provenance={"seed": 3, "group_size": 8})
        assert "| vanilla | 32.6% | 34.8% | 200 |" in doc
        assert "| Generator | Invalid equation | Wrong numbers | Missed target |" in doc
        assert '"seed": 3' in doc

    def test_breakdown_column_order(self):
        doc = render_report(self.ROWS, self.BREAKS)
        head = doc.index("Invalid equation")
        assert head < doc.index("Wrong numbers") < doc.index("Missed target")
        tool = [ErrorBreakdown("x", "toolcall", {"ToolChoiceError": 1, "ParameterError": 2, "FormatError": 3})]
        doc2 = render_report([GridRow("x", 0.5, 0.6, 10)], tool)
        assert doc2.index("Tool choice error") < doc2.index("Parameter error") < doc2.index("Format error")

    def test_csv_round_trip(self):
        doc = render_report(self.ROWS, self.BREAKS, fmt="csv", provenance={"seed": 1})
        rows = parse_csv_report(doc)
        assert rows[0]["first_try"] == self.ROWS[0].first_try
        assert rows[0]["second_try"] == self.ROWS[0].second_try
        assert rows[1]["Wrong numbers"] == 70
        assert rows[1]["samples"] == 200

    def test_csv_rejects_mixed_kinds(self):
        mixed = self.BREAKS + [ErrorBreakdown("z", "toolcall", {})]
        with pytest.raises(ValueError):
            render_report(self.ROWS, mixed, fmt="csv")

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            render_report(self.ROWS, [], fmt="html")

    def test_eval_result_json_round_trip(self):
        res = EvalResult(
            row=self.ROWS[0],
            breakdown=self.BREAKS[0],
        )
        back = EvalResult.from_json(res.to_json())
        assert back.row == res.row
        assert back.breakdown.counts == res.breakdown.counts

    def test_breakdown_normalizes_category_order(self):
        b = ErrorBreakdown("x", "countdown", {"MissedTarget": 1, "InvalidEquation": 2})
        assert list(b.counts) == list(CATEGORY_ORDER["countdown"])
