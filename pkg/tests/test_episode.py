import json

import numpy as np
import pytest

from reflectrl import policy as policy_mod
from reflectrl.episode import (
    Completion,
    Episode,
    EpisodeConfig,
    FailureRecord,
    GeneratorError,
    LocalGenerator,
    ScriptedGenerator,
    ValidationError,
    build_failures,
    build_failures_batched,
    encode_conversation,
    read_records,
    run_episode,
    run_episode_from_failure,
    run_episodes_batched,
    verify_output,
    write_records,
)
from reflectrl.tasks import Problem, generate_countdown

TASK = Problem((4, 73, 4, 23), 76)
RIGHT = r"\boxed{(4*23-73)*4}"
WRONG = r"\boxed{4+73+4+23}"


class TestProtocol:
    def test_first_attempt_success_stops(self):
        ep = run_episode(ScriptedGenerator([RIGHT]), TASK, verify_output)
        assert ep.outcome1.success
        assert ep.reflection is None and ep.attempt2 is None and ep.reward is None
        assert [m["role"] for m in ep.messages] == ["system", "user", "assistant"]

    def test_fail_then_success_rewards_one(self):
        ep = run_episode(ScriptedGenerator([WRONG, "try 19*4", RIGHT]), TASK, verify_output)
        assert not ep.outcome1.success and ep.outcome2.success
        assert ep.reward == 1
        assert ep.reflection == "try 19*4"
        assert [m["role"] for m in ep.messages] == [
            "system", "user", "assistant", "user", "assistant", "user", "assistant",
        ]

    def test_fail_then_fail_rewards_zero(self):
        ep = run_episode(ScriptedGenerator([WRONG, "hmm", WRONG]), TASK, verify_output)
        assert ep.reward == 0
        assert not ep.outcome2.success

    def test_always_wrong_generator(self):
        ep = run_episode(ScriptedGenerator(lambda m: WRONG), TASK, verify_output)
        assert ep.reward == 0
        assert ep.outcome1.category == "MissedTarget" and ep.outcome2.category == "MissedTarget"

    def test_all_reward_combinations(self):
        # (attempt1, attempt2) in {S} x stop, {F} x {S, F}
        assert run_episode(ScriptedGenerator([RIGHT]), TASK, verify_output).reward is None
        assert run_episode(ScriptedGenerator([WRONG, "r", RIGHT]), TASK, verify_output).reward == 1
        assert run_episode(ScriptedGenerator([WRONG, "r", WRONG]), TASK, verify_output).reward == 0

    def test_generator_error_carries_transcript(self):
        with pytest.raises(GeneratorError) as err:
            run_episode(ScriptedGenerator([]), TASK, verify_output)
        assert err.value.transcript


class TestFromFailure:
    RECORD = FailureRecord(task=TASK, attempt1=WRONG, category="MissedTarget")

    def test_scripted_recovery(self):
        ep = run_episode_from_failure(ScriptedGenerator(["use 19*4", RIGHT]), self.RECORD, verify_output)
        assert ep.reward == 1
        assert ep.attempt1 == WRONG
        assert ep.messages[2]["content"] == WRONG  # stored attempt replayed, not regenerated

    def test_scripted_repeat_fails(self):
        ep = run_episode_from_failure(ScriptedGenerator(["same again", WRONG]), self.RECORD, verify_output)
        assert ep.reward == 0

    def test_success_verifying_record_rejected(self):
        bad = FailureRecord(task=TASK, attempt1=RIGHT, category="MissedTarget")
        with pytest.raises(ValidationError):
            run_episode_from_failure(ScriptedGenerator(["r", WRONG]), bad, verify_output)

    def test_record_validate(self):
        with pytest.raises(ValidationError):
            FailureRecord(task=TASK, attempt1=RIGHT, category="Success").validate()
        assert self.RECORD.validate() is self.RECORD


@pytest.fixture(scope="module")
def local_gen():
    vocab = policy_mod.countdown_vocab()
    params = policy_mod.init_params(policy_mod.PolicyConfig(layers=1, width=16, heads=2, context=192), vocab, seed=0)
    return LocalGenerator(params, name="tiny")


class TestTokenBookkeeping:
    def test_span_decodes_to_reflection(self, local_gen):
        record = FailureRecord(task=Problem((1, 2), 3), attempt1=r"\boxed{1*2}", category="MissedTarget")
        cfg = EpisodeConfig(temperature=1.0, seed=11, max_reflection_tokens=8, max_attempt_tokens=8)
        ep = run_episode_from_failure(local_gen, record, verify_output, cfg)
        start, end = ep.reflection_span
        assert end > start
        assert local_gen.vocab.decode(ep.token_ids[start:end]) == ep.reflection

    def test_span_sits_after_prompt(self, local_gen):
        record = FailureRecord(task=Problem((1, 2), 3), attempt1=r"\boxed{1*2}", category="MissedTarget")
        cfg = EpisodeConfig(temperature=1.0, seed=3, max_reflection_tokens=6, max_attempt_tokens=6)
        ep = run_episode_from_failure(local_gen, record, verify_output, cfg)
        assert ep.reflection_span[0] >= 1

    def test_conversation_encoding_shape(self, local_gen):
        vocab = local_gen.vocab
        msgs = [{"role": "system", "content": "1"}, {"role": "user", "content": "2"}]
        ids = encode_conversation(vocab, msgs)
        assert ids[0] == vocab.bos_id
        assert ids[-1] == vocab.role_id("assistant")
        assert ids.count(vocab.eos_id) == 2


class TestBuildFailures:
    def test_perfect_generator_yields_nothing(self):
        records = list(build_failures(ScriptedGenerator(lambda m: RIGHT), [TASK] * 10, 4, verify_output))
        assert records == []

    def test_always_failing_counts(self):
        records = list(build_failures(ScriptedGenerator(lambda m: WRONG), [TASK] * 10, 4, verify_output))
        assert len(records) == 40

    def test_partial_success_pattern(self):
        # succeeds on exactly attempts {0, 2} of 4 for the single task
        calls = {"n": -1}

        def gen_fn(messages):
            calls["n"] += 1
            return RIGHT if calls["n"] in (0, 2) else WRONG

        records = list(build_failures(ScriptedGenerator(gen_fn), [TASK], 4, verify_output))
        assert len(records) == 2

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            list(build_failures(ScriptedGenerator([]), [TASK], 0, verify_output))

    def test_bernoulli_rate_within_three_sigma(self):
        p_success = 0.3
        k = 1
        n_tasks = 10_000
        rng = np.random.default_rng(0)

        def gen_fn(messages):
            return RIGHT if rng.random() < p_success else WRONG

        records = list(build_failures(ScriptedGenerator(gen_fn), [TASK] * n_tasks, k, verify_output))
        expected = n_tasks * k * (1 - p_success)
        sigma = np.sqrt(n_tasks * k * p_success * (1 - p_success))
        assert abs(len(records) - expected) <= 3 * sigma

    def test_generator_error_skips_task(self, caplog):
        def gen_fn(messages):
            raise GeneratorError("boom")

        wrapped = ScriptedGenerator(lambda m: RIGHT)
        calls = {"n": -1}

        def flaky(messages):
            calls["n"] += 1
            if calls["n"] == 0:
                raise GeneratorError("boom")
            return WRONG

        records = list(build_failures(ScriptedGenerator(flaky), [TASK, TASK], 1, verify_output))
        assert len(records) == 1

    def test_batched_matches_sequential(self, local_gen):
        tasks = [Problem((1, 2), 3), Problem((2, 3), 6), Problem((4, 5), 9)]
        sequential = list(
            build_failures(local_gen, tasks, 3, verify_output, temperature=1.0, max_attempt_tokens=8, base_seed=5)
        )
        batched = build_failures_batched(
            local_gen, tasks, 3, verify_output, temperature=1.0, max_attempt_tokens=8, base_seed=5
        )
        assert [r.attempt1 for r in sequential] == [r.attempt1 for r in batched]
        assert [r.seed for r in sequential] == [r.seed for r in batched]


class TestBatchedEpisodes:
    def test_matches_sequential_greedy(self, local_gen):
        from dataclasses import replace

        from reflectrl.episode import instance_seed

        tasks = [Problem((1, 2), 3), Problem((2, 3), 6), Problem((3, 3), 9)]
        cfg = EpisodeConfig(temperature=0.0, seed=9, max_attempt_tokens=8, max_reflection_tokens=6)
        batched = run_episodes_batched(local_gen, tasks, verify_output, cfg)
        for i, task in enumerate(tasks):
            single = run_episode(local_gen, task, verify_output, replace(cfg, seed=instance_seed(cfg.seed, i)))
            assert batched[i].attempt1 == single.attempt1
            assert batched[i].reflection == single.reflection
            assert batched[i].attempt2 == single.attempt2
            assert batched[i].reward == single.reward


class TestPersistence:
    def _episode(self):
        return run_episode(ScriptedGenerator([WRONG, "r", RIGHT]), TASK, verify_output)

    def test_round_trip(self, tmp_path):
        records = [
            FailureRecord(task=TASK, attempt1=WRONG, category="MissedTarget", seed=1, temperature=1.0),
            self._episode(),
        ]
        path = tmp_path / "records.jsonl"
        write_records(path, records)
        back = read_records(path)
        assert len(back) == 2
        assert isinstance(back[0], FailureRecord) and back[0].attempt1 == WRONG
        assert isinstance(back[1], Episode) and back[1].reward == 1
        write_records(tmp_path / "again.jsonl", back)
        assert (tmp_path / "again.jsonl").read_text() == path.read_text()

    def test_truncated_line(self, tmp_path):
        path = tmp_path / "records.jsonl"
        write_records(path, [FailureRecord(task=TASK, attempt1=WRONG, category="MissedTarget")])
        with open(path, "a", encoding="utf-8") as fh:
            fh.write('{"type": "failure"')
        with pytest.raises(ValidationError) as err:
            read_records(path)
        assert "line 2" in str(err.value)

    def test_success_verifying_attempt_rejected(self, tmp_path):
        rec = FailureRecord(task=TASK, attempt1=WRONG, category="MissedTarget")
        payload = rec.to_json()
        payload["attempt1"] = RIGHT
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(payload) + "\n", encoding="utf-8")
        with pytest.raises(ValidationError):
            read_records(path)

    def test_bad_json_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{}\n", encoding="utf-8")
        with pytest.raises(ValidationError) as err:
            read_records(path)
        assert "line 1" in str(err.value)

    def test_inconsistent_reward_rejected(self, tmp_path):
        ep = self._episode()
        payload = ep.to_json()
        payload["reward"] = 0
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(payload) + "\n", encoding="utf-8")
        with pytest.raises(ValidationError):
            read_records(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_records(tmp_path / "nope.jsonl")


def test_episode_invariant_success_means_no_reflection():
    with pytest.raises(ValidationError):
        Episode(
            task=TASK,
            messages=[
                {"role": "system", "content": "s"},
                {"role": "user", "content": "u"},
                {"role": "assistant", "content": RIGHT},
            ],
            attempt1=RIGHT,
            outcome1=verify_output(TASK, RIGHT),
            reflection="should not exist",
        ).validate()
