"""Two-attempt episode state machine and the failure-dataset builder.

An episode either stops after a correct first attempt, or continues through
self-reflection and one retry. Rewards exist only for continued episodes:
1 when the retry succeeds, else 0. Failed first attempts harvested at
sampling temperature become the training corpus.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Protocol, Sequence

import numpy as np

from . import policy as policy_mod
from .tasks import Problem, Stage, ToolTask, task_from_json, task_to_json, template_for, render_messages
from .verifiers import VerifierOutcome, verify_countdown, verify_toolcall

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

VerifyFn = Callable[[object, str], VerifierOutcome]


class GeneratorError(RuntimeError):
    def __init__(self, message: str, transcript: Optional[list[dict]] = None):
        super().__init__(message)
        self.transcript = transcript or []


class ValidationError(ValueError):
    pass


def verify_output(task, text: str) -> VerifierOutcome:
    """Dispatch to the matching verifier for the task kind."""
    if isinstance(task, Problem):
        return verify_countdown(task.numbers, task.target, text)
    if isinstance(task, ToolTask):
        return verify_toolcall(list(task.expected), text)
    raise TypeError(f"no verifier for {type(task).__name__}")


# --- generators ----------------------------------------------------------------


@dataclass(frozen=True)
class Completion:
    text: str
    token_ids: Optional[list[int]] = None


class Generator(Protocol):
    name: str
    supports_token_ids: bool

    def complete(self, messages: list[dict], *, temperature: float, max_new_tokens: int, seed: int) -> Completion:
        ...


def encode_conversation(vocab: policy_mod.Vocab, messages: Sequence[dict], generation_prompt: bool = True) -> list[int]:
    """Token form of a transcript: role marker, content, <eos> per message."""
    ids = [vocab.bos_id]
    for m in messages:
        ids.append(vocab.role_id(m["role"]))
        ids.extend(vocab.encode(m["content"]))
        ids.append(vocab.eos_id)
    if generation_prompt:
        ids.append(vocab.role_id("assistant"))
    return ids


class LocalGenerator:
    """Samples from an in-process policy; exposes token ids for training."""

    supports_token_ids = True

    def __init__(self, params: policy_mod.PolicyParams, name: str = "local"):
        self.params = params
        self.name = name

    @property
    def vocab(self) -> policy_mod.Vocab:
        return self.params.vocab

    def complete(self, messages, *, temperature: float, max_new_tokens: int, seed: int) -> Completion:
        prompt = encode_conversation(self.vocab, messages)
        cfg = policy_mod.SamplingConfig(temperature=temperature, max_new_tokens=max_new_tokens, seed=seed)
        try:
            ids = policy_mod.sample(self.params, prompt, cfg)
        except policy_mod.LengthError as exc:
            raise GeneratorError(str(exc), transcript=list(messages)) from exc
        return Completion(text=self.vocab.decode(ids), token_ids=ids)


class ScriptedGenerator:
    """Deterministic stand-in for tests: replies from a list or a callable."""

    supports_token_ids = False

    def __init__(self, script, name: str = "scripted"):
        self.name = name
        self._fn = script if callable(script) else None
        self._outputs = None if callable(script) else list(script)
        self._cursor = 0

    def complete(self, messages, *, temperature: float, max_new_tokens: int, seed: int) -> Completion:
        if self._fn is not None:
            return Completion(text=self._fn(messages))
        if self._cursor >= len(self._outputs):
            raise GeneratorError("script exhausted", transcript=list(messages))
        text = self._outputs[self._cursor]
        self._cursor += 1
        return Completion(text=text)


# --- episode data ----------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeConfig:
    temperature: float = 0.0
    max_attempt_tokens: int = 48
    max_reflection_tokens: int = 24
    seed: int = 0
    template_family: Optional[str] = None


@dataclass
class Episode:
    task: object
    messages: list[dict]
    attempt1: str
    outcome1: VerifierOutcome
    reflection: Optional[str] = None
    attempt2: Optional[str] = None
    outcome2: Optional[VerifierOutcome] = None
    reward: Optional[int] = None
    # training-sequence bookkeeping (local generators only)
    token_ids: Optional[list[int]] = None
    reflection_span: Optional[tuple[int, int]] = None
    attempt2_token_ids: Optional[list[int]] = None
    generator: str = ""
    seed: Optional[int] = None

    def validate(self) -> "Episode":
        roles = [m["role"] for m in self.messages]
        if self.outcome1.success:
            if self.reflection is not None or self.attempt2 is not None or self.reward is not None:
                raise ValidationError("successful first attempt must end the episode")
            if roles != ["system", "user", "assistant"]:
                raise ValidationError(f"bad transcript shape {roles}")
        else:
            if self.reflection is None or self.attempt2 is None or self.outcome2 is None:
                raise ValidationError("failed first attempt requires reflection and retry")
            if roles != ["system", "user", "assistant", "user", "assistant", "user", "assistant"]:
                raise ValidationError(f"bad transcript shape {roles}")
            expected_reward = 1 if self.outcome2.success else 0
            if self.reward != expected_reward:
                raise ValidationError(f"reward {self.reward} inconsistent with retry outcome")
            if self.reflection_span is not None:
                start, end = self.reflection_span
                if not (1 <= start < end <= len(self.token_ids or [])):
                    raise ValidationError(f"bad reflection span {self.reflection_span}")
        return self

    def to_json(self) -> dict:
        def outcome(o):
            return None if o is None else {"success": o.success, "category": o.category, "detail": o.detail}

        return {
            "schema_version": SCHEMA_VERSION,
            "type": "episode",
            "task": task_to_json(self.task),
            "messages": self.messages,
            "attempt1": self.attempt1,
            "outcome1": outcome(self.outcome1),
            "reflection": self.reflection,
            "attempt2": self.attempt2,
            "outcome2": outcome(self.outcome2),
            "reward": self.reward,
            "token_ids": self.token_ids,
            "reflection_span": list(self.reflection_span) if self.reflection_span else None,
            "attempt2_token_ids": self.attempt2_token_ids,
            "generator": self.generator,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Episode":
        def outcome(d):
            return None if d is None else VerifierOutcome(d["success"], d["category"], d.get("detail", ""))

        ep = cls(
            task=task_from_json(data["task"]),
            messages=list(data["messages"]),
            attempt1=data["attempt1"],
            outcome1=outcome(data["outcome1"]),
            reflection=data.get("reflection"),
            attempt2=data.get("attempt2"),
            outcome2=outcome(data.get("outcome2")),
            reward=data.get("reward"),
            token_ids=data.get("token_ids"),
            reflection_span=tuple(data["reflection_span"]) if data.get("reflection_span") else None,
            attempt2_token_ids=data.get("attempt2_token_ids"),
            generator=data.get("generator", ""),
            seed=data.get("seed"),
        )
        return ep.validate()


@dataclass(frozen=True)
class FailureRecord:
    task: object
    attempt1: str
    category: str
    seed: Optional[int] = None
    temperature: float = 1.0
    generator: str = ""

    def validate(self) -> "FailureRecord":
        outcome = verify_output(self.task, self.attempt1)
        if outcome.success:
            raise ValidationError("stored first attempt verifies as Success")
        if outcome.category != self.category:
            raise ValidationError(f"stored category {self.category} != verified {outcome.category}")
        return self

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "failure",
            "task": task_to_json(self.task),
            "attempt1": self.attempt1,
            "category": self.category,
            "seed": self.seed,
            "temperature": self.temperature,
            "generator": self.generator,
        }

    @classmethod
    def from_json(cls, data: dict) -> "FailureRecord":
        rec = cls(
            task=task_from_json(data["task"]),
            attempt1=data["attempt1"],
            category=data["category"],
            seed=data.get("seed"),
            temperature=data.get("temperature", 1.0),
            generator=data.get("generator", ""),
        )
        return rec.validate()


# --- episode protocol ----------------------------------------------------------------


def _stage_seed(base: int, stage: int) -> int:
    return int(np.random.SeedSequence([base, stage]).generate_state(1)[0])


def _complete(gen: Generator, messages, cfg: EpisodeConfig, stage: int, max_tokens: int) -> Completion:
    try:
        return gen.complete(
            messages,
            temperature=cfg.temperature,
            max_new_tokens=max_tokens,
            seed=_stage_seed(cfg.seed, stage),
        )
    except GeneratorError:
        raise
    except Exception as exc:  # attach the transcript for debugging
        raise GeneratorError(str(exc), transcript=list(messages)) from exc


def run_episode(gen: Generator, task, verify: VerifyFn, cfg: EpisodeConfig = EpisodeConfig()) -> Episode:
    """First attempt, then (only on failure) reflection and one retry."""
    template = template_for(task, cfg.template_family)
    messages = render_messages(template, task, Stage.FIRST_ATTEMPT)
    first = _complete(gen, messages, cfg, stage=0, max_tokens=cfg.max_attempt_tokens)
    outcome1 = verify(task, first.text)
    messages = messages + [{"role": "assistant", "content": first.text}]
    if outcome1.success:
        return Episode(
            task=task, messages=messages, attempt1=first.text, outcome1=outcome1, generator=gen.name, seed=cfg.seed
        ).validate()
    record = FailureRecord(
        task=task, attempt1=first.text, category=outcome1.category,
        seed=cfg.seed, temperature=cfg.temperature, generator=gen.name,
    )
    return _continue_from_failure(gen, record, verify, cfg, outcome1)


def run_episode_from_failure(
    gen: Generator, record: FailureRecord, verify: VerifyFn, cfg: EpisodeConfig = EpisodeConfig()
) -> Episode:
    """Reflection and retry seeded with the stored failed first attempt."""
    outcome1 = verify(record.task, record.attempt1)
    if outcome1.success:
        raise ValidationError("failure record's stored attempt verifies as Success")
    return _continue_from_failure(gen, record, verify, cfg, outcome1)


def _continue_from_failure(
    gen: Generator, record: FailureRecord, verify: VerifyFn, cfg: EpisodeConfig, outcome1: VerifierOutcome
) -> Episode:
    task = record.task
    template = template_for(task, cfg.template_family)
    base = render_messages(template, task, Stage.FIRST_ATTEMPT)
    base = base + [{"role": "assistant", "content": record.attempt1}]
    reflect_prompt = render_messages(template, task, Stage.REFLECTION, base)

    reflection = _complete(gen, reflect_prompt, cfg, stage=1, max_tokens=cfg.max_reflection_tokens)

    token_ids = reflection_span = None
    if gen.supports_token_ids and reflection.token_ids is not None:
        prefix = encode_conversation(gen.vocab, reflect_prompt)
        token_ids = prefix + list(reflection.token_ids)
        reflection_span = (len(prefix), len(token_ids))

    after_reflection = reflect_prompt + [{"role": "assistant", "content": reflection.text}]
    retry_prompt = render_messages(template, task, Stage.RETRY, after_reflection)
    second = _complete(gen, retry_prompt, cfg, stage=2, max_tokens=cfg.max_attempt_tokens)
    outcome2 = verify(task, second.text)
    messages = retry_prompt + [{"role": "assistant", "content": second.text}]
    return Episode(
        task=task,
        messages=messages,
        attempt1=record.attempt1,
        outcome1=outcome1,
        reflection=reflection.text,
        attempt2=second.text,
        outcome2=outcome2,
        reward=1 if outcome2.success else 0,
        token_ids=token_ids,
        reflection_span=reflection_span,
        attempt2_token_ids=list(second.token_ids) if second.token_ids is not None else None,
        generator=gen.name,
        seed=cfg.seed,
    ).validate()


def instance_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index, 0xE9]).generate_state(1)[0])


def run_episodes_batched(
    gen: LocalGenerator, tasks: Sequence, verify: VerifyFn, cfg: EpisodeConfig = EpisodeConfig()
) -> list[Episode]:
    """Run one episode per task with batched sampling.

    Seed-for-seed equivalent to calling run_episode per task with
    cfg.seed = instance_seed(cfg.seed, i); batching only changes throughput.
    """
    vocab = gen.vocab
    seeds = [instance_seed(cfg.seed, i) for i in range(len(tasks))]
    first_msgs = []
    for task in tasks:
        template = template_for(task, cfg.template_family)
        first_msgs.append(render_messages(template, task, Stage.FIRST_ATTEMPT))
    prompts = [encode_conversation(vocab, msgs) for msgs in first_msgs]
    sampling = policy_mod.SamplingConfig(temperature=cfg.temperature, max_new_tokens=cfg.max_attempt_tokens)
    attempts = policy_mod.sample_batch(
        gen.params, prompts, sampling, seeds=[_stage_seed(s, 0) for s in seeds]
    )

    episodes: list[Optional[Episode]] = [None] * len(tasks)
    pending = []
    for i, task in enumerate(tasks):
        text = vocab.decode(attempts[i])
        outcome = verify(task, text)
        messages = first_msgs[i] + [{"role": "assistant", "content": text}]
        if outcome.success:
            episodes[i] = Episode(
                task=task, messages=messages, attempt1=text, outcome1=outcome, generator=gen.name, seed=seeds[i]
            ).validate()
        else:
            pending.append((i, text, outcome))

    if pending:
        reflect_prompts, reflect_ids = [], []
        for i, text, _ in pending:
            template = template_for(tasks[i], cfg.template_family)
            base = first_msgs[i] + [{"role": "assistant", "content": text}]
            msgs = render_messages(template, tasks[i], Stage.REFLECTION, base)
            reflect_prompts.append(msgs)
            reflect_ids.append(encode_conversation(vocab, msgs))
        reflect_cfg = policy_mod.SamplingConfig(temperature=cfg.temperature, max_new_tokens=cfg.max_reflection_tokens)
        reflections = policy_mod.sample_batch(
            gen.params, reflect_ids, reflect_cfg, seeds=[_stage_seed(seeds[i], 1) for i, _, _ in pending]
        )

        retry_prompts, retry_ids = [], []
        for j, (i, _, _) in enumerate(pending):
            template = template_for(tasks[i], cfg.template_family)
            history = reflect_prompts[j] + [{"role": "assistant", "content": vocab.decode(reflections[j])}]
            msgs = render_messages(template, tasks[i], Stage.RETRY, history)
            retry_prompts.append(msgs)
            retry_ids.append(encode_conversation(vocab, msgs))
        retries = policy_mod.sample_batch(
            gen.params, retry_ids, sampling, seeds=[_stage_seed(seeds[i], 2) for i, _, _ in pending]
        )

        for j, (i, text, outcome1) in enumerate(pending):
            reflection_text = vocab.decode(reflections[j])
            retry_text = vocab.decode(retries[j])
            outcome2 = verify(tasks[i], retry_text)
            token_ids = reflect_ids[j] + list(reflections[j])
            episodes[i] = Episode(
                task=tasks[i],
                messages=retry_prompts[j] + [{"role": "assistant", "content": retry_text}],
                attempt1=text,
                outcome1=outcome1,
                reflection=reflection_text,
                attempt2=retry_text,
                outcome2=outcome2,
                reward=1 if outcome2.success else 0,
                token_ids=token_ids,
                reflection_span=(len(reflect_ids[j]), len(token_ids)),
                attempt2_token_ids=list(retries[j]),
                generator=gen.name,
                seed=seeds[i],
            ).validate()
    return episodes  # type: ignore[return-value]


# --- failure harvesting ----------------------------------------------------------------


def attempt_seed(base_seed: int, task_index: int, attempt_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, task_index, attempt_index]).generate_state(1)[0])


def build_failures(
    gen: Generator,
    tasks: Iterable,
    k: int,
    verify: VerifyFn,
    *,
    temperature: float = 1.0,
    max_attempt_tokens: int = 48,
    base_seed: int = 0,
) -> Iterator[FailureRecord]:
    """Sample k independent first attempts per task; keep only the failures."""
    if k < 1:
        raise ValueError("k must be >= 1")
    for ti, task in enumerate(tasks):
        template = template_for(task, None)
        messages = render_messages(template, task, Stage.FIRST_ATTEMPT)
        for ai in range(k):
            seed = attempt_seed(base_seed, ti, ai)
            try:
                completion = gen.complete(
                    messages, temperature=temperature, max_new_tokens=max_attempt_tokens, seed=seed
                )
            except GeneratorError as exc:
                log.warning("task %d attempt %d failed to generate: %s", ti, ai, exc)
                continue
            outcome = verify(task, completion.text)
            if not outcome.success:
                yield FailureRecord(
                    task=task,
                    attempt1=completion.text,
                    category=outcome.category,
                    seed=seed,
                    temperature=temperature,
                    generator=gen.name,
                )


# --- persistence ----------------------------------------------------------------


def build_failures_batched(
    gen: LocalGenerator,
    tasks: Sequence,
    k: int,
    verify: VerifyFn,
    *,
    temperature: float = 1.0,
    max_attempt_tokens: int = 48,
    base_seed: int = 0,
    batch_size: int = 256,
) -> list[FailureRecord]:
    """Batched harvest for local policies; record-for-record identical to
    build_failures given the same seeds."""
    from . import policy as policy_mod

    if k < 1:
        raise ValueError("k must be >= 1")
    vocab = gen.vocab
    jobs = []
    for ti, task in enumerate(tasks):
        template = template_for(task, None)
        messages = render_messages(template, task, Stage.FIRST_ATTEMPT)
        prompt = encode_conversation(vocab, messages)
        for ai in range(k):
            jobs.append((ti, task, prompt, attempt_seed(base_seed, ti, ai)))
    sampling = policy_mod.SamplingConfig(temperature=temperature, max_new_tokens=max_attempt_tokens)
    records = []
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start : start + batch_size]
        outs = policy_mod.sample_batch(
            gen.params, [j[2] for j in chunk], sampling, seeds=[j[3] for j in chunk]
        )
        for (ti, task, _, seed), ids in zip(chunk, outs):
            text = vocab.decode(ids)
            outcome = verify(task, text)
            if not outcome.success:
                records.append(
                    FailureRecord(
                        task=task, attempt1=text, category=outcome.category,
                        seed=seed, temperature=temperature, generator=gen.name,
                    )
                )
    return records


def write_records(path, records: Iterable) -> None:
    """Record-per-line UTF-8; works for FailureRecord and Episode streams."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def read_records(path) -> list:
    """Load and fully validate records, failing fast with line numbers."""
    try:
        data = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(str(exc)) from exc
    records = []
    lines = data.split("\n")
    if data and not data.endswith("\n"):
        raise ValidationError(f"line {len(lines)}: truncated record (missing newline)")
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {i}: bad JSON: {exc}") from exc
        try:
            if payload.get("schema_version") != SCHEMA_VERSION:
                raise ValidationError(f"unsupported schema_version {payload.get('schema_version')!r}")
            kind = payload.get("type")
            if kind == "failure":
                records.append(FailureRecord.from_json(payload))
            elif kind == "episode":
                records.append(Episode.from_json(payload))
            else:
                raise ValidationError(f"unknown record type {kind!r}")
        except ValidationError as exc:
            raise ValidationError(f"line {i}: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"line {i}: {exc}") from exc
    return records
