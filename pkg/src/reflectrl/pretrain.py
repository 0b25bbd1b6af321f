"""Imitation pretraining for the tiny policy on solver-labeled conversations.

Produces the starting point for reflection training: a policy that answers
mini equation-writing tasks directly, and that has learned the conversational
convention of proposing a candidate equation in its reflection and copying
that candidate on the retry. Candidate reflections in the imitation data are
random expressions over the task numbers, so the pretrained reflection is not
yet informative about the target; making it informative is left to
reinforcement.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import policy as policy_mod
from .tasks import Problem, Stage, _random_tree, render_messages, solve_countdown, template_for
from .verifiers import Expr, render_expression, verify_countdown


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 3e-3
    final_lr_fraction: float = 0.1
    two_attempt_prob: float = 0.45
    noise_prob: float = 0.25
    seed: int = 0
    log_every: int = 200


def random_expression(rng: random.Random, numbers: Sequence[int]) -> Expr:
    leaves = list(numbers)
    rng.shuffle(leaves)
    return _random_tree(rng, leaves)


def random_wrong_answer(rng: random.Random, problem: Problem, max_tries: int = 50) -> str:
    """A boxed expression over the problem numbers that fails verification."""
    for _ in range(max_tries):
        text = "\\boxed{" + render_expression(random_expression(rng, problem.numbers)) + "}"
        if not verify_countdown(problem.numbers, problem.target, text).success:
            return text
    # fall back to an answer that misses the target by construction
    return "\\boxed{" + "+".join(str(n) for n in problem.numbers) + "0}"


def build_example(
    vocab: policy_mod.Vocab,
    problem: Problem,
    solution: Expr,
    rng: random.Random,
    cfg: PretrainConfig,
) -> tuple[list[int], list[int]]:
    """One training sequence and the positions whose tokens are supervised."""
    template = template_for(problem)
    # presentation order must not matter, so reshuffle it on every visit
    order = list(problem.numbers)
    rng.shuffle(order)
    problem = Problem(numbers=tuple(order), target=problem.target, seed=problem.seed)
    if rng.random() >= cfg.two_attempt_prob:
        answer_expr = solution
        if rng.random() < cfg.noise_prob:
            answer_expr = random_expression(rng, problem.numbers)
        messages = render_messages(template, problem, Stage.FIRST_ATTEMPT)
        messages = messages + [{"role": "assistant", "content": "\\boxed{" + render_expression(answer_expr) + "}"}]
        return _sequence_with_supervision(vocab, messages, supervise_assistants=[0])

    wrong = random_wrong_answer(rng, problem)
    candidate = render_expression(random_expression(rng, problem.numbers))
    messages = render_messages(template, problem, Stage.FIRST_ATTEMPT)
    messages = messages + [{"role": "assistant", "content": wrong}]
    messages = render_messages(template, problem, Stage.REFLECTION, messages)
    messages = messages + [{"role": "assistant", "content": candidate}]
    messages = render_messages(template, problem, Stage.RETRY, messages)
    messages = messages + [{"role": "assistant", "content": "\\boxed{" + candidate + "}"}]
    # supervise the reflection and the retry, never the scripted wrong attempt
    return _sequence_with_supervision(vocab, messages, supervise_assistants=[1, 2])


def _sequence_with_supervision(
    vocab: policy_mod.Vocab, messages: list[dict], supervise_assistants: list[int]
) -> tuple[list[int], list[int]]:
    ids = [vocab.bos_id]
    positions: list[int] = []
    assistant_index = -1
    for m in messages:
        ids.append(vocab.role_id(m["role"]))
        content = vocab.encode(m["content"])
        if m["role"] == "assistant":
            assistant_index += 1
        take = m["role"] == "assistant" and assistant_index in supervise_assistants
        start = len(ids)
        ids.extend(content)
        ids.append(vocab.eos_id)
        if take:
            positions.extend(range(start, len(ids)))  # content plus <eos>
    return ids, positions


def pretrain(
    params: policy_mod.PolicyParams,
    problems: Sequence[Problem],
    cfg: PretrainConfig,
    log=None,
) -> policy_mod.PolicyParams:
    """Adam on cross-entropy over supervised assistant tokens."""
    vocab = params.vocab
    solutions = []
    for problem in problems:
        expr = solve_countdown(problem.numbers, problem.target)
        if expr is None:
            raise ValueError(f"unsolvable problem {problem}")
        solutions.append(expr)

    current = params.copy()
    m_state = {k: np.zeros_like(v) for k, v in current.weights.items()}
    v_state = {k: np.zeros_like(v) for k, v in current.weights.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(cfg.steps):
        rng = random.Random(cfg.seed * 1_000_003 + step)
        sequences, weight_maps = [], []
        n_tokens = 0
        for _ in range(cfg.batch_size):
            pick = rng.randrange(len(problems))
            ids, positions = build_example(vocab, problems[pick], solutions[pick], rng, cfg)
            sequences.append(ids)
            weight_maps.append(positions)
            n_tokens += len(positions)
        weights = [{i: -1.0 / n_tokens for i in positions} for positions in weight_maps]
        loss, grads = policy_mod.logprob_gradient(current, sequences, weights)

        t = step + 1
        frac = step / max(cfg.steps - 1, 1)
        lr = cfg.learning_rate * (
            cfg.final_lr_fraction + (1 - cfg.final_lr_fraction) * 0.5 * (1 + math.cos(math.pi * frac))
        )
        new_weights = {}
        for name, w in current.weights.items():
            g = grads[name]
            m_state[name] = b1 * m_state[name] + (1 - b1) * g
            v_state[name] = b2 * v_state[name] + (1 - b2) * g * g
            m_hat = m_state[name] / (1 - b1**t)
            v_hat = v_state[name] / (1 - b2**t)
            new_weights[name] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        current = policy_mod.PolicyParams(config=current.config, vocab=vocab, weights=new_weights)
        if log and cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(step, loss)
    return current
