"""End-to-end mini-scale learning experiment.

Pipeline: generate disjoint train/eval problem sets, imitation-pretrain a
tiny policy, measure the two-attempt baseline, harvest a failure dataset,
run reflection-only reinforcement, and measure again. Returns everything a
report or assertion needs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

from . import grpo as grpo_mod
from . import policy as policy_mod
from . import pretrain as pretrain_mod
from .episode import EpisodeConfig, LocalGenerator, build_failures_batched, verify_output
from .report import EvalResult, evaluate
from .tasks import CountdownConfig, Problem, generate_countdown

MINI_COUNTDOWN = CountdownConfig(min_numbers=3, max_numbers=3, min_value=1, max_value=9, min_target=1, max_target=30)


@dataclass(frozen=True)
class LabConfig:
    n_train: int = 1200
    n_eval: int = 200
    policy: policy_mod.PolicyConfig = policy_mod.PolicyConfig(layers=2, width=64, heads=4, context=160)
    problem_config: CountdownConfig = MINI_COUNTDOWN
    pretrain: pretrain_mod.PretrainConfig = pretrain_mod.PretrainConfig(steps=1200, batch_size=32)
    failures_per_task: int = 4
    max_failures: int = 20000
    grpo: grpo_mod.GrpoConfig = grpo_mod.GrpoConfig(
        group_size=8,
        batch_size=16,
        max_steps=300,
        learning_rate=1e-4,
        optimizer="adam",
        max_reflection_tokens=18,
        max_attempt_tokens=20,
    )
    eval_max_attempt_tokens: int = 20
    eval_max_reflection_tokens: int = 18


@dataclass
class LabResult:
    seed: int
    baseline: EvalResult
    trained: EvalResult
    baseline_train: Optional[EvalResult] = None
    n_failures: int = 0
    pretrain_minutes: float = 0.0
    grpo_minutes: float = 0.0
    metrics: list = field(default_factory=list)

    @property
    def second_try_gain(self) -> float:
        return self.trained.row.second_try - self.baseline.row.second_try

    @property
    def first_try_drop(self) -> float:
        return self.baseline.row.first_try - self.trained.row.first_try


def problem_split(cfg: LabConfig, seed: int) -> tuple[list[Problem], list[Problem]]:
    """Disjoint train/eval instance sets, deduplicated by (numbers, target)."""
    wanted = cfg.n_train + cfg.n_eval
    problems: list[Problem] = []
    seen: set = set()
    attempt = 0
    while len(problems) < wanted:
        p = generate_countdown(seed * 1_000_003 + attempt, cfg.problem_config)
        attempt += 1
        key = (tuple(sorted(p.numbers)), p.target)
        if key in seen:
            continue
        seen.add(key)
        problems.append(p)
        if attempt > 100 * wanted:
            raise RuntimeError("not enough distinct instances for the requested split")
    return problems[: cfg.n_train], problems[cfg.n_train :]


def eval_config(cfg: LabConfig, seed: int) -> EpisodeConfig:
    return EpisodeConfig(
        temperature=0.0,
        max_attempt_tokens=cfg.eval_max_attempt_tokens,
        max_reflection_tokens=cfg.eval_max_reflection_tokens,
        seed=seed,
    )


def run_learning_experiment(seed: int, cfg: LabConfig = LabConfig(), log=print) -> LabResult:
    """Pretrain, measure, reinforce reflections, measure again."""
    import dataclasses

    train_problems, eval_problems = problem_split(cfg, seed)

    t0 = time.time()
    vocab = policy_mod.countdown_vocab()
    params = policy_mod.init_params(cfg.policy, vocab, seed=seed)
    pt_cfg = dataclasses.replace(cfg.pretrain, seed=seed)
    params = pretrain_mod.pretrain(
        params, train_problems, pt_cfg,
        log=(lambda s, l: log(f"[seed {seed}] pretrain step {s} loss {l:.4f}")) if log else None,
    )
    pretrain_minutes = (time.time() - t0) / 60

    baseline = evaluate(
        LocalGenerator(params, name="pretrained"), eval_problems, verify_output,
        eval_config(cfg, seed), label="pretrained",
    )
    if log:
        log(f"[seed {seed}] baseline: 1st {baseline.row.first_try:.3f} 2nd {baseline.row.second_try:.3f}")

    records = build_failures_batched(
        LocalGenerator(params, name="pretrained"), train_problems, cfg.failures_per_task,
        verify_output, temperature=1.0, max_attempt_tokens=cfg.grpo.max_attempt_tokens, base_seed=seed,
    )[: cfg.max_failures]
    if log:
        log(f"[seed {seed}] harvested {len(records)} failure records")

    t1 = time.time()
    g_cfg = dataclasses.replace(cfg.grpo, seed=seed)
    result = grpo_mod.train(params, records, g_cfg)
    grpo_minutes = (time.time() - t1) / 60

    trained = evaluate(
        LocalGenerator(result.params, name="trained"), eval_problems, verify_output,
        eval_config(cfg, seed), label="trained",
    )
    if log:
        log(
            f"[seed {seed}] trained: 1st {trained.row.first_try:.3f} 2nd {trained.row.second_try:.3f} "
            f"(gain {trained.row.second_try - baseline.row.second_try:+.3f})"
        )
    return LabResult(
        seed=seed,
        baseline=baseline,
        trained=trained,
        n_failures=len(records),
        pretrain_minutes=pretrain_minutes,
        grpo_minutes=grpo_minutes,
        metrics=result.metrics,
    )
