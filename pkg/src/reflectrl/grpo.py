"""Group-relative policy optimization over self-reflection tokens.

Each training example is a stored failure. The current policy samples a group
of reflections per failure, retries the task once per member, and earns a
binary reward per member. Advantages are normalized within the group and
masked so that only reflection tokens carry learning signal; the loss is the
clipped-ratio surrogate with a per-token KL penalty against a frozen
reference policy.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import policy as policy_mod
from .episode import (
    EpisodeConfig,
    FailureRecord,
    LocalGenerator,
    VerifyFn,
    encode_conversation,
    run_episode_from_failure,
    verify_output,
)
from .tasks import Stage, render_messages, template_for


class RangeError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    """Hyperparameters; defaults follow the training setup we replicate."""

    group_size: int = 8
    clip_ratio: float = 0.2
    kl_coeff: float = 0.001
    learning_rate: float = 5e-7
    warmup_ratio: float = 0.03
    batch_size: int = 256
    max_steps: int = 1750
    advantage_eps: float = 1e-4
    inner_iterations: int = 1
    temperature: float = 1.0
    retry_temperature: float = 0.0  # greedy retries give reflections clean credit
    max_reflection_tokens: int = 24
    max_attempt_tokens: int = 48
    optimizer: str = "sgd"  # "sgd" | "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    degenerate_resample_budget: int = 0
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    early_stop_window: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.clip_ratio < 1:
            raise ValueError("clip_ratio must be in (0, 1)")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be >= 0")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.advantage_eps <= 0:
            raise ValueError("advantage_eps must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


def write_config(path, cfg: GrpoConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(cfg):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")


def read_config(path) -> GrpoConfig:
    """Parse a plain-text key-value file; types come from the field defaults."""
    fields = {f.name: f.type for f in dataclasses.fields(GrpoConfig)}
    kwargs = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {i}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"line {i}: unknown key {key!r}")
        kind = fields[key]
        if kind == "int":
            kwargs[key] = int(value)
        elif kind == "float":
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return GrpoConfig(**kwargs)


# --- advantage algebra ----------------------------------------------------------


def compute_advantages(rewards: Sequence[float], eps_std: float = 0.0) -> tuple[np.ndarray, bool]:
    """Group-relative advantages (r - mean) / (sample std + eps).

    Returns the advantage vector and a degenerate flag; a zero-variance group
    yields exactly zero advantages.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("need a group of at least 2 rewards")
    mean = r.mean()
    centered = r - mean
    if np.all(centered == 0.0):
        return np.zeros_like(r), True
    std = r.std(ddof=1)
    return centered / (std + eps_std), False


@dataclass(frozen=True)
class TokenAdvantages:
    """Per-token advantages over a training sequence, zero outside the span."""

    values: np.ndarray
    span_mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.span_mask.shape:
            raise AlignmentError("values and mask must align")
        if np.any(self.values[~self.span_mask] != 0.0):
            raise AlignmentError("advantages must be zero outside the span")


def mask_advantages(advantage: float, span: tuple[int, int], length: int) -> TokenAdvantages:
    """Constant advantage on the span, exactly zero everywhere else."""
    start, end = span
    if not (0 <= start <= end <= length):
        raise policy_mod.SpanError(f"span {span} outside sequence of length {length}")
    values = np.zeros(length)
    mask = np.zeros(length, dtype=bool)
    values[start:end] = advantage
    mask[start:end] = True
    return TokenAdvantages(values=values, span_mask=mask)


def kl_per_token(current_logp: np.ndarray, reference_logp: np.ndarray) -> np.ndarray:
    """Nonnegative per-token KL estimate exp(ref-cur) - (ref-cur) - 1."""
    current_logp = np.asarray(current_logp, dtype=float)
    reference_logp = np.asarray(reference_logp, dtype=float)
    if current_logp.shape != reference_logp.shape:
        raise AlignmentError("log-prob arrays must align")
    delta = reference_logp - current_logp
    return np.exp(delta) - delta - 1.0


def surrogate_loss(
    new_logp,
    old_logp,
    ref_logp,
    token_adv,
    cfg: GrpoConfig,
) -> tuple[float, list[np.ndarray]]:
    """Clipped-ratio loss with KL penalty, scored on span tokens only.

    Accepts one member or a list of members; arrays align with each member's
    TokenAdvantages. Returns the scalar loss and d(loss)/d(new_logp) arrays,
    which are exact analytic partials for chaining into the policy backward.
    """
    if isinstance(token_adv, TokenAdvantages):
        new_logp, old_logp, ref_logp, token_adv = [new_logp], [old_logp], [ref_logp], [token_adv]
    members = len(token_adv)
    if not (len(new_logp) == len(old_logp) == len(ref_logp) == members):
        raise AlignmentError("member lists must have equal length")

    total_span = sum(int(ta.span_mask.sum()) for ta in token_adv)
    grads = []
    loss_sum = 0.0
    eps = cfg.clip_ratio
    beta = cfg.kl_coeff
    for new, old, ref, ta in zip(new_logp, old_logp, ref_logp, token_adv):
        new = np.asarray(new, dtype=float)
        old = np.asarray(old, dtype=float)
        ref = np.asarray(ref, dtype=float)
        if not (new.shape == old.shape == ref.shape == ta.values.shape):
            raise AlignmentError("per-member arrays must align")
        grad = np.zeros_like(new)
        if total_span == 0:
            grads.append(grad)
            continue
        mask = ta.span_mask
        a = ta.values[mask]
        ratio = np.exp(new[mask] - old[mask])
        unclipped = ratio * a
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * a
        take_unclipped = unclipped <= clipped
        surrogate = np.where(take_unclipped, unclipped, clipped)
        delta = ref[mask] - new[mask]
        kl = np.exp(delta) - delta - 1.0
        loss_sum += float(np.sum(surrogate - beta * kl))
        # d(surrogate)/d(new): ratio*a on the unclipped branch, 0 when clipped flat
        dsurr = np.where(take_unclipped, unclipped, 0.0)
        dkl = 1.0 - np.exp(delta)
        grad[mask] = -(dsurr - beta * dkl) / total_span
        grads.append(grad)
    loss = -loss_sum / total_span if total_span else 0.0
    return loss, grads


def lr_at(step: int, cfg: GrpoConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    if step < 0 or step > cfg.max_steps:
        raise RangeError(f"step {step} outside [0, {cfg.max_steps}]")
    if cfg.max_steps == 0:
        return 0.0
    warmup = math.ceil(cfg.warmup_ratio * cfg.max_steps)
    if step <= warmup:
        return cfg.learning_rate * (step / warmup) if warmup > 0 else cfg.learning_rate
    progress = (step - warmup) / (cfg.max_steps - warmup)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- rollouts --------------------------------------------------------------------


@dataclass
class MemberRollout:
    reflection_ids: list[int]
    span: tuple[int, int]
    retry_ids: list[int]
    retry_text: str
    reward: int
    old_logp: np.ndarray
    ref_logp: Optional[np.ndarray] = None


@dataclass
class GroupRollout:
    context_ids: list[int]
    members: list[MemberRollout]
    degenerate: bool = False

    def validate(self) -> "GroupRollout":
        for m in self.members:
            start, end = m.span
            if end <= start:
                raise AlignmentError("member span is empty")
            if m.reward not in (0, 1):
                raise AlignmentError("rewards must be binary")
        return self


def member_seed(base: int, step: int, record_index: int, member: int, stage: int) -> int:
    return int(np.random.SeedSequence([base, step, record_index, member, stage]).generate_state(1)[0])


def rollout_groups(
    params: policy_mod.PolicyParams,
    records: Sequence[FailureRecord],
    cfg: GrpoConfig,
    step: int,
    verify: VerifyFn = verify_output,
) -> list[GroupRollout]:
    """Sample G reflections plus retries per failure with the current policy.

    Batched equivalent of running `run_episode_from_failure` once per member:
    every member of a record shares the stored-failure context, reflections
    are sampled at the configured temperature, and each retry is verified to
    produce the member's binary reward.
    """
    vocab = params.vocab
    g = cfg.group_size
    contexts = []
    for rec in records:
        template = template_for(rec.task)
        base = render_messages(template, rec.task, Stage.FIRST_ATTEMPT)
        base = base + [{"role": "assistant", "content": rec.attempt1}]
        reflect_prompt = render_messages(template, rec.task, Stage.REFLECTION, base)
        contexts.append((reflect_prompt, encode_conversation(vocab, reflect_prompt)))

    prompts = [ctx_ids for _, ctx_ids in contexts for _ in range(g)]
    seeds = [member_seed(cfg.seed, step, ri, mi, 0) for ri in range(len(records)) for mi in range(g)]
    sampling = policy_mod.SamplingConfig(temperature=cfg.temperature, max_new_tokens=cfg.max_reflection_tokens)
    reflections, logps = policy_mod.sample_batch(params, prompts, sampling, seeds=seeds, return_logprobs=True)

    retry_prompts = []
    for idx, reflection_ids in enumerate(reflections):
        ri = idx // g
        reflect_prompt, _ = contexts[ri]
        rec = records[ri]
        template = template_for(rec.task)
        history = reflect_prompt + [{"role": "assistant", "content": vocab.decode(reflection_ids)}]
        retry_msgs = render_messages(template, rec.task, Stage.RETRY, history)
        retry_prompts.append(encode_conversation(vocab, retry_msgs))
    retry_seeds = [member_seed(cfg.seed, step, ri, mi, 1) for ri in range(len(records)) for mi in range(g)]
    retry_cfg = policy_mod.SamplingConfig(temperature=cfg.retry_temperature, max_new_tokens=cfg.max_attempt_tokens)
    retries = policy_mod.sample_batch(params, retry_prompts, retry_cfg, seeds=retry_seeds)

    groups = []
    for ri, rec in enumerate(records):
        _, ctx_ids = contexts[ri]
        members = []
        for mi in range(g):
            idx = ri * g + mi
            reflection_ids = reflections[idx]
            retry_text = vocab.decode(retries[idx])
            reward = 1 if verify(rec.task, retry_text).success else 0
            start = len(ctx_ids)
            members.append(
                MemberRollout(
                    reflection_ids=list(reflection_ids),
                    span=(start, start + len(reflection_ids)),
                    retry_ids=list(retries[idx]),
                    retry_text=retry_text,
                    reward=reward,
                    old_logp=np.asarray(logps[idx]),
                )
            )
        groups.append(GroupRollout(context_ids=list(ctx_ids), members=members).validate())
    return groups


# --- optimizer ---------------------------------------------------------------------


@dataclass
class OptimizerState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def apply_update(
    params: policy_mod.PolicyParams,
    grads: dict[str, np.ndarray],
    lr: float,
    cfg: GrpoConfig,
    state: OptimizerState,
) -> policy_mod.PolicyParams:
    state.t += 1
    new_weights = {}
    if cfg.optimizer == "sgd":
        for name, w in params.weights.items():
            new_weights[name] = w - lr * grads[name]
    else:
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        for name, w in params.weights.items():
            g = grads[name]
            m = state.m.setdefault(name, np.zeros_like(w))
            v = state.v.setdefault(name, np.zeros_like(w))
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**state.t)
            v_hat = v / (1 - b2**state.t)
            new_weights[name] = w - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return dataclasses.replace(params, weights=new_weights)


def grad_global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


# --- training step -------------------------------------------------------------------


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_reward: float
    frac_degenerate: float
    mean_kl: float
    loss: float
    grad_norm: float
    lr: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def train_step(
    params: policy_mod.PolicyParams,
    ref_params: policy_mod.PolicyParams,
    batch: Sequence[FailureRecord],
    cfg: GrpoConfig,
    step: int,
    opt_state: OptimizerState,
    verify: VerifyFn = verify_output,
) -> tuple[policy_mod.PolicyParams, StepMetrics]:
    """One optimizer step over a batch of failures.

    Degenerate (zero-variance) groups contribute zero gradient; the rest are
    averaged. Fails atomically: params are never mutated in place.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    groups = rollout_groups(params, batch, cfg, step, verify=verify)

    if cfg.degenerate_resample_budget > 0:
        for gi, group in enumerate(groups):
            tries = 0
            while tries < cfg.degenerate_resample_budget:
                rewards = [m.reward for m in group.members]
                if len(set(rewards)) > 1:
                    break
                tries += 1
                group = rollout_groups(params, [batch[gi]], cfg, step + 1_000_000 * tries, verify=verify)[0]
            groups[gi] = group

    all_rewards = []
    active: list[tuple[GroupRollout, np.ndarray]] = []
    for group in groups:
        rewards = [m.reward for m in group.members]
        all_rewards.extend(rewards)
        advantages, degenerate = compute_advantages(rewards, cfg.advantage_eps)
        group.degenerate = degenerate
        if not degenerate:
            active.append((group, advantages))

    lr = lr_at(min(step, cfg.max_steps), cfg)
    n_groups = len(groups)
    mean_reward = float(np.mean(all_rewards))
    frac_degenerate = float(sum(1 for g in groups if g.degenerate) / n_groups)

    if not active:
        metrics = StepMetrics(step, mean_reward, frac_degenerate, 0.0, 0.0, 0.0, lr)
        new_params = apply_update(params, policy_mod.zero_grads(params), lr, cfg, opt_state)
        return new_params, metrics

    sequences, spans, advs = [], [], []
    old_logps = []
    for group, advantages in active:
        for member, a in zip(group.members, advantages):
            seq = group.context_ids + member.reflection_ids
            sequences.append(seq)
            spans.append(member.span)
            advs.append(float(a))
            old_logps.append(member.old_logp)
    ref_logps = policy_mod.log_probs_batch(ref_params, sequences, spans)

    current = params
    total_loss = 0.0
    total_kl = 0.0
    kl_tokens = 0
    for inner in range(max(cfg.inner_iterations, 1)):
        if inner == 0:
            new_logps = [lp.copy() for lp in old_logps]
        else:
            new_logps = policy_mod.log_probs_batch(current, sequences, spans)
        weight_maps = []
        loss_acc = 0.0
        cursor = 0
        for group, advantages in active:
            g_new = new_logps[cursor : cursor + len(group.members)]
            g_old = old_logps[cursor : cursor + len(group.members)]
            g_ref = ref_logps[cursor : cursor + len(group.members)]
            token_advs = []
            for member, a in zip(group.members, advantages):
                length = member.span[1] - member.span[0]
                token_advs.append(mask_advantages(float(a), (0, length), length))
            loss, dnew = surrogate_loss(g_new, g_old, g_ref, token_advs, cfg)
            loss_acc += loss / n_groups
            for member, grad_arr in zip(group.members, dnew):
                start = member.span[0]
                weight_maps.append({start + j: grad_arr[j] / n_groups for j in range(grad_arr.size)})
            if inner == 0:
                for new, ref in zip(g_new, g_ref):
                    total_kl += float(np.sum(kl_per_token(new, ref)))
                    kl_tokens += new.size
            cursor += len(group.members)
        _, grads = policy_mod.logprob_gradient(current, sequences, weight_maps)
        current = apply_update(current, grads, lr, cfg, opt_state)
        total_loss = loss_acc

    metrics = StepMetrics(
        step=step,
        mean_reward=mean_reward,
        frac_degenerate=frac_degenerate,
        mean_kl=total_kl / kl_tokens if kl_tokens else 0.0,
        loss=total_loss,
        grad_norm=grad_global_norm(grads),
        lr=lr,
    )
    return current, metrics


# --- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    params: policy_mod.PolicyParams
    metrics: list[StepMetrics]
    checkpoints: list[str]


def _batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
    if batch_size <= n:
        return rng.permutation(n)[:batch_size]
    return rng.integers(0, n, size=batch_size)


def _opt_arrays(state: OptimizerState) -> dict[str, np.ndarray]:
    out = {"t": np.array([float(state.t)])}
    for name, arr in state.m.items():
        out[f"m.{name}"] = arr
    for name, arr in state.v.items():
        out[f"v.{name}"] = arr
    return out


def _opt_from_arrays(arrays: dict[str, np.ndarray]) -> OptimizerState:
    state = OptimizerState()
    for name, arr in arrays.items():
        if name == "t":
            state.t = int(arr[0])
        elif name.startswith("m."):
            state.m[name[2:]] = arr.copy()
        elif name.startswith("v."):
            state.v[name[2:]] = arr.copy()
    return state


def save_trainer_checkpoint(path, params, opt_state: OptimizerState, step: int, meta: Optional[dict] = None) -> None:
    policy_mod.save_checkpoint(path, params, extra_arrays=_opt_arrays(opt_state), extra_meta={"step": step, **(meta or {})})


def load_trainer_checkpoint(path):
    params, extra, meta = policy_mod.load_checkpoint(path)
    return params, _opt_from_arrays(extra), int(meta.get("step", 0)), meta


def train(
    params: policy_mod.PolicyParams,
    records: Sequence[FailureRecord],
    cfg: GrpoConfig,
    *,
    checkpoint_dir=None,
    metrics_path=None,
    eval_fn: Optional[Callable[[policy_mod.PolicyParams, int], dict]] = None,
    resume_from=None,
    verify: VerifyFn = verify_output,
) -> TrainResult:
    """Iterate train_step over seeded shuffled batches with periodic eval.

    Checkpoints carry optimizer state and the step counter, so resuming from
    a checkpoint replays the exact uninterrupted trajectory.
    """
    if not records:
        raise ValueError("failure dataset must be nonempty")
    opt_state = OptimizerState()
    start_step = 0
    if resume_from is not None:
        params, opt_state, start_step, _ = load_trainer_checkpoint(resume_from)

    ref_params = params.copy()
    metrics: list[StepMetrics] = []
    checkpoints: list[str] = []
    metrics_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None

    def checkpoint(step: int, current) -> None:
        if checkpoint_dir is None:
            return
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        path = Path(checkpoint_dir) / f"step_{step:06d}.ckpt"
        save_trainer_checkpoint(path, current, opt_state, step)
        checkpoints.append(str(path))

    best_second_try = -1.0
    evals_without_improvement = 0
    current = params
    if start_step == 0:
        checkpoint(0, current)
    try:
        for step in range(start_step, cfg.max_steps):
            batch = [records[i] for i in _batch_indices(cfg.seed, step, len(records), cfg.batch_size)]
            current, step_metrics = train_step(current, ref_params, batch, cfg, step, opt_state, verify=verify)
            metrics.append(step_metrics)
            if metrics_fh:
                metrics_fh.write(json.dumps(step_metrics.to_json()) + "\n")
                metrics_fh.flush()
            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                checkpoint(done, current)
            if eval_fn and cfg.eval_every and done % cfg.eval_every == 0:
                scores = eval_fn(current, done)
                second = float(scores.get("second_try", 0.0))
                if second > best_second_try:
                    best_second_try = second
                    evals_without_improvement = 0
                else:
                    evals_without_improvement += 1
                if cfg.early_stop_window and evals_without_improvement >= cfg.early_stop_window:
                    break
        final_step = metrics[-1].step + 1 if metrics else start_step
        if checkpoint_dir is not None and (not checkpoints or not checkpoints[-1].endswith(f"step_{final_step:06d}.ckpt")):
            checkpoint(final_step, current)
    finally:
        if metrics_fh:
            metrics_fh.close()
    return TrainResult(params=current, metrics=metrics, checkpoints=checkpoints)
