"""Command-line surface for the whole pipeline.

Subcommands: gen-countdown, solve, verify, pretrain, build-failures, train,
eval, report. Exit 0 on success, 2 on usage errors, 1 otherwise with a
machine-readable error line on stderr. All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import episode as episode_mod
from . import grpo as grpo_mod
from . import llm_client as llm_mod
from . import policy as policy_mod
from . import pretrain as pretrain_mod
from . import report as report_mod
from . import tasks as tasks_mod
from . import verifiers as verifiers_mod


def _parse_numbers(text: str) -> list[int]:
    return [int(part) for part in text.replace(" ", "").split(",") if part]


def _load_tasks(path: str):
    if path.endswith(".apigen.jsonl") or path.endswith(".apigen"):
        return tasks_mod.load_apigen(path)
    first = Path(path).read_text(encoding="utf-8").lstrip().splitlines()
    if first and '"tools"' in first[0]:
        return tasks_mod.load_apigen(path)
    return tasks_mod.read_problems(path)


def _make_generator(args) -> episode_mod.Generator:
    if getattr(args, "endpoint_url", None):
        cfg = llm_mod.EndpointConfig(base_url=args.endpoint_url, model=args.endpoint_model or "default")
        return llm_mod.RemoteGenerator(llm_mod.LlmClient(cfg))
    if getattr(args, "checkpoint", None):
        params, _, _ = policy_mod.load_checkpoint(args.checkpoint)
        return episode_mod.LocalGenerator(params, name=Path(args.checkpoint).stem)
    raise SystemExit2("one of --checkpoint or --endpoint-url is required")


class SystemExit2(RuntimeError):
    pass


def cmd_gen_countdown(args) -> int:
    cfg = tasks_mod.CountdownConfig(
        min_numbers=args.min_numbers, max_numbers=args.max_numbers,
        min_value=args.min_value, max_value=args.max_value,
        min_target=args.min_target, max_target=args.max_target,
    )
    problems = [tasks_mod.generate_countdown(args.seed + i, cfg) for i in range(args.count)]
    tasks_mod.write_problems(args.out, problems)
    print(f"wrote {len(problems)} problems to {args.out}")
    return 0


def cmd_solve(args) -> int:
    expr = tasks_mod.solve_countdown(_parse_numbers(args.numbers), args.target)
    if expr is None:
        print("unsolvable")
    else:
        print(verifiers_mod.render_expression(expr))
    return 0


def cmd_verify(args) -> int:
    if args.numbers is not None:
        outcome = verifiers_mod.verify_countdown(_parse_numbers(args.numbers), args.target, args.text)
    else:
        tool_tasks = tasks_mod.load_apigen(args.task_file)
        outcome = verifiers_mod.verify_toolcall(list(tool_tasks[args.line].expected), args.text)
    print(f"{outcome.category}: {outcome.detail}" if outcome.detail else outcome.category)
    return 0


def cmd_pretrain(args) -> int:
    problems = tasks_mod.read_problems(args.problems)
    vocab = policy_mod.countdown_vocab()
    pcfg = policy_mod.PolicyConfig(layers=args.layers, width=args.width, heads=args.heads, context=args.context)
    params = policy_mod.init_params(pcfg, vocab, seed=args.seed)
    cfg = pretrain_mod.PretrainConfig(
        steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed
    )
    params = pretrain_mod.pretrain(params, problems, cfg, log=lambda s, l: print(f"step {s} loss {l:.4f}"))
    policy_mod.save_checkpoint(args.out, params, extra_meta={"stage": "pretrain", "seed": args.seed})
    print(f"wrote checkpoint {args.out}")
    return 0


def cmd_build_failures(args) -> int:
    gen = _make_generator(args)
    task_list = _load_tasks(args.tasks)
    records = episode_mod.build_failures(
        gen, task_list, args.k, episode_mod.verify_output,
        temperature=args.temperature, base_seed=args.seed, max_attempt_tokens=args.max_attempt_tokens,
    )
    episode_mod.write_records(args.out, records)
    count = len(episode_mod.read_records(args.out))
    print(f"wrote {count} failure records to {args.out}")
    return 0


def cmd_train(args) -> int:
    records = [r for r in episode_mod.read_records(args.failures) if isinstance(r, episode_mod.FailureRecord)]
    cfg = grpo_mod.read_config(args.config) if args.config else grpo_mod.GrpoConfig()
    overrides = {}
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        import dataclasses

        cfg = dataclasses.replace(cfg, **overrides)
    params, _, _ = policy_mod.load_checkpoint(args.init)
    Path(args.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    result = grpo_mod.train(
        params, records, cfg, checkpoint_dir=args.checkpoint_dir, metrics_path=args.metrics
    )
    print(f"finished at step {result.metrics[-1].step + 1 if result.metrics else 0}; "
          f"checkpoints: {len(result.checkpoints)}")
    return 0


def cmd_eval(args) -> int:
    gen = _make_generator(args)
    task_list = _load_tasks(args.tasks)
    cfg = episode_mod.EpisodeConfig(temperature=args.temperature, seed=args.seed)
    result = report_mod.evaluate(gen, task_list, episode_mod.verify_output, cfg, label=args.label)
    if args.episodes_out:
        episode_mod.write_records(args.episodes_out, [ep for ep in result.episodes if ep is not None])
    payload = result.to_json()
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(payload))
    return 0


def cmd_report(args) -> int:
    results = [report_mod.EvalResult.from_json(json.loads(Path(p).read_text(encoding="utf-8"))) for p in args.inputs]
    doc = report_mod.render_report(
        [r.row for r in results],
        [r.breakdown for r in results],
        fmt=args.format,
        provenance=json.loads(args.provenance) if args.provenance else None,
    )
    if args.out:
        Path(args.out).write_text(doc, encoding="utf-8")
    else:
        print(doc, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reflectrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-countdown", help="emit a problem file")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-numbers", type=int, default=3)
    p.add_argument("--max-numbers", type=int, default=3)
    p.add_argument("--min-value", type=int, default=1)
    p.add_argument("--max-value", type=int, default=9)
    p.add_argument("--min-target", type=int, default=1)
    p.add_argument("--max-target", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_countdown)

    p = sub.add_parser("solve", help="run the exhaustive solver on one instance")
    p.add_argument("--numbers", required=True)
    p.add_argument("--target", type=int, required=True)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("verify", help="verify one model output against one instance")
    p.add_argument("--numbers")
    p.add_argument("--target", type=int)
    p.add_argument("--task-file")
    p.add_argument("--line", type=int, default=0)
    p.add_argument("--text", required=True)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("pretrain", help="imitation-pretrain a fresh tiny policy")
    p.add_argument("--problems", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--context", type=int, default=160)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("build-failures", help="harvest failed first attempts")
    p.add_argument("--checkpoint")
    p.add_argument("--endpoint-url")
    p.add_argument("--endpoint-model")
    p.add_argument("--tasks", required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-attempt-tokens", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_failures)

    p = sub.add_parser("train", help="reflection-reward training over a failure file")
    p.add_argument("--failures", required=True)
    p.add_argument("--init", required=True, help="starting checkpoint")
    p.add_argument("--config", help="plain-text key=value config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--metrics")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="two-attempt evaluation over a task file")
    p.add_argument("--checkpoint")
    p.add_argument("--endpoint-url")
    p.add_argument("--endpoint-model")
    p.add_argument("--tasks", required=True)
    p.add_argument("--label", default="policy")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes-out")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="merge eval outputs into one grid")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--provenance")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit2 as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # machine-readable failure line
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
