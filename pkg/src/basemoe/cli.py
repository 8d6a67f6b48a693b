"""Command-line entry point: ``basemoe {solve,simulate,train,analyze,bench}``.

Settings come from (highest first) command-line flags, a ``--config`` file
of ``key = value`` lines using the flag names, and built-in defaults. The
effective settings are echoed into every output file.

Exit codes: 0 success, 2 parse error, 3 contract violation, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import balance_report, specialization_table, throughput_report
from .assignment import AuctionConfig, assign_greedy, compute_scores, solve_balanced, solve_oracle
from .core import (
    STREAM_BASELINE, STREAM_DATA, STREAM_EVAL, STREAM_PARAMS, ContractError, DivergenceError, ExpertSet,
    ParseError, ScoreMatrix, TokenBatch, init_experts, matrix_from_csv, matrix_to_csv,
    rows_to_csv, seeded_rng, write_json,
)
from .routing import route_and_apply
from .trainer import (
    ClipConfig, SyntheticTask, TrainResult, checkpoint_record, eval_set, greedy_purity,
    random_routing_purity, read_checkpoint, train_toy,
)

EXIT_OK, EXIT_PARSE, EXIT_CONTRACT, EXIT_DIVERGED = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ParseError(message)


def _common(p: argparse.ArgumentParser, *, topology=True, auction=True):
    p.add_argument("--config", type=Path, help="key = value file with flag names as keys")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="output file (solve, simulate) or directory")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    if topology:
        p.add_argument("--experts", type=int, default=4, help="number of experts / workers E")
        p.add_argument("--tokens", type=int, default=8, help="tokens per worker T")
        p.add_argument("--dim", type=int, default=4)
        p.add_argument("--blocks", type=int, default=1)
    if auction:
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--max-iterations", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="basemoe", description="Balanced expert routing toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="balanced assignment of a CSV score matrix")
    p.add_argument("scores", type=Path, help="T x E score matrix (CSV)")
    p.add_argument("--oracle", action="store_true", help="use the exact oracle instead of the auction")
    _common(p, topology=False)

    p = sub.add_parser("simulate", help="run the multi-worker routing pipeline once")
    _common(p)
    p.add_argument("--mode", choices=("train", "test"), default="train")
    p.add_argument("--experts-zero", action="store_true", help="all expert parameters zero")
    p.add_argument("--init-std", type=float, default=0.02)

    p = sub.add_parser("train", help="toy training on clustered tokens")
    _common(p)
    p.set_defaults(tokens=32, dim=8)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.3)
    p.add_argument("--clip", type=float, default=0.1)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--no-readout", action="store_true")

    p = sub.add_parser("analyze", help="balance and specialization reports for a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--streams", type=int, default=64)
    p.add_argument("--length", type=int, default=32)
    _common(p, topology=False)

    p = sub.add_parser("bench", help="relative throughput of the routing pipeline")
    _common(p)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--mode", choices=("train", "test"), default="train")
    return parser


def _read_config(path: Path) -> dict:
    if not path.exists():
        raise ParseError(f"config file {path} does not exist")
    cfg = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg[key.lstrip("-").replace("-", "_")] = value
    return cfg


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    cfg = _read_config(args.config)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in cfg.items():
        if key not in actions or key in ("config", "help"):
            raise ParseError(f"{args.config}: unknown key {key!r}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ParseError(f"{args.config}: {key} must be a boolean")
            defaults[key] = value.lower() in ("true", "1", "yes")
        else:
            defaults[key] = value  # string defaults go through the action's type
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _effective(args) -> dict:
    # the output location is left out so runs into different directories compare equal
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "out":
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _commented(args, text: str) -> str:
    """Prefix a CSV or plot-data file with the effective config as a comment line."""
    return "# config: " + json.dumps(_effective(args), sort_keys=True) + "\n" + text


def _emit(args, payload: dict, csv_text: str | None = None) -> None:
    if args.format == "csv" and csv_text is not None:
        text = _commented(args, csv_text)
    else:
        text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)


def _auction(args) -> AuctionConfig:
    return AuctionConfig(args.epsilon, args.max_iterations)


# ---------------------------------------------------------------------------
# commands

def cmd_solve(args) -> None:
    if not args.scores.exists():
        raise ParseError(f"scores file {args.scores} does not exist")
    scores = ScoreMatrix(matrix_from_csv(args.scores.read_text()))
    result = solve_oracle(scores) if args.oracle else solve_balanced(scores, _auction(args))
    payload = {"config": _effective(args), **result.to_json()}
    csv_text = rows_to_csv(["token", "expert"], enumerate(result.assignment.expert_of.tolist()))
    _emit(args, payload, csv_text)


def _random_batches(args, rng):
    return [
        TokenBatch.from_features(rng.normal(size=(args.tokens, args.dim)), worker=i,
                                 token_ids=rng.integers(1000, size=args.tokens))
        for i in range(args.experts)
    ]


def cmd_simulate(args) -> None:
    batches = _random_batches(args, seeded_rng(args.seed, STREAM_DATA))
    if args.experts_zero:
        experts = ExpertSet.zeros(args.experts, args.dim, args.blocks)
    else:
        experts = init_experts(seeded_rng(args.seed, STREAM_PARAMS), args.experts, args.dim,
                               args.blocks, std=args.init_std)
    outputs, trace = route_and_apply(batches, experts, _auction(args), seed=args.seed, mode=args.mode)
    change = max(float(np.abs(o.outputs - b.features).max()) for o, b in zip(outputs, batches))
    payload = {
        "config": _effective(args),
        "trace": trace.to_json(),
        "outputs": [o.outputs.tolist() for o in outputs],
        "gates": [o.gate_values.tolist() for o in outputs],
        "max_abs_change": change,
    }
    _emit(args, payload, matrix_to_csv(np.concatenate([o.outputs for o in outputs])))


def _task_from_args(args) -> SyntheticTask:
    return SyntheticTask.make(args.clusters, args.dim, args.seed, separation=args.separation,
                              noise_scale=args.noise)


def cmd_train(args) -> None:
    if args.out is None:
        raise ParseError("train needs --out DIR")
    task = _task_from_args(args)
    experts = init_experts(seeded_rng(args.seed, STREAM_PARAMS), args.experts, args.dim, args.blocks)
    result = train_toy(task, experts, args.steps, args.lr, ClipConfig(args.clip), seed=args.seed,
                       tokens_per_worker=args.tokens, use_readout=not args.no_readout,
                       auction=_auction(args))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    config = _effective(args)
    write_json(out / "checkpoint.json", checkpoint_record(result.experts, result.readout, task, args.seed, config))
    header = list(TrainResult.LOG_FIELDS) + [f"usage_{e}" for e in range(args.experts)]
    rows = [[r[k] for k in TrainResult.LOG_FIELDS] + r["usage"] for r in result.log]
    (out / "log.csv").write_text(_commented(args, rows_to_csv(header, rows)))
    write_json(out / "summary.json", {"config": config, **result.summary()})


def cmd_analyze(args) -> None:
    if not args.checkpoint.exists():
        raise ParseError(f"checkpoint {args.checkpoint} does not exist")
    try:
        rec = json.loads(args.checkpoint.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{args.checkpoint}: invalid JSON: {exc}") from exc
    experts, _, task, train_seed, train_cfg = read_checkpoint(rec)
    E = experts.num_experts

    rng = seeded_rng(args.seed, STREAM_EVAL, 1)
    feats, ids, _ = task.sample(rng, args.streams, args.length)
    greedy = [assign_greedy(compute_scores(TokenBatch.from_features(f), experts)) for f in feats]
    testing = balance_report(greedy, E, mode="testing")
    table = specialization_table(ids, [a.expert_of for a in greedy], E, k=args.k)

    # training-mode routing of the same tokens, grouped E streams per step
    train_assign = []
    usable = (args.streams // E) * E
    length = (args.length // E) * E
    for s in range(0, usable, E):
        batches = [TokenBatch(feats[s + i, :length], ids[s + i, :length],
                              np.stack([np.full(length, i), np.arange(length)], axis=1)) for i in range(E)]
        _, trace = route_and_apply(batches, experts, AuctionConfig(), seed=(args.seed, s), mode="train")
        train_assign.append(np.concatenate(trace.assignments))
    training = balance_report(train_assign, E, mode="training") if train_assign else None

    eval_x, eval_c = eval_set(task, train_seed)
    initial = init_experts(seeded_rng(train_seed, STREAM_PARAMS), E, experts.dim, experts.num_blocks)
    baseline = random_routing_purity(eval_c, E, seeded_rng(train_seed, STREAM_BASELINE))
    purity = {
        "initial": greedy_purity(initial, eval_x, eval_c),
        "final": greedy_purity(experts, eval_x, eval_c),
        "random_baseline_mean": float(baseline.mean()),
        "random_baseline_p99": float(np.quantile(baseline, 0.99)),
    }

    config = _effective(args)
    payload = {
        "config": config,
        "training_config": train_cfg,
        "balance_testing": testing.to_json(),
        "balance_training": None if training is None else training.to_json(),
        "specialization": table.to_json(),
        "purity": purity,
    }
    if args.out is None:
        _emit(args, payload)
        return
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "analysis.json", payload)
    (out / "balance_testing.csv").write_text(_commented(args, testing.to_csv()))
    (out / "balance_testing.dat").write_text(_commented(args, testing.plot_data()))
    if training is not None:
        (out / "balance_training.csv").write_text(_commented(args, training.to_csv()))
        (out / "balance_training.dat").write_text(_commented(args, training.plot_data()))
    (out / "specialization.csv").write_text(_commented(args, table.to_csv()))


def cmd_bench(args) -> None:
    settings = [{"experts": args.experts, "tokens": args.tokens, "dim": args.dim, "blocks": b}
                for b in sorted({args.blocks, 2 * args.blocks})]
    report = throughput_report(settings, args.repetitions, seed=args.seed, mode=args.mode)
    _emit(args, {"config": _effective(args), **report.to_json()}, report.to_csv())


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "train": cmd_train,
            "analyze": cmd_analyze, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        COMMANDS[args.command](args)
    except ParseError as exc:
        print(f"basemoe: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DivergenceError as exc:
        print(f"basemoe: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ContractError as exc:
        print(f"basemoe: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
