"""Command-line entry point: gen, pretrain, train, eval, oracle.

Every artifact-producing subcommand writes a JSON snapshot of the exact
configuration (plus the package version) next to its outputs, so any result
can be reproduced bit for bit by re-running from the recorded snapshot.

Exit codes: 0 success, 2 usage error, 3 invalid input or configuration,
4 runtime fault (divergence, corrupted state).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .bargaining import EnvInputError, play_episodes
from .baselines import (
    evaluate_bot,
    evaluate_policies,
    make_bot,
    bot_singleton_rule,
    proposer_self_share_mean,
    round_statistics,
)
from .coalition_values import (
    IncompleteTableError,
    ValueOracle,
    best_coalition_for,
    members_of,
    shapley,
)
from .instances import ValidationError, generate_instances, read_instance, write_instance
from .policy import PolicyFault
from .routing import RoutingInputError, RoutingSolution, mdvrp_exact
from .rng import RngStream
from .training import (
    ConfigError,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    load_pretrain_extractor_arrays,
    load_trained_policies,
    pretrain,
    save_pretrain,
)

log = logging.getLogger("coalroute.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_FAULT = 4


def _mask_key(mask: int) -> str:
    return ",".join(str(a) for a in members_of(mask))


def _print_json(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _load_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return TrainConfig.from_json(path)


def _load_artifact(loader, path):
    """Checkpoint files are user inputs: map load faults to validation errors."""
    try:
        return loader(path)
    except PolicyFault as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def _solution_dict(solution: RoutingSolution) -> dict:
    return {
        "total_cost": solution.total_cost,
        "tours": [
            {"vehicle": t.vehicle, "sequence": list(t.sequence), "cost": t.cost}
            for t in solution.tours
        ],
    }


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    instances = generate_instances(RngStream(args.seed, "gen"), args.n)
    pattern = "instance-{:06d}.json"
    for i, inst in enumerate(instances):
        write_instance(inst, out / pattern.format(i))
    snapshot = {
        "command": "gen",
        "version": __version__,
        "n": args.n,
        "seed": args.seed,
        "pattern": pattern.replace("{:06d}", "%06d"),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %d instances to %s", args.n, out)
    _print_json(snapshot)
    return EXIT_OK


def cmd_oracle_route(args) -> int:
    instance = read_instance(args.instance)
    try:
        coalition = tuple(int(tok) for tok in args.coalition.split(",") if tok.strip())
    except ValueError as exc:
        raise ValidationError(f"bad coalition {args.coalition!r}: {exc}") from exc
    solution = mdvrp_exact(instance, coalition)
    _print_json(
        {
            "version": __version__,
            "instance": str(args.instance),
            "coalition": sorted(coalition),
            **_solution_dict(solution),
        }
    )
    return EXIT_OK


def cmd_oracle_values(args) -> int:
    instance = read_instance(args.instance)
    table = ValueOracle(instance).table()
    phi = shapley(table)
    best = {}
    for agent in (1, 2, 3):
        mask, per_capita = best_coalition_for(table, agent)
        best[str(agent)] = {"members": list(members_of(mask)), "per_capita": per_capita}
    _print_json(
        {
            "version": __version__,
            "instance": str(args.instance),
            "values": {_mask_key(m): table.v(m) for m in range(1, 8)},
            "per_capita": {_mask_key(m): table.per_capita(m) for m in range(1, 8)},
            "shapley": [float(p) for p in phi],
            "degenerate": table.degenerate,
            "best_coalition": best,
        }
    )
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = _load_config(args.config)
    if args.n is not None:
        config.pretrain_records = args.n
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    net, _, result = pretrain(config, RngStream(config.seed, "pretrain"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pretrain(out, net, result, config)
    snapshot = {
        "command": "pretrain",
        "version": __version__,
        "config": config.to_dict(),
        "result": asdict(result),
    }
    with open(Path(str(out) + ".config.json"), "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _print_json(snapshot)
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    extractor = None
    if args.pretrain is not None:
        meta, extractor = _load_artifact(load_pretrain_extractor_arrays, args.pretrain)
        if meta.get("hidden") != config.hidden:
            raise ConfigError(
                f"pretrained extractor width {meta.get('hidden')} does not match "
                f"configured hidden size {config.hidden}"
            )
    trainer = Trainer(config, extractor_arrays=extractor)
    out = Path(args.out)
    metrics_path = trainer.run(out)
    snapshot = {
        "command": "train",
        "version": __version__,
        "config": config.to_dict(),
        "pretrain": str(args.pretrain) if args.pretrain else None,
        "metrics": metrics_path.name,
        "final_checkpoint": "final.bin",
    }
    with open(out / "run-info.json", "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _print_json(snapshot)
    return EXIT_OK


def _rounds_only_report(label: str, kind: str, args) -> dict:
    """Round statistics without value tables; fast enough for 1e5 episodes."""
    start = time.perf_counter()
    instances = generate_instances(RngStream(args.seed, "eval-instances"), args.n)
    rng = RngStream(args.seed, "eval-episodes").generator()
    policies = [make_bot(kind) for _ in range(3)]
    outcomes, _ = play_episodes(
        instances,
        policies,
        T=args.T,
        rng=rng,
        compute_values=False,
        singleton_rule=bot_singleton_rule(kind),
    )
    elapsed = time.perf_counter() - start
    return {
        "label": label,
        "episodes": len(outcomes),
        "T": args.T,
        "rounds": asdict(round_statistics(outcomes)),
        "proposer_self_share": proposer_self_share_mean(outcomes),
        "wall_clock_s": elapsed,
        "wall_clock_per_instance_s": elapsed / max(1, len(outcomes)),
    }


def cmd_eval(args) -> int:
    if args.no_values:
        if args.bot is None:
            raise ConfigError("--no-values requires --bot (no payoffs to score)")
        if args.scatter is not None:
            raise ConfigError("--scatter needs value tables; drop --no-values")
        payload = _rounds_only_report(f"bot:{args.bot}", args.bot, args)
    else:
        instances = generate_instances(RngStream(args.seed, "eval-instances"), args.n)
        rng = RngStream(args.seed, "eval-episodes").generator()
        if args.ckpt is not None:
            _, config, policies = _load_artifact(load_trained_policies, args.ckpt)
            report, _ = evaluate_policies(
                instances,
                policies,
                T=config.T,
                rng=rng,
                deterministic=True,
                label=f"ckpt:{Path(args.ckpt).name}",
                scatter_path=args.scatter,
            )
        else:
            report, _ = evaluate_bot(
                args.bot, instances, T=args.T, rng=rng, scatter_path=args.scatter
            )
        payload = report.to_dict()
    payload["extra"] = {
        "command": "eval",
        "version": __version__,
        "seed": args.seed,
        "n": args.n,
        "source": args.ckpt if args.ckpt is not None else f"bot:{args.bot}",
    }
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _print_json(payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coalroute",
        description=(
            "Collaborative vehicle routing as coalitional bargaining: exact "
            "routing and value oracles, baseline bots, and self-play training."
        ),
    )
    parser.add_argument("--version", action="version", version=f"coalroute {__version__}")
    parser.add_argument(
        "--log-level",
        default="info",
        choices=["debug", "info", "warning", "error"],
        help="stderr logging verbosity (default: info)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="write random instances as JSON files")
    p_gen.add_argument("--n", type=int, required=True, help="number of instances")
    p_gen.add_argument("--seed", type=int, required=True, help="master seed")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.set_defaults(func=cmd_gen)

    p_oracle = sub.add_parser("oracle", help="exact routing and coalition-value queries")
    oracle_sub = p_oracle.add_subparsers(dest="oracle_command", required=True)

    p_route = oracle_sub.add_parser("route", help="optimal pooled routing for a coalition")
    p_route.add_argument("--instance", required=True, help="instance JSON file")
    p_route.add_argument(
        "--coalition", required=True, help="comma-separated agent ids, e.g. 1,2"
    )
    p_route.set_defaults(func=cmd_oracle_route)

    p_values = oracle_sub.add_parser(
        "values", help="characteristic table, Shapley vector, best coalitions"
    )
    p_values.add_argument("--instance", required=True, help="instance JSON file")
    p_values.set_defaults(func=cmd_oracle_values)

    p_pre = sub.add_parser("pretrain", help="fit the shared feature extractor to v(C)")
    p_pre.add_argument("--n", type=int, default=None, help="override pretrain_records")
    p_pre.add_argument("--seed", type=int, default=None, help="override config seed")
    p_pre.add_argument("--config", default=None, help="TrainConfig JSON file")
    p_pre.add_argument("--out", required=True, help="output checkpoint path")
    p_pre.set_defaults(func=cmd_pretrain)

    p_train = sub.add_parser("train", help="self-play PPO training run")
    p_train.add_argument("--config", default=None, help="TrainConfig JSON file")
    p_train.add_argument("--seed", type=int, default=None, help="override config seed")
    p_train.add_argument(
        "--pretrain", default=None, help="pretrained extractor checkpoint to load"
    )
    p_train.add_argument("--out", required=True, help="output run directory")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint or a baseline bot")
    source = p_eval.add_mutually_exclusive_group(required=True)
    source.add_argument("--ckpt", default=None, help="training checkpoint file")
    source.add_argument(
        "--bot", default=None, choices=["heuristic", "random"], help="baseline bot"
    )
    p_eval.add_argument("--n", type=int, required=True, help="number of episodes")
    p_eval.add_argument("--seed", type=int, required=True, help="evaluation seed")
    p_eval.add_argument("--T", type=int, default=10, help="bargaining horizon for bots")
    p_eval.add_argument("--out", default=None, help="write the report JSON here")
    p_eval.add_argument("--scatter", default=None, help="write per-agent payoff CSV here")
    p_eval.add_argument(
        "--no-values",
        action="store_true",
        help="skip value tables; report round statistics only (bots only)",
    )
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (
        ConfigError,
        ValidationError,
        RoutingInputError,
        EnvInputError,
        IncompleteTableError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDiverged, PolicyFault) as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
