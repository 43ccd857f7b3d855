"""
Home to the legnav command line: train, eval, replay and grad-check.

Configuration precedence, lowest first: dataclass defaults, the --config
file, --set section.key=value overrides, dedicated flags (--seed, --mode, ...).
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from legnav import __version__
from legnav.checkpoint import load_checkpoint
from legnav.config import FAMILIES, RunConfig, TaskMode, load_config, parse_override
from legnav.csvlog import file_sha256
from legnav.env import observation_dim
from legnav.errors import EXIT_IO, EXIT_OK, EXIT_RUNTIME, CheckpointShapeError, LegnavError
from legnav.evaluate import (
    energy_sweep,
    extract_gait,
    max_difficulty_protocol,
    pseudo_velocity_drive,
    rejudge,
    write_drive,
    write_gait,
    write_results,
)
from legnav.net import ActorCritic, Mlp, grad_check
from legnav.ppo import train
from legnav.store import TRAJECTORY_TAG, RunStore, default_url

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "LEGNAV_OUTPUT_ROOT"
PROTOCOLS = ("max-difficulty", "energy", "drive", "gait")


def parse_levels(text: str) -> List[int]:
    """
    Parses '0..9' (inclusive) or '0,2,4'.
    """
    if ".." in text:
        low, _, high = text.partition("..")
        return list(range(int(low), int(high) + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def parse_floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def output_dir(out: Optional[str], config: RunConfig) -> Path:
    """
    --out wins, then run.out_dir, then <LEGNAV_OUTPUT_ROOT or runs>/<mode>-seed<seed>.
    """
    if out:
        return Path(out)
    if config.out_dir:
        return Path(config.out_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{config.task_mode.value}-seed{config.seed}"


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for text in args.set or []:
        overrides.update(parse_override(text))
    flags = {
        "task_mode": getattr(args, "mode", None),
        "seed": getattr(args, "seed", None),
        "num_robots": getattr(args, "num_robots", None),
        "workers": getattr(args, "workers", None),
        "ppo.total_iterations": getattr(args, "iterations", None),
    }
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return overrides


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args)).resolve()
    out = output_dir(args.out, config)
    log.info(f"training {config.task_mode.value} seed {config.seed} into {out}")
    result = train(config, out, resume=args.resume)
    print(f"{result.iterations} iterations, final checkpoint {result.checkpoint}")
    return EXIT_OK


def _checkpoint_config(ckpt_config: Dict[str, Any], overrides: Dict[str, Any]) -> RunConfig:
    data = {section: dict(values) for section, values in ckpt_config.items()}
    for dotted, value in overrides.items():
        section, _, name = dotted.rpartition(".")
        data.setdefault(section or "run", {})[name] = value
    return RunConfig.from_dict(data).resolve()


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    overrides = {}
    for text in args.set or []:
        overrides.update(parse_override(text))
    config = _checkpoint_config(ckpt.config, overrides)
    expected = observation_dim(config.env)
    if ckpt.obs_dim != expected:
        raise CheckpointShapeError(
            str(args.checkpoint), f"observation dimension {ckpt.obs_dim}, config expects {expected}"
        )

    ac = ActorCritic.from_arrays(ckpt.params)
    digest = file_sha256(args.checkpoint)
    seed = config.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    out.mkdir(parents=True, exist_ok=True)

    if args.protocol == "max-difficulty":
        store = RunStore(args.store or default_url(out))
        try:
            report = max_difficulty_protocol(
                ac,
                config,
                args.family,
                parse_levels(args.levels) if args.levels else None,
                args.episodes,
                seed=seed,
                store=store,
                out_dir=out,
                checkpoint_digest=digest,
            )
        finally:
            store.close()
        for r in report.results:
            low, high = r.confidence_interval()
            print(
                f"{r.family} level {r.level} param {r.difficulty_param:.3f}: "
                f"{r.success_count}/{r.episodes} [{low:.2f}, {high:.2f}]"
            )
        print(f"highest level at {report.threshold:.0%} success: {report.max_level}")

    elif args.protocol == "energy":
        settings = parse_floats(args.times) if args.times else [2.0, 4.0, 6.0]
        for r in energy_sweep(ac, config, settings, seed=seed, out_dir=out, checkpoint_digest=digest):
            state = "" if r.complete else " (incomplete)"
            print(f"{r.setting}: {r.mean_speed:.3f} m/s, {r.energy_per_meter:.3f} per m{state}")

    else:
        direction = tuple(parse_floats(args.direction))
        if len(direction) != 2:
            raise ValueError(f"--direction needs two values, got {args.direction!r}")
        drive = pseudo_velocity_drive(ac, config, direction, args.time, args.duration, seed=seed)
        write_drive(out / "trajectory.csv", drive, seed, digest)
        print(f"mean speed {drive.mean_speed:.3f} m/s over {drive.duration:.2f} s")
        if args.protocol == "gait":
            control_dt = config.physics.dt * config.physics.decimation
            timeline = extract_gait(drive.contacts, control_dt, config.eval.gait_warmup_s)
            write_gait(out, timeline, seed, digest)
            print(f"gait {timeline.label}, {len(timeline.phases)} phases")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    url = args.store if "://" in args.store else f"sqlite:///{Path(args.store)}"
    config = load_config(args.config, {"task_mode": TaskMode.FINAL_POSITION.value}) if args.config else RunConfig()
    store = RunStore(url)
    try:
        results = rejudge(store, config.eval, args.tag, config.env.success_radius)
    finally:
        store.close()
    if args.out:
        write_results(Path(args.out), results)
    for r in results:
        print(f"{r.family} level {r.level}: {r.success_count}/{r.episodes}")
    return EXIT_OK


def cmd_grad_check(args: argparse.Namespace) -> int:
    sizes = [int(v) for v in args.sizes.split(",")]
    failed = 0
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        net = Mlp.init(sizes, rng)
        obs = rng.standard_normal((args.batch, sizes[0]))
        report = grad_check(net, obs, args.tolerance, rng=rng)
        failed += not report.passed
        print(f"seed {seed}: max relative error {report.max_rel_error:.3e} at {report.worst_param or '-'}")
    return EXIT_OK if not failed else EXIT_RUNTIME


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="legnav", description="Goal-conditioned legged locomotion.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", type=Path)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--mode", choices=[m.value for m in TaskMode])
    p.add_argument("--iterations", type=int)
    p.add_argument("--num-robots", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--resume", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run an evaluation protocol on a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--protocol", choices=PROTOCOLS, default="max-difficulty")
    p.add_argument("--family", choices=FAMILIES, default="gap")
    p.add_argument("--levels", help="'0..9' or '0,3,5'")
    p.add_argument("--episodes", type=int)
    p.add_argument("--times", "--settings", dest="times", help="comma separated energy settings")
    p.add_argument("--time", type=float, default=4.0, help="fixed time left for drive and gait")
    p.add_argument("--direction", default="1,0")
    p.add_argument("--duration", type=float, default=30.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--store", help="run store URL for trajectory logs")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="rejudge saved trajectory logs")
    p.add_argument("--store", required=True, help="SQLAlchemy URL or sqlite file path")
    p.add_argument("--tag", default=TRAJECTORY_TAG)
    p.add_argument("--config", type=Path)
    p.add_argument("--out")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("grad-check", help="check network gradients against finite differences")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--sizes", default="8,16,8,4")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def _configure_logging(verbose: int, quiet: bool) -> None:
    if quiet:
        level = logging.WARNING
    elif verbose:
        level = logging.DEBUG
    else:
        level = logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    _configure_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except LegnavError as ex:
        log.error(str(ex))
        return ex.exit_code
    except OSError as ex:
        log.error(f"I/O error: {ex}")
        return EXIT_IO
    except (ValueError, FloatingPointError, RuntimeError) as ex:
        log.error(str(ex))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
