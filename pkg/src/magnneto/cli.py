"""Command-line harness: ``magnneto {gen-tm,train,eval,compare,dist-check,overhead}``.

Exit codes: 0 success, 2 usage, 3 bad input file, 4 checkpoint/model
mismatch, 5 replica divergence, 6 training or runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import gnn
from .baselines import SearchConfig
from .distsim import DEFAULT_STEP_RATE, dist_check, overhead_report
from .env import EpisodeConfig, default_episode_length
from .experiments import compare, evaluate_tm, summarize
from .nn import ShapeError
from .reports import write_csv, write_manifest
from .topology import ParseError, Topology, load_topology, load_traffic, serialize_traffic
from .traffic import DEFAULT_TARGET_UTIL, GENERATORS
from .trainer import PpoConfig, RunConfig, TrainingDiverged, init_models, load_models, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_MODEL = 4
EXIT_DIVERGENCE = 5
EXIT_RUNTIME = 6


class CliError(Exception):
    def __init__(self, category: str, code: int, message: str):
        super().__init__(message)
        self.category = category
        self.code = code


def _load_topology(path) -> Topology:
    try:
        return load_topology(path)
    except ParseError as exc:
        raise CliError("input", EXIT_INPUT, f"{path}: {exc}") from exc
    except OSError as exc:
        raise CliError("input", EXIT_INPUT, f"cannot read topology {path}: {exc.strerror}") from exc


def _tm_files(source: str) -> list[Path]:
    p = Path(source)
    if p.is_dir():
        files = sorted(p.glob("*.tm"))
        if not files:
            raise CliError("input", EXIT_INPUT, f"no .tm files in {p}")
        return files
    if not p.exists():
        raise CliError("input", EXIT_INPUT, f"traffic path does not exist: {p}")
    return [p]


def _load_tms(source: str, topology: Topology):
    out = []
    for f in _tm_files(source):
        try:
            out.append((f.stem, load_traffic(f, topology.n_nodes)))
        except (ParseError, ValueError) as exc:
            raise CliError("input", EXIT_INPUT, f"{f}: {exc}") from exc
        except OSError as exc:
            raise CliError("input", EXIT_INPUT, f"cannot read {f}: {exc.strerror}") from exc
    return out


def _load_policy(path):
    try:
        return load_models(path)
    except ShapeError as exc:
        raise CliError("model", EXIT_MODEL, str(exc)) from exc
    except (OSError, ValueError) as exc:
        raise CliError("model", EXIT_MODEL, f"cannot load checkpoint {path}: {exc}") from exc


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("input", EXIT_INPUT, f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _manifest(out: Path, args: argparse.Namespace, seeds: dict) -> None:
    fields = {k: v for k, v in vars(args).items() if k != "func"}
    write_manifest(out, args.command, fields, seeds)


# -- commands ------------------------------------------------------------------


def cmd_gen_tm(args) -> int:
    topo = _load_topology(args.topology)
    out = _out_dir(args.out)
    gen = GENERATORS[args.profile]
    written = []
    for k in range(args.count):
        seed = args.seed + k
        tm = gen(topo, seed, args.target_util)
        path = out / f"{args.profile}_{seed:06d}.tm"
        try:
            path.write_text(serialize_traffic(tm))
        except OSError as exc:
            raise CliError("input", EXIT_INPUT, f"cannot write {path}: {exc.strerror}") from exc
        written.append(path.name)
    _manifest(out, args, {"first_tm_seed": args.seed, "tm_seeds": list(range(args.seed, args.seed + args.count))})
    print(f"wrote {len(written)} traffic matrices to {out}")
    return EXIT_OK


def _episode_config(args) -> EpisodeConfig:
    return EpisodeConfig(
        n_actions=args.n_actions,
        episode_length=args.episode_length,
        length_factor=args.length_factor,
        init_weight_range=(args.init_low, args.init_high),
    )


def cmd_train(args) -> int:
    if len(args.traffic) != len(args.topology):
        raise CliError("usage", EXIT_USAGE, "give one --traffic per --topology, in the same order")
    topos = [_load_topology(p) for p in args.topology]
    pools = [[tm for _, tm in _load_tms(source, t)] for source, t in zip(args.traffic, topos)]
    out = _out_dir(args.out)
    ppo = PpoConfig(iterations=args.iterations, normalize_advantages=not args.no_normalize_advantages)
    run = RunConfig(
        topologies=topos,
        traffic=pools,
        seed=args.seed,
        iterations=args.iterations,
        episode=_episode_config(args),
        ppo=ppo,
        out_dir=out,
        checkpoint_every=args.checkpoint_every,
    )

    def progress(row):
        if args.verbose and (row["iteration"] + 1) % args.verbose == 0:
            print(f"iteration {row['iteration'] + 1}: best max-util {row['best_maxutil']:.4f}", flush=True)

    try:
        result = train(run, progress)
    except TrainingDiverged as exc:
        raise CliError("training", EXIT_RUNTIME, str(exc)) from exc
    _manifest(out, args, {"run_seed": args.seed})
    print(f"trained {args.iterations} iterations; checkpoint {result.checkpoints[-1]}")
    return EXIT_OK


def _eval_job(job):
    return evaluate_tm(*job)


def cmd_eval(args) -> int:
    topo = _load_topology(args.topology)
    tms = _load_tms(args.traffic, topo)
    policy, _, _ = _load_policy(args.checkpoint)
    out = _out_dir(args.out)
    modes = ("greedy", "sampled") if args.mode == "both" else (args.mode,)
    jobs = [
        (topo, name, tm, policy, args.seed, k, args.n_actions, modes, args.length_factor, args.episode_length)
        for k, (name, tm) in enumerate(tms)
    ]
    rows = []
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            for part in pool.map(_eval_job, jobs):
                rows.extend(part)
    else:
        for job in jobs:
            rows.extend(_eval_job(job))
    rows.sort(key=lambda r: (r.tm, r.mode))
    eval_rows = [{**r.__dict__, "flag": "undefined_improvement" if r.flagged else ""} for r in rows]
    write_csv(out / "eval.csv", "eval", eval_rows)
    summary, cdf = summarize(rows)
    write_csv(out / "eval_summary.csv", "eval_summary", summary)
    write_csv(out / "eval_cdf.csv", "eval_cdf", cdf)
    _manifest(out, args, {"eval_seed": args.seed})
    for s in summary:
        if s["statistic"] in ("mean_improvement_pct", "median_improvement_pct"):
            print(f"{s['mode']}: {s['statistic']} = {s['value']:.3f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    topo = _load_topology(args.topology)
    tms = _load_tms(args.traffic, topo)
    policy = _load_policy(args.checkpoint)[0] if args.checkpoint else None
    out = _out_dir(args.out)
    search = SearchConfig(
        w_max=args.w_max,
        max_iterations=args.ls_iterations,
        tabu_tenure=args.tabu_tenure,
        patience=args.patience,
        restarts=args.restarts,
        seed=args.seed,
        time_limit=args.ls_time_limit,
    )
    rows = compare(topo, tms, policy, args.seed, search, args.bf_w_max, int(args.bf_limit), args.n_actions)
    rows.sort(key=lambda r: (r.tm, r.optimizer))
    write_csv(out / "compare.csv", "compare", [r.__dict__ for r in rows])
    _manifest(out, args, {"seed": args.seed})
    print(f"wrote {len(rows)} rows to {out / 'compare.csv'}")
    return EXIT_OK


def cmd_dist_check(args) -> int:
    out = _out_dir(args.out)
    if args.checkpoint:
        policy = _load_policy(args.checkpoint)[0]
    else:
        policy = init_models(args.seed)[0]
    rows = []
    for path in args.topology:
        topo = _load_topology(path)
        if args.traffic:
            tm = _load_tms(args.traffic, topo)[0][1]
        else:
            tm = GENERATORS[args.profile](topo, args.seed, args.target_util)
        config = EpisodeConfig(n_actions=args.n_actions, episode_length=args.episode_length, length_factor=args.length_factor)
        seeds = range(args.first_seed, args.first_seed + args.n_seeds)
        for r in dist_check(topo, tm, policy, config, seeds):
            rows.append(
                {
                    "topology": Path(path).stem,
                    "seed": r.seed,
                    "diverged": r.diverged,
                    "max_logit_diff": r.max_logit_diff,
                    "same_actions": r.same_actions,
                    "same_best": r.same_best,
                }
            )
            if r.diverged:
                print(f"{Path(path).stem} seed {r.seed}: DIVERGED\n{r.detail}", file=sys.stderr)
    write_csv(out / "dist_check.csv", "dist_check", rows)
    _manifest(out, args, {"params_seed": args.seed, "episode_seeds": [args.first_seed, args.first_seed + args.n_seeds]})
    n_div = sum(r["diverged"] for r in rows)
    print(f"{len(rows)} runs, {n_div} divergences")
    if n_div:
        raise CliError("divergence", EXIT_DIVERGENCE, f"{n_div} replica divergences")
    return EXIT_OK


def cmd_overhead(args) -> int:
    topo = _load_topology(args.topology)
    T = args.T if args.T is not None else default_episode_length(topo.n_links, args.n_actions)
    ledger = overhead_report(topo, T, args.K, args.hidden_dim, args.float_bytes)
    out = Path(args.out)
    _out_dir(out.parent)
    write_csv(out, "overhead", ledger.rows(args.step_rate))
    per_msg = float(args.hidden_dim * args.float_bytes * 6 / 5)
    print(f"hidden-state message: {per_msg} bytes; per adjacency per step: {float(args.K * per_msg)} bytes")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _episode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-actions", type=int, default=1, help="simultaneous actions per step")
    p.add_argument("--episode-length", type=int, default=None, help="T (default ceil(factor*E/n))")
    p.add_argument("--length-factor", type=float, default=3.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magnneto", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-tm", help="generate synthetic traffic matrices")
    p.add_argument("--topology", required=True)
    p.add_argument("--profile", choices=sorted(GENERATORS), default="gravity")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-util", type=float, default=DEFAULT_TARGET_UTIL)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tm)

    p = sub.add_parser("train", help="train actor and critic with PPO")
    p.add_argument("--topology", action="append", required=True, help="repeatable; pairs with --traffic")
    p.add_argument("--traffic", action="append", required=True, help="TM file or directory of *.tm")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--iterations", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--init-low", type=int, default=1)
    p.add_argument("--init-high", type=int, default=4)
    p.add_argument("--no-normalize-advantages", action="store_true")
    p.add_argument("--verbose", type=int, default=0, metavar="N", help="print progress every N iterations")
    p.add_argument("--out", required=True)
    _episode_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a TM set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--topology", required=True)
    p.add_argument("--traffic", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mode", choices=("greedy", "sampled", "both"), default="both")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    _episode_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="compare optimizers per TM")
    p.add_argument("--topology", required=True)
    p.add_argument("--traffic", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-actions", type=int, default=1)
    p.add_argument("--w-max", type=int, default=20)
    p.add_argument("--ls-iterations", type=int, default=100)
    p.add_argument("--ls-time-limit", type=float, default=None)
    p.add_argument("--tabu-tenure", type=int, default=7)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--bf-w-max", type=int, default=4)
    p.add_argument("--bf-limit", type=float, default=1e5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("dist-check", help="replica-based vs centralized execution")
    p.add_argument("--topology", action="append", required=True)
    p.add_argument("--checkpoint", default=None, help="default: freshly initialized params from --seed")
    p.add_argument("--traffic", default=None, help="default: one generated TM")
    p.add_argument("--profile", choices=sorted(GENERATORS), default="gravity")
    p.add_argument("--target-util", type=float, default=DEFAULT_TARGET_UTIL)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=20)
    p.add_argument("--out", required=True)
    _episode_flags(p)
    p.set_defaults(func=cmd_dist_check)

    p = sub.add_parser("overhead", help="per-link communication overhead")
    p.add_argument("--topology", required=True)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--n-actions", type=int, default=1)
    p.add_argument("--K", type=int, default=gnn.MP_STEPS)
    p.add_argument("--hidden-dim", type=int, default=gnn.HIDDEN_DIM)
    p.add_argument("--float-bytes", type=int, default=4)
    p.add_argument("--step-rate", type=float, default=DEFAULT_STEP_RATE, help="assumed time steps per second")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_overhead)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"error[input]: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
