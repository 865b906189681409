"""Command-line front end: training runs, HE microbenchmarks and the acceptance suite."""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import acceptance
from .cartpole import CartPoleEnv
from .circuit import (CLIENT_OPS, OPS, REFERENCE_TIMES_MS, BATCH_OP_COUNTS, operand_scales,
                      random_batch)
from .ckks import (decode, decrypt, encode, encrypt, he_add, he_mul, keygen, mod_switch_to,
                   profile, relinearize, rescale)
from .cloud import (ClientSession, PlaintextSession, ProtocolFault, loopback_cloud,
                    run_encrypted_training, write_run_outputs)
from .learner import write_snapshots_csv, write_trace_csv, run_blocking_sarsa, run_sarsa
from .mdp import (Constant, MdpError, PolicyConfig, QTable, RobbinsMonro, chain_mdp, load_mdp,
                  rng_streams, value_iteration)

EXIT_OK, EXIT_USAGE, EXIT_ACCEPTANCE, EXIT_RUNTIME = 0, 1, 2, 3
SEED_ENV = "EQRL_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration -----------------------------------------------------------

def read_config(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys use dashes or underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _add_learning(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mdp", help="'chain', 'cartpole' or a path to an MDP file")
    p.add_argument("--exploration-c", type=float)
    p.add_argument("--alpha", help="'rm' for a0/(n+1) or a constant in (0, 1]")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eqrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-plain", help="vanilla SARSA(0)")
    _add_common(p)
    _add_learning(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int, help="cart-pole batch size")
    p.add_argument("--batches", type=int)

    p = sub.add_parser("train-blocking", help="SARSA(0) with delayed updates and blocking states")
    _add_common(p)
    _add_learning(p)
    p.add_argument("--latency", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--scenario", choices=("fig",), help="replay the fixed two-state scenario")

    p = sub.add_parser("train-encrypted", help="batch SARSA(0) through an in-process HE cloud")
    _add_common(p)
    _add_learning(p)
    p.add_argument("--batch", type=int)
    p.add_argument("--batches", type=int)
    p.add_argument("--profile", choices=("table1", "test-small"))

    p = sub.add_parser("bench-he", help="time each HE operation")
    _add_common(p)
    p.add_argument("--profile", choices=("table1", "test-small"))
    p.add_argument("--reps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--batch", type=int)

    p = sub.add_parser("verify", help="run the acceptance criteria")
    _add_common(p)
    p.add_argument("--only", help="comma-separated criterion names")
    p.add_argument("--profile", choices=("table1", "test-small"),
                   help="parameters for the precision criterion")
    p.add_argument("--golden", help="golden trace file to compare against")
    return parser


DEFAULTS = {
    "seed": 0, "out": "eqrl_out", "mdp": "chain", "exploration_c": 0.5, "alpha": None,
    "steps": 200_000, "latency": 3, "batch": 64, "batches": 50, "profile": "test-small",
    "reps": 100, "warmup": 5, "scenario": None, "only": None, "golden": None,
}
TYPES = {"seed": int, "exploration_c": float, "steps": int, "latency": int, "batch": int,
         "batches": int, "reps": int, "warmup": int}


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge defaults < config file < EQRL_SEED (seed only) < flags."""
    config = read_config(args.config) if args.config else {}
    merged = {}
    for key, default in DEFAULTS.items():
        if not hasattr(args, key):
            continue
        value = default
        if key in config:
            try:
                value = TYPES.get(key, str)(config[key])
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from None
        if key == "seed" and os.environ.get(SEED_ENV):
            try:
                value = int(os.environ[SEED_ENV])
            except ValueError:
                raise UsageError(f"{SEED_ENV} must be an integer") from None
        flag = getattr(args, key)
        merged[key] = value if flag is None else flag
    unknown = set(config) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    args.__dict__.update(merged)
    return args


def policy_config(args) -> PolicyConfig:
    """Learning rate defaults to a0/(n+1), or the constant demo rate for cart-pole."""
    if args.alpha is None:
        args.alpha = str(acceptance.CARTPOLE_ALPHA) if args.mdp == "cartpole" else "rm"
    if str(args.alpha).lower() in ("rm", "robbins-monro"):
        rate = RobbinsMonro(1.0)
    else:
        try:
            rate = Constant(float(args.alpha))
        except ValueError as exc:
            raise UsageError(f"--alpha: {exc}") from None
    try:
        return PolicyConfig(args.exploration_c, rate, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_source(name: str):
    if name == "chain":
        return chain_mdp()
    if name == "cartpole":
        return "cartpole"
    try:
        return load_mdp(name)
    except FileNotFoundError:
        raise UsageError(f"MDP file {name} not found") from None
    except MdpError as exc:
        raise UsageError(f"MDP file {name}: {exc}") from None


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_q_csv(path: Path, q: QTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s"] + [f"a{i}" for i in range(q.num_actions)])
        for s, row in enumerate(q.values):
            w.writerow([s] + [repr(float(x)) for x in row])


def write_error_curve(path: Path, snapshots, q_star: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "max_abs_error"])
        for step, values in snapshots:
            w.writerow([step, repr(float(np.max(np.abs(values - q_star))))])


# -- commands ----------------------------------------------------------------

def cmd_train_plain(args) -> int:
    source = load_source(args.mdp)
    cfg = policy_config(args)
    out = _outdir(args)
    if source == "cartpole":
        return _train_cartpole(args, cfg, PlaintextSession(), out)
    res = run_sarsa(source, cfg, args.steps)
    _, q_star = value_iteration(source)
    write_error_curve(out / "learning_curve.csv", res.snapshots, q_star)
    write_snapshots_csv(out / "snapshots.csv", res.snapshots)
    write_q_csv(out / "final_q.csv", res.q)
    err = float(np.max(np.abs(res.q.values - q_star)))
    print(f"train-plain: {args.steps} steps, max |Q - Q*| = {err:.4g}; outputs in {out}")
    return EXIT_OK


def cmd_train_blocking(args) -> int:
    out = _outdir(args)
    if args.scenario == "fig":
        rows = acceptance.fig_scenario_rows()
        (out / "fig_trace.csv").write_text(acceptance.rows_to_csv(rows))
        result = acceptance.golden_trace(diff_dir=out)
        print(result.line())
        return EXIT_OK if result.passed else EXIT_ACCEPTANCE
    source = load_source(args.mdp)
    if source == "cartpole":
        raise UsageError("train-blocking needs a finite MDP, not cartpole")
    if args.latency < 1:
        raise UsageError("--latency must be at least 1")
    cfg = policy_config(args)
    res = run_blocking_sarsa(source, cfg, args.latency, args.steps)
    _, q_star = value_iteration(source)
    write_trace_csv(out / "trace.csv", res.trace)
    write_error_curve(out / "learning_curve.csv", res.snapshots, q_star)
    write_q_csv(out / "final_q.csv", res.q)
    accepted = sum(r.accepted for r in res.trace)
    err = float(np.max(np.abs(res.q.values - q_star)))
    print(f"train-blocking: L={args.latency}, {accepted}/{args.steps} offers accepted, "
          f"max |Q - Q*| = {err:.4g}; outputs in {out}")
    return EXIT_OK


def _train_cartpole(args, cfg, session, out: Path) -> int:
    env = CartPoleEnv(rng_streams(args.seed).env)
    gamma = acceptance.CARTPOLE_GAMMA
    res = run_encrypted_training(env, cfg, args.batch, args.batches, session, gamma=gamma,
                                 initial=1.0 / (1.0 - gamma), out_dir=out,
                                 combine=acceptance.CARTPOLE_COMBINE)
    write_q_csv(out / "final_q.csv", res.q)
    ev = acceptance.evaluate_cartpole(res.q, args.seed)
    print(f"cartpole: {args.batches} batches of {args.batch}; greedy mean length "
          f"{ev.trained:.1f} vs random {ev.baseline:.2f} ({ev.ratio:.1f}x); outputs in {out}")
    return EXIT_OK


def cmd_train_encrypted(args) -> int:
    source = load_source(args.mdp)
    params = profile(args.profile)
    if not 1 <= args.batch <= params.slot_count:
        raise UsageError(f"--batch must lie in [1, {params.slot_count}] for {args.profile}")
    cfg = policy_config(args)
    out = _outdir(args)
    streams = rng_streams(args.seed)
    keys = keygen(params, streams.keys)
    sock, server = loopback_cloud(params)
    session = ClientSession.connect(sock, keys, params, streams.noise)
    try:
        if source == "cartpole":
            _train_cartpole(args, cfg, session, out)
        else:
            res = run_encrypted_training(source, cfg, args.batch, args.batches, session,
                                         out_dir=out)
            write_q_csv(out / "final_q.csv", res.q)
            print(f"train-encrypted: {args.batches} batches of {args.batch} on {args.profile}; "
                  f"max relative deviation from plaintext {100 * res.max_rel_deviation:.5f}%")
    finally:
        session.close()
        server.shutdown()
    print(f"cloud served {server.metrics.batches} batches; reports in {out}")
    return EXIT_OK


def bench_he(params, reps: int, warmup: int, batch: int, rng: np.random.Generator):
    """Mean milliseconds per single call of each operation."""
    keys = keygen(params, rng)
    scales = operand_scales(params)
    vec = random_batch(rng, batch).q
    level = params.max_level
    ct_a = encrypt(encode(params, vec, scale=scales[3]), keys.secret, rng)
    ct_b = encrypt(encode(params, vec, scale=scales[0]), keys.secret, rng)
    prod3 = he_mul(ct_a, ct_b)
    prod2 = relinearize(prod3, keys.relin)
    low = mod_switch_to(ct_b, level - 1)
    res = rescale(prod2)
    fns = {
        "Encode": lambda: encode(params, vec),
        "Encrypt": lambda: encrypt(encode(params, vec), keys.secret, rng),
        "Multiply": lambda: he_mul(ct_a, ct_b),
        "Relinearize": lambda: relinearize(prod3, keys.relin),
        "Rescale": lambda: rescale(prod2),
        "Addition": lambda: he_add(low, res),
        "Decrypt": lambda: decrypt(res, keys.secret),
        "Decode": lambda: decode(decrypt(res, keys.secret)),
    }
    pt = decrypt(res, keys.secret)
    fns["Decode"] = lambda: decode(pt)
    means = {}
    for op in OPS:
        fn = fns[op]
        for _ in range(warmup):
            fn()
        start = time.perf_counter()
        for _ in range(reps):
            fn()
        means[op] = 1000.0 * (time.perf_counter() - start) / reps
    # Encrypt above includes an encode; report the encryption alone
    means["Encrypt"] = max(means["Encrypt"] - means["Encode"], 0.0)
    return means


def bench_rows(means: dict[str, float]):
    per_batch = {op: BATCH_OP_COUNTS[op] * means[op] for op in OPS}
    total = sum(per_batch.values())
    rows = [(op, BATCH_OP_COUNTS[op], per_batch[op], 100.0 * per_batch[op] / total) for op in OPS]
    client = sum(per_batch[op] for op in CLIENT_OPS) / total
    return rows, client


def cmd_bench_he(args) -> int:
    if args.reps < 100:
        raise UsageError("--reps must be at least 100")
    params = profile(args.profile)
    batch = min(args.batch if args.batch else params.slot_count, params.slot_count)
    means = bench_he(params, args.reps, args.warmup, batch, np.random.default_rng(args.seed))
    rows, client = bench_rows(means)
    out = _outdir(args)
    path = out / "bench_he.tsv"
    ref_total = sum(REFERENCE_TIMES_MS.values())
    ref_client = sum(REFERENCE_TIMES_MS[op] for op in CLIENT_OPS) / ref_total
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["Type", "Num", "Time (ms)", "Percent", "Reference Time (ms)"])
        for op, num, ms, pct in rows:
            w.writerow([op, num, f"{ms:.3f}", f"{pct:.2f}", f"{REFERENCE_TIMES_MS[op]:.3f}"])
        w.writerow(["Total", sum(BATCH_OP_COUNTS.values()), f"{sum(r[2] for r in rows):.3f}",
                    "100.00", f"{ref_total:.3f}"])
    with open(out / "bench_he_share.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["metric", "measured", "reference"])
        w.writerow(["client_share_percent", f"{100 * client:.2f}", f"{100 * ref_client:.2f}"])
    for op, num, ms, pct in rows:
        print(f"{op:12s} {num:2d} {ms:10.3f} ms {pct:6.2f}%")
    print(f"client-side share {100 * client:.1f}% (reference {100 * ref_client:.1f}%); "
          f"written to {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(acceptance.CRITERIA)
    if args.only:
        names = [n.strip() for n in args.only.split(",") if n.strip()]
        unknown = [n for n in names if n not in acceptance.CRITERIA]
        if unknown:
            raise UsageError(f"unknown criterion {', '.join(unknown)}; choose from "
                             f"{', '.join(acceptance.CRITERIA)}")
    out = Path(args.out)
    ok = True
    for name in names:
        kwargs = {}
        if name == "golden-trace":
            kwargs = {"golden_path": args.golden, "diff_dir": out}
        elif name == "precision" and args.profile == "test-small":
            kwargs = {"params": profile("test-small")}
        result = acceptance.run_criterion(name, **kwargs)
        print(result.line(), flush=True)
        ok &= result.passed
    return EXIT_OK if ok else EXIT_ACCEPTANCE


COMMANDS = {
    "train-plain": cmd_train_plain,
    "train-blocking": cmd_train_blocking,
    "train-encrypted": cmd_train_encrypted,
    "bench-he": cmd_bench_he,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    try:
        args = resolve(build_parser().parse_args(argv))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtocolFault, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
