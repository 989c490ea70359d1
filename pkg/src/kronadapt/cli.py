"""Command-line front end.

Exit codes: 0 success, 2 bad arguments, 3 IO/format problems, 4 numerical
failure, divergence or a failed verification. Errors are printed as a single
``kronadapt: error[<kind>]: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import SokaAdapter, soka_init
from .benchmark import run_bench
from .errors import ArgumentError, DimensionError, KronIOError, NumericalError
from .kpsvd import kpsvd
from .model_io import (dumps, load_adapter, load_matrix, load_spectrum, read_manifest,
                       save_adapter, save_matrix, verify_checksums, write_comparison,
                       write_cost_reports, write_curves, write_rank_decision, write_report,
                       write_train_log)
from .rank import RankPolicy, energy_curve
from .tensor import KronShape, as_matrix, choose_shape, kron
from .toybench import (DEFAULT_LR, DEFAULT_METHODS, DEFAULT_STEPS, METHODS, TrainConfig,
                       compare_runs, default_battery, make_task, train)

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

log = logging.getLogger("kronadapt")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_ARGS, "args", message)


def _default_seed() -> int:
    raw = os.environ.get("KRONADAPT_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(EXIT_ARGS, "args", f"KRONADAPT_SEED must be an integer, got {raw!r}")


def _emit(args, human: str, payload: dict) -> None:
    if args.json:
        sys.stdout.write(dumps(payload) + "\n")
    else:
        sys.stdout.write(human + "\n")


def _parse_shape(text: str, rows: int | None = None, cols: int | None = None) -> KronShape:
    if text == "auto":
        if rows is None or cols is None:
            raise ArgumentError("--shape auto needs the weight dimensions")
        return choose_shape(rows, cols)
    return KronShape.parse(text)


def _policy(args) -> RankPolicy:
    return RankPolicy(tau=0.95 if args.tau is None else args.tau,
                      r_min=1 if args.rmin is None else args.rmin,
                      r_max=args.rmax, log_gaps=args.log_gaps)


def _add_policy_flags(p):
    p.add_argument("--tau", type=float, default=None, help="energy threshold in (0, 1), default 0.95")
    p.add_argument("--rmin", type=int, default=None, help="lower rank bound, default 1")
    p.add_argument("--rmax", type=int, default=None, help="upper rank bound (default: none)")
    p.add_argument("--log-gaps", action="store_true", help="elbow on log singular values")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_decompose(args) -> int:
    if args.rank is not None and any(v is not None for v in (args.tau, args.rmin, args.rmax)):
        raise ArgumentError("--rank cannot be combined with --tau/--rmin/--rmax")
    if args.rank is not None and args.rank < 1:
        raise ArgumentError(f"--rank must be positive, got {args.rank}")
    W = load_matrix(args.input)
    shape = _parse_shape(args.shape, *W.shape)
    shape.check(W, "input")
    policy = _policy(args)
    adapter = soka_init(W, shape, policy, rank=args.rank)
    out = Path(args.out)
    save_adapter(adapter, out, state="init")
    write_rank_decision(adapter.rank_decision, out / "rank_decision")
    d = adapter.rank_decision
    residual = float(np.linalg.norm(adapter.base))
    params = adapter.cost_report().trainable_params
    payload = {"shape": list(shape.as_tuple()), "r_final": d.r_final, "r_energy": d.r_energy,
               "r_elbow": d.r_elbow, "mode": d.mode, "residual_fro": residual,
               "trainable_params": params}
    _emit(args, f"shape={','.join(map(str, shape.as_tuple()))} r_final={d.r_final} "
                f"({d.mode}) residual_fro={residual:.6g} trainable_params={params}", payload)
    return EXIT_OK


def cmd_bench(args) -> int:
    dims = None
    if args.dims:
        try:
            dims = [int(v) for v in args.dims.split(",")]
        except ValueError:
            raise ArgumentError(f"--dims must be 'rows,cols', got {args.dims!r}") from None
        if len(dims) != 2:
            raise ArgumentError(f"--dims must be 'rows,cols', got {args.dims!r}")
    shape = _parse_shape(args.shape, *(dims or (None, None)))
    if args.rank < 1:
        raise ArgumentError(f"--rank must be positive, got {args.rank}")
    if args.lora_rank is not None and args.lora_rank < 1:
        raise ArgumentError(f"--lora-rank must be positive, got {args.lora_rank}")
    if args.trials < 0:
        raise ArgumentError(f"--trials must be nonnegative, got {args.trials}")
    res = run_bench(shape, args.rank, args.lora_rank, args.trials, args.seed)
    counts = {"shape": list(shape.as_tuple()), "rank": res.rank, "lora_rank": res.lora_rank,
              "counted_soka_matvec_flops": res.counted_soka_flops}
    if args.out:
        out = Path(args.out)
        write_cost_reports({"soka": res.soka, "lora": res.lora}, out / "cost_report", counts)
        if res.soka_seconds is not None:
            write_report(out / "timing", ["method", "median_seconds", "trials"],
                         [["soka", res.soka_seconds, args.trials],
                          ["lora", res.lora_seconds, args.trials]],
                         {"trials": args.trials,
                          "median_seconds": {"soka": res.soka_seconds,
                                             "lora": res.lora_seconds}})
    payload = dict(counts, soka={"trainable_params": res.soka.trainable_params,
                                 "matvec_flops": res.soka.matvec_flops},
                   lora={"trainable_params": res.lora.trainable_params,
                         "matvec_flops": res.lora.matvec_flops},
                   dense_equivalent_flops=res.soka.dense_equivalent_flops,
                   median_seconds={"soka": res.soka_seconds, "lora": res.lora_seconds})
    lines = [
        f"shape={','.join(map(str, shape.as_tuple()))} ({shape.rows}x{shape.cols})",
        f"soka  r={res.rank}: params={res.soka.trainable_params} "
        f"matvec_madds={res.soka.matvec_flops} (counted {res.counted_soka_flops})",
        f"lora  r={res.lora_rank}: params={res.lora.trainable_params} "
        f"matvec_madds={res.lora.matvec_flops}",
        f"dense matvec_madds={res.soka.dense_equivalent_flops}",
    ]
    if res.soka_seconds is not None:
        lines.append(f"median wall-clock over {args.trials} trials: "
                     f"soka={res.soka_seconds * 1e6:.1f}us lora={res.lora_seconds * 1e6:.1f}us")
    _emit(args, "\n".join(lines), payload)
    return EXIT_OK


def _load_task_specs(path, seed: int):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise KronIOError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise KronIOError(f"{path}: invalid JSON ({exc})") from None
    specs = doc if isinstance(doc, list) else [doc]
    tasks = []
    for spec in specs:
        try:
            tasks.append(make_task((spec["rows"], spec["cols"]), spec.get("kp_rank_star", 1),
                                   spec.get("noise_eps", 0.0), spec.get("seed", seed),
                                   spec.get("n_samples")))
        except (KeyError, TypeError) as exc:
            raise ArgumentError(f"bad task spec {spec!r}: {exc}") from None
    return tasks


def cmd_train(args) -> int:
    methods = [m.strip() for m in args.method.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ArgumentError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if not methods:
        raise ArgumentError("--method is empty")
    if args.battery is not None and args.task_spec is not None:
        raise ArgumentError("--battery and --task-spec are mutually exclusive")
    config = TrainConfig(steps=args.steps, learning_rate=args.lr, batch_size=args.batch_size,
                         momentum=args.momentum, seed=args.seed, lora_rank=args.lora_rank)
    policy = _policy(args)
    if args.task_spec is not None:
        tasks = _load_task_specs(args.task_spec, args.seed)
    else:
        if args.battery not in (None, "default"):
            raise ArgumentError(f"unknown battery {args.battery!r}")
        tasks = default_battery()

    out = Path(args.out)
    diverged = []
    summary_rows = []
    for task in tasks:
        logs = []
        tdir = out / task.task_id
        for m in methods:
            lg = train(task, m, policy, config)
            write_train_log(lg, tdir / m)
            logs.append(lg)
            if lg.failed:
                diverged.append(f"{task.task_id}/{m}@{lg.failed_step}")
            summary_rows.append([task.task_id, m, lg.rank, lg.trainable_params, lg.loss[0],
                                 lg.loss[-1], max(lg.grad_norm), lg.failed])
        report = compare_runs(logs)
        write_comparison(report, tdir / "comparison")
        write_curves(logs, tdir / "curves.csv")
        if not args.json:
            finals = "  ".join(f"{lg.method}={lg.loss[-1]:.3e}" for lg in logs)
            sys.stdout.write(f"{task.task_id}: final loss {finals}\n")
    header = ["task_id", "method", "rank", "trainable_params", "initial_loss", "final_loss",
              "max_grad_norm", "failed"]
    write_report(out / "summary", header, summary_rows,
                 {"rows": [dict(zip(header, r)) for r in summary_rows],
                  "config": {"steps": config.steps, "learning_rate": config.learning_rate,
                             "batch_size": config.batch_size, "momentum": config.momentum,
                             "seed": config.seed, "lora_rank": config.lora_rank,
                             "methods": methods}})
    if args.json:
        sys.stdout.write(dumps({"tasks": len(tasks), "methods": methods,
                                "diverged": diverged}) + "\n")
    if diverged:
        raise NumericalError(f"diverged runs: {', '.join(diverged)}")
    return EXIT_OK


def _verify(path: Path, adapter, manifest: dict, spectrum) -> list[tuple[str, bool, str]]:
    checks = []
    bad = verify_checksums(path)
    checks.append(("payload_checksums", not bad, "ok" if not bad else "mismatch: " + ",".join(bad)))

    rng = np.random.default_rng(0)
    X = rng.standard_normal((adapter.in_dim, 8))
    with np.errstate(over="ignore", invalid="ignore"):
        Y = adapter.forward(X)
        Ym = adapter.merge() @ X
        err = float(np.linalg.norm(Y - Ym) / max(np.linalg.norm(Ym), np.finfo(float).tiny))
    checks.append(("merge_forward", bool(err <= 1e-9), f"rel_err={err:.3e}"))

    if manifest.get("state") != "init":
        checks.append(("init_exactness", True, "skipped (checkpoint is not at initialization)"))
    elif isinstance(adapter, SokaAdapter) and spectrum is not None:
        spec = np.asarray(spectrum)
        try:
            got = kpsvd(adapter.merge(), adapter.shape, 1).spectrum
        except (ArgumentError, NumericalError) as exc:
            checks.append(("init_exactness", False, f"decomposition failed: {exc}"))
            return checks
        scale = max(float(np.linalg.norm(spec)), np.finfo(float).tiny)
        e1 = float(np.linalg.norm(got - spec) / scale)
        e2 = float(np.linalg.norm(adapter.sigma - spec[:adapter.rank]) / scale)
        norms = [np.linalg.norm(a) for a in (*adapter.U, *adapter.V)]
        e3 = float(max((abs(v - 1) for v in norms), default=0.0))
        ok = e1 <= 1e-8 and e2 <= 1e-8 and e3 <= 1e-8
        checks.append(("init_exactness", bool(ok),
                       f"spectrum_rel_err={e1:.3e} sigma_rel_err={e2:.3e} factor_norm_err={e3:.3e}"))
    elif adapter.kind == "lora":
        ok = not np.any(adapter.B)
        checks.append(("init_exactness", ok, "B is zero" if ok else "B is nonzero"))
    else:
        checks.append(("init_exactness", True, "skipped (no reference spectrum)"))
    return checks


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    manifest = read_manifest(path)
    adapter = load_adapter(path)
    spectrum = load_spectrum(path)
    cost = adapter.cost_report()
    info = {"kind": manifest["kind"], "state": manifest.get("state"), "rows": manifest["rows"],
            "cols": manifest["cols"], "rank": manifest.get("rank"), "shape": manifest.get("shape"),
            "trainable_params": cost.trainable_params, "rank_decision": manifest.get("rank_decision")}
    lines = [f"kind={info['kind']} state={info['state']} weight={info['rows']}x{info['cols']} "
             f"rank={info['rank']} trainable_params={cost.trainable_params}"]
    if info["shape"]:
        lines.append(f"shape={','.join(map(str, info['shape']))}")
    if args.spectrum:
        if spectrum is None:
            lines.append("no spectrum stored")
            info["spectrum"] = None
        else:
            E = energy_curve(spectrum)
            info["spectrum"] = {"k": list(range(1, len(spectrum) + 1)),
                                "sigma": list(spectrum), "energy": list(E)}
            lines.append("k,sigma,energy")
            lines += [f"{k},{s:.17g},{e:.17g}" for k, (s, e) in enumerate(zip(spectrum, E), 1)]
    failed = False
    if args.verify:
        checks = _verify(path, adapter, manifest, spectrum)
        info["verify"] = {name: {"pass": ok, "detail": detail} for name, ok, detail in checks}
        for name, ok, detail in checks:
            lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed = not all(ok for _, ok, _ in checks)
    _emit(args, "\n".join(lines), info)
    if failed:
        raise CliError(EXIT_NUMERIC, "verify", "checkpoint verification failed")
    return EXIT_OK


def cmd_synth(args) -> int:
    """Write a random matrix, optionally with exact Kronecker structure."""
    rng = np.random.default_rng(args.seed)
    shape = _parse_shape(args.shape)
    if args.kp_rank is None:
        W = rng.standard_normal((shape.rows, shape.cols))
    else:
        if not 1 <= args.kp_rank <= shape.max_rank:
            raise ArgumentError(f"--kp-rank must lie in [1, {shape.max_rank}]")
        W = np.zeros((shape.rows, shape.cols))
        for _ in range(args.kp_rank):
            W += kron(rng.standard_normal((shape.m, shape.n)),
                      rng.standard_normal((shape.p, shape.q)))
    save_matrix(as_matrix(W), args.out)
    _emit(args, f"wrote {shape.rows}x{shape.cols} matrix to {args.out}",
          {"rows": shape.rows, "cols": shape.cols, "kp_rank": args.kp_rank})
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable stdout")
    common.add_argument("--seed", type=int, default=None,
                        help="global seed (default: $KRONADAPT_SEED or 0)")

    parser = _Parser(prog="kronadapt", description="Kronecker-product SVD adapters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", default=None,
                        help="JSON file whose keys override subcommand defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("decompose", parents=[common], help="KPSVD + rank selection -> checkpoint")
    p.add_argument("--input", required=True, help="KAMX matrix file")
    p.add_argument("--shape", required=True, help="m,n,p,q or 'auto'")
    p.add_argument("--rank", type=int, default=None, help="fixed rank (skips selection)")
    _add_policy_flags(p)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("bench", parents=[common], help="parameter / multiply-add / timing report")
    p.add_argument("--shape", required=True, help="m,n,p,q or 'auto' with --dims")
    p.add_argument("--dims", default=None, help="rows,cols for --shape auto")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--lora-rank", type=int, default=None, help="default: same as --rank")
    p.add_argument("--trials", type=int, default=11, help="timing trials (0 disables timing)")
    p.add_argument("--out", default=None, help="directory for report files")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", parents=[common], help="toy fine-tuning battery")
    p.add_argument("--battery", default=None, help="'default'")
    p.add_argument("--task-spec", default=None, help="JSON task spec (object or list)")
    p.add_argument("--method", default=",".join(DEFAULT_METHODS),
                   help=f"comma list from {','.join(METHODS)}")
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--lora-rank", type=int, default=None)
    _add_policy_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inspect", parents=[common], help="summarize / verify a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spectrum", action="store_true")
    p.add_argument("--verify", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", parents=[common], help="write a random test matrix")
    p.add_argument("--shape", required=True, help="m,n,p,q")
    p.add_argument("--kp-rank", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults overridden by the --config JSON file."""
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise KronIOError(f"{args.config}: no such file") from None
    except json.JSONDecodeError as exc:
        raise KronIOError(f"{args.config}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ArgumentError("config file must hold a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(k for k in cfg if k.replace("-", "_") not in known)
    if unknown:
        raise ArgumentError(f"unknown config keys: {', '.join(unknown)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        if args.seed is None:
            args.seed = _default_seed()
        return args.func(args)
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except (ArgumentError, DimensionError) as exc:
        code, kind, msg = EXIT_ARGS, "args", str(exc)
    except (KronIOError, OSError) as exc:
        code, kind, msg = EXIT_IO, "io", str(exc)
    except NumericalError as exc:
        code, kind, msg = EXIT_NUMERIC, "numeric", str(exc)
    msg = " ".join(msg.split())
    sys.stderr.write(f"kronadapt: error[{kind}]: {msg}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
