"""``ltelab`` command line: train, eval, compare, bound, dist, export.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure
(divergence, unreadable checkpoint, I/O).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import metrics as M
from .config import ConfigError, Mode, TrainConfig, config_dict, dump_config, load_config, parse_overrides
from .env import DIGIT0, HintSpec, HintVariant, generate_task, render_prompt
from .policy import CheckpointError, PolicyParams, load_checkpoint
from .theory import (
    IntractableError,
    enumerate_answer_distribution,
    monte_carlo_answer_distribution,
    pruning_bound,
)
from .trainer import DivergenceError, eval_sample_config, heldout_set, train
from .warmstart import policy_shape, pretrain

log = logging.getLogger("ltelab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("allow_abbrev", False)  # no silent prefix matching of flags
        super().__init__(*a, **kw)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    mode: str
    seed: int
    started: str
    finished: str
    version: str
    config: dict
    config_text: str
    run_dir: str
    metrics: str
    eval: str
    config_file: str
    checkpoints: list

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _fresh_run_dir(root: Path, cfg: TrainConfig) -> Path:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = f"{stamp}-{cfg.mode.value}-{cfg.seed}"
    path, n = root / base, 1
    while path.exists():
        path, n = root / f"{base}.{n}", n + 1
    path.mkdir(parents=True)
    return path


def run_training(cfg: TrainConfig, out_root: Path, init: Optional[PolicyParams] = None,
                 run_dir: Optional[Path] = None) -> RunManifest:
    """Train one configuration into its own run directory and write the manifest."""
    started = _now()
    if run_dir is None:
        run_dir = _fresh_run_dir(Path(out_root), cfg)
    else:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(dump_config(cfg))
    params, _ = train(cfg, run_dir, init=init)
    report = M.evaluate(params, heldout_set(cfg), cfg.eval_k, eval_sample_config(cfg),
                        seed=cfg.seed, backend=cfg.kernel_backend)
    report.write_json(run_dir / "eval.json")
    ckpts = sorted(str(p) for p in run_dir.glob("ckpt-*.bin"))
    manifest = RunManifest(
        mode=cfg.mode.value,
        seed=cfg.seed,
        started=started,
        finished=_now(),
        version=__version__,
        config=config_dict(cfg),
        config_text=dump_config(cfg),
        run_dir=str(run_dir),
        metrics=str(run_dir / "metrics.jsonl"),
        eval=str(run_dir / "eval.json"),
        config_file=str(run_dir / "config.txt"),
        checkpoints=ckpts,
    )
    manifest.write(run_dir / "manifest.json")
    return manifest


# -- argument plumbing -------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    g = p.add_argument_group("config overrides")
    for f in fields(TrainConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="V",
                       help=f"override {f.name}")


def _config_from_args(args) -> TrainConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.config is not None:
        return load_config(args.config, overrides)
    return TrainConfig(**parse_overrides(overrides))


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ltelab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one mode/seed into a run directory")
    _add_config_flags(p)
    p.add_argument("--out-root", type=Path, default=Path("runs"))
    p.add_argument("--run-dir", type=Path, help="exact run directory (default: a fresh one under --out-root)")

    p = sub.add_parser("eval", help="Mean@k / Pass@k of a checkpoint on the held-out set")
    p.add_argument("checkpoint", type=Path)
    _add_config_flags(p)
    p.add_argument("--out", type=Path, help="write the report JSON here")
    p.add_argument("--eval-seed", type=int, default=0)

    p = sub.add_parser("compare", help="GRPO, GRPO+Extra and LTE on shared seeds")
    _add_config_flags(p)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--modes", type=lambda s: [Mode(x) for x in s.split(",")],
                   default=list(Mode), help="comma-separated subset of GRPO,GRPO+Extra,LTE")
    p.add_argument("--out-root", type=Path, default=Path("runs"))
    p.add_argument("--csv", type=Path, help="merged per-step CSV (default: <out-root>/compare.csv)")

    p = sub.add_parser("bound", help="tabulate the hint-pruning lower bound")
    p.add_argument("--alpha", type=_float_list, default=[1.0])
    p.add_argument("--delta", type=_float_list, default=[0.1])
    p.add_argument("--tau", type=_float_list, default=[0.5])
    p.add_argument("--n", type=_int_list, default=[8])
    p.add_argument("--json", action="store_true", help="emit JSON rows instead of a table")

    p = sub.add_parser("dist", help="answer distribution of a checkpoint on one task")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--difficulty", type=int, default=1)
    p.add_argument("--task-seed", type=int, default=0)
    p.add_argument("--hint", type=_int_list, default=[], help="wrong answers to list in the hint")
    p.add_argument("--concise", action="store_true")
    p.add_argument("--max-len", type=int, default=6)
    p.add_argument("--samples", type=int, default=0, help="Monte-Carlo samples (0 = exact enumeration)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export", help="metrics.jsonl to CSV with EMA columns")
    p.add_argument("metrics", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--alpha", type=float, default=0.1)
    return parser


# -- subcommands -------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    manifest = run_training(cfg, args.out_root, run_dir=args.run_dir)
    print(manifest.run_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    params = load_checkpoint(args.checkpoint, expected_shape=policy_shape(cfg))
    report = M.evaluate(params, heldout_set(cfg), cfg.eval_k, eval_sample_config(cfg),
                        seed=args.eval_seed, backend=cfg.kernel_backend)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        report.write_json(args.out)
    return EXIT_OK


COMPARE_COLUMNS = ("mode", "seed", "step", "none_pass", "none_pass_ema", "some_pass", "all_pass",
                   "entropy", "response_length", "truncated_frac", "extra_groups", "rescued_groups")
SUMMARY_COLUMNS = ("mode", "seed", "final_none_pass_ema", "mean_at_k", "pass_at_k", "run_dir")


def compare(cfg: TrainConfig, seeds: Sequence[int], out_root: Path, modes: Sequence[Mode] = tuple(Mode),
            csv_path: Optional[Path] = None) -> tuple[list[dict], list[dict]]:
    """Run every mode on every seed; the base policy is shared within a seed."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    curves, summary = [], []
    for seed in seeds:
        base = pretrain(cfg.replace(seed=seed))
        for mode in modes:
            run_cfg = cfg.replace(seed=seed, mode=mode)
            man = run_training(run_cfg, out_root, init=base)
            records = M.read_jsonl(man.metrics)
            smooth = M.ema([r["none_pass"] for r in records], cfg.ema_alpha)
            for r, e in zip(records, smooth):
                curves.append({"mode": mode.value, "seed": seed, "none_pass_ema": e,
                               **{k: r[k] for k in COMPARE_COLUMNS if k in r}})
            report = json.loads(Path(man.eval).read_text())
            summary.append({
                "mode": mode.value, "seed": seed,
                "final_none_pass_ema": smooth[-1] if smooth else float("nan"),
                "mean_at_k": report["overall"]["mean_at_k"],
                "pass_at_k": report["overall"]["pass_at_k"],
                "run_dir": man.run_dir,
            })
    csv_path = Path(csv_path) if csv_path else out_root / "compare.csv"
    _write_csv(csv_path, COMPARE_COLUMNS, curves)
    _write_csv(csv_path.with_name(csv_path.stem + "_summary.csv"), SUMMARY_COLUMNS, summary)
    return curves, summary


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})


def cmd_compare(args) -> int:
    cfg = _config_from_args(args)
    _, summary = compare(cfg, args.seeds, args.out_root, args.modes, args.csv)
    print(f"{'mode':<12}{'seed':>5}{'none_pass_ema':>15}{'mean@k':>9}{'pass@k':>9}")
    for s in summary:
        print(f"{s['mode']:<12}{s['seed']:>5}{s['final_none_pass_ema']:>15.3f}"
              f"{s['mean_at_k']:>9.3f}{s['pass_at_k']:>9.3f}")
    return EXIT_OK


def bound_table(alphas, deltas, taus, ns) -> list[dict]:
    rows = []
    for a in alphas:
        for d in deltas:
            for t in taus:
                for n in ns:
                    try:
                        value, error = pruning_bound(a, d, t, n), None
                    except ValueError as exc:
                        value, error = None, str(exc)
                    rows.append({"alpha": a, "delta": d, "tau": t, "n": n, "bound": value, "error": error})
    return rows


def cmd_bound(args) -> int:
    rows = bound_table(args.alpha, args.delta, args.tau, args.n)
    if args.json:
        for r in rows:
            print(json.dumps(r, sort_keys=True))
    else:
        print(f"{'alpha':>8}{'delta':>8}{'tau':>8}{'n':>6}  bound")
        for r in rows:
            cell = f"{r['bound']:.6f}" if r["error"] is None else f"error: {r['error']}"
            print(f"{r['alpha']:>8g}{r['delta']:>8g}{r['tau']:>8g}{r['n']:>6d}  {cell}")
    return EXIT_OK


def cmd_dist(args) -> int:
    params = load_checkpoint(args.checkpoint)
    modulus = params.shape.vocab - DIGIT0
    q = generate_task(args.task_seed, args.difficulty, modulus)
    if args.hint:
        variant = HintVariant.CONCISE_HINT if args.concise else HintVariant.HINT
    else:
        variant = HintVariant.CONCISE if args.concise else HintVariant.PLAIN
    prompt = render_prompt(q, HintSpec(variant, tuple(args.hint)))
    if args.samples > 0:
        dist = monte_carlo_answer_distribution(params, prompt, args.max_len, args.samples, args.seed)
    else:
        dist = enumerate_answer_distribution(params, prompt, args.max_len)
    out = {"query": q.id, "truth": q.truth, "hint": list(args.hint), **dist.to_dict()}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_export(args) -> int:
    out = args.out or args.metrics.with_suffix(".csv")
    M.export_csv(M.read_jsonl(args.metrics), out, alpha=args.alpha)
    print(out)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "bound": cmd_bound,
    "dist": cmd_dist,
    "export": cmd_export,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, CheckpointError, IntractableError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
