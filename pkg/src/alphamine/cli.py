"""Command-line entry point: ``alphamine {synth,mine,eval,backtest,report}``."""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import backtest as bt
from .config import ConfigError, JobConfig
from .data import DataError, MarketDataset, atomic_write_text, forward_returns, load_csv, synth_market, write_csv
from .engine import Miner, MiningError, format_library, motivation_study, parse_library
from .evaluation import EvaluationError, Evaluator, evaluate, ic, similarity
from .formula import FormulaError, parse

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_EMPTY = 4

log = logging.getLogger("alphamine")


def _dataset(cfg: JobConfig) -> MarketDataset:
    if cfg.data_csv:
        return load_csv(cfg.data_csv)
    planted = (parse(cfg.synth_plant), cfg.synth_strength) if cfg.synth_plant else None
    return synth_market(cfg.synth_days, cfg.synth_stocks, planted, cfg.synth_seed)


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in (("data", "data_csv"), ("max_depth", "max_depth"), ("seed", "seed"),
                      ("workers", "workers"), ("out", "output_dir")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = str(v)
    if "data_csv" in out:
        out.setdefault("synth_days", "0")
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args: argparse.Namespace) -> int:
    planted = None
    if args.plant:
        planted = (parse(args.plant), args.strength)
    ds = synth_market(args.days, args.stocks, planted, args.seed)
    write_csv(ds, args.out)
    print(f"wrote {args.out}: {ds.shape[0]} days x {ds.shape[1]} stocks")
    if planted is not None:
        rep = ic(evaluate(planted[0], ds), forward_returns(ds, 1))
        print(f"planted {args.plant}: measured IC {rep.raw_mean:.6f} over {rep.valid_days} days")
    return EXIT_OK


def cmd_mine(args: argparse.Namespace) -> int:
    cfg = JobConfig.load(args.config, _overrides(args)) if args.config else JobConfig.from_mapping(_overrides(args))
    ds = _dataset(cfg)
    out = Path(cfg.output_dir)
    with Miner(cfg.search_config(), ds) as m:
        lib = m.run()
        pool_lines = [
            f"{d}\t{i.text}\t{float(i.fitness)!r}\t{i.orientation}\n"
            for d, inds in sorted(m.pool.by_depth.items())
            for i in inds
        ]
        atomic_write_text(out / "config.txt", cfg.to_text())
        atomic_write_text(out / "library.tsv", format_library(lib))
        atomic_write_text(out / "archive.tsv", format_library(m.archive.members))
        atomic_write_text(out / "genepool.tsv", "".join(pool_lines))
        cols = ["depth", "run", "generation", "best", "mean", "size", "archive"]
        rows = ["\t".join(cols)] + ["\t".join(str(h[c]) for c in cols) for h in m.history]
        atomic_write_text(out / "run_log.tsv", "\n".join(rows) + "\n")
    print(f"library: {len(lib)} alphas (archive {len(m.archive)}) -> {out / 'library.tsv'}")
    for ind in lib[:10]:
        print(f"  {ind.fitness:.4f} {'+' if ind.orientation > 0 else '-'} {ind.text}")
    return EXIT_OK if lib else EXIT_EMPTY


def cmd_eval(args: argparse.Namespace) -> int:
    f = parse(args.formula)
    ds = load_csv(args.data)
    ev = Evaluator(ds, args.horizon)
    rep = ev.ic(f)
    if rep.valid:
        print(f"ic: {rep.ic:.6f}")
    else:
        print(f"ic: invalid ({rep.valid_days} usable days); fitness 0")
    print(f"orientation: {rep.orientation:+d}")
    print(f"valid_days: {rep.valid_days}")
    print(f"fitness: {rep.fitness:.6f}")
    a = ev.alpha(f)
    for other in args.versus or []:
        g = parse(other)
        try:
            print(f"similarity[{other}]: {similarity(a, ev.alpha(g)):.6f}")
        except EvaluationError as exc:
            print(f"similarity[{other}]: undefined ({exc})")
    return EXIT_OK


def _date(s: str | None) -> dt.date | None:
    return dt.date.fromisoformat(s) if s else None


def _read_library(path: Path):
    try:
        return parse_library(path.read_text())
    except FormulaError:
        raise
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_backtest(args: argparse.Namespace) -> int:
    lib = _read_library(Path(args.library))
    if not lib:
        print("library is empty", file=sys.stderr)
        return EXIT_EMPTY
    ds = load_csv(args.data)
    chosen = lib[: args.top_alphas]
    alphas = [(evaluate(i.formula, ds), i.orientation) for i in chosen]
    scores = bt.rank_ensemble(alphas)
    test = ds
    if args.start or args.end:
        test = ds.slice(_date(args.start), _date(args.end))
        lo = ds.calendar.index(test.calendar[0])
        scores = scores.values[lo : lo + test.shape[0]]
    k = None if args.k == "all" else int(args.k)
    out = Path(args.out)
    reports = []
    summary = {}
    for h in args.horizons:
        if h >= test.shape[0]:
            raise bt.BacktestError(f"horizon {h} exceeds the {test.shape[0]}-day test period")
        top = bt.top_k_backtest(scores, test, h, k, args.cost)
        folds = bt.stratified_backtest(scores, test, h, args.folds)
        bt.write_wealth_csv(top, out / f"wealth_{top.label}.csv")
        for r in folds:
            bt.write_wealth_csv(r, out / f"wealth_{r.label}.csv")
        reports.append(top)
        reports.extend(folds)
        fold_ar = [r.ar for r in folds]
        summary[f"h{h}"] = {"top": top.metrics(), "fold_ar": fold_ar}
    atomic_write_text(out / "metrics.txt", bt.metrics_lines(reports))
    atomic_write_text(out / "metrics.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    table = bt.metrics_table(reports)
    atomic_write_text(out / "metrics_table.txt", table)
    print(f"ensemble of {len(chosen)} alphas, {test.shape[0]} days x {test.shape[1]} stocks")
    print(table, end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    lib_path = run_dir / "library.tsv"
    lib = _read_library(lib_path) if lib_path.exists() else []
    print(f"library: {len(lib)} alphas")
    if lib:
        fit = np.array([i.fitness for i in lib])
        print(f"  ic max {fit.max():.4f}  mean {fit.mean():.4f}  top-50 mean {fit[:50].mean():.4f}")
        depths = {d: sum(1 for i in lib if i.depth == d) for d in sorted({i.depth for i in lib})}
        print("  by depth: " + ", ".join(f"{d}: {c}" for d, c in depths.items()))
        for ind in lib[: args.top]:
            print(f"  {ind.fitness:.4f} {'+' if ind.orientation > 0 else '-'} {ind.text}")
    table = run_dir / "metrics_table.txt"
    if table.exists():
        print(table.read_text(), end="")
    if args.motivation:
        if not lib:
            print("no library to study", file=sys.stderr)
            return EXIT_EMPTY
        if not args.data:
            raise ConfigError(["--motivation needs --data"])
        ds = load_csv(args.data)
        ev = Evaluator(ds, args.horizon)
        res = motivation_study(lib, ev, top=100, n_random=args.n_random, seed=args.seed)
        rows = ["alpha,alpha_ic,best_root_gene,root_gene_ic"]
        rows += [f'"{a}",{float(b)!r},"{c}",{float(d)!r}' for a, b, c, d in res.rows]
        atomic_write_text(run_dir / "motivation_genes.csv", "\n".join(rows) + "\n")
        edges, rand_counts, gene_counts = res.histogram()
        hist = ["bin_lo,bin_hi,random_count,root_gene_count"]
        hist += [f"{float(lo)!r},{float(hi)!r},{rc},{gc}" for lo, hi, rc, gc in zip(edges, edges[1:], rand_counts, gene_counts)]
        atomic_write_text(run_dir / "motivation_hist.csv", "\n".join(hist) + "\n")
        if res.note:
            print(res.note)
        print(
            f"root genes: median IC {np.median(res.gene_ics):.4f}; random depth-{res.random_depth} "
            f"formulas: median IC {np.median(res.random_ics):.4f}; one-sided Mann-Whitney p = {res.mann_whitney_p():.3g}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alphamine", description="Mine and backtest formulaic alpha factors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic market CSV")
    s.add_argument("--days", type=int, required=True)
    s.add_argument("--stocks", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--plant", help="formula whose next-day IC is planted")
    s.add_argument("--strength", type=float, default=0.1)
    s.add_argument("--out", default="market.csv")
    s.set_defaults(func=cmd_synth)

    m = sub.add_parser("mine", help="run the hierarchical search")
    m.add_argument("config", nargs="?", help="key = value config file")
    m.add_argument("--data", help="market CSV (overrides the config's data source)")
    m.add_argument("--max-depth", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--workers", type=int)
    m.add_argument("--out", help="output directory")
    m.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    m.set_defaults(func=cmd_mine)

    e = sub.add_parser("eval", help="IC of one formula")
    e.add_argument("formula")
    e.add_argument("--data", required=True)
    e.add_argument("--horizon", type=int, default=1)
    e.add_argument("--versus", action="append", metavar="FORMULA")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("backtest", help="rank-ensemble top-k and stratified backtests")
    b.add_argument("library")
    b.add_argument("--data", required=True)
    b.add_argument("--horizons", type=int, nargs="+", default=[1, 5])
    b.add_argument("--k", default="10", help="stocks held per tranche, or 'all'")
    b.add_argument("--cost", type=float, default=0.003, help="round-trip cost rate")
    b.add_argument("--folds", type=int, default=10)
    b.add_argument("--top-alphas", type=int, default=150)
    b.add_argument("--start", help="first test date (ISO)")
    b.add_argument("--end", help="last test date (ISO)")
    b.add_argument("--out", default="out/backtest")
    b.set_defaults(func=cmd_backtest)

    r = sub.add_parser("report", help="summarise a run directory, optionally with the root-gene study")
    r.add_argument("run_dir")
    r.add_argument("--top", type=int, default=10)
    r.add_argument("--motivation", action="store_true")
    r.add_argument("--data")
    r.add_argument("--horizon", type=int, default=1)
    r.add_argument("--n-random", type=int, default=20000)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FormulaError as exc:
        start, end = exc.span
        print(f"formula error: {exc}\n  {exc.text}\n  {' ' * start}{'^' * max(1, end - start)}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, bt.BacktestError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MiningError as exc:
        print(f"mining produced nothing: {exc}", file=sys.stderr)
        return EXIT_EMPTY


if __name__ == "__main__":
    sys.exit(main())
