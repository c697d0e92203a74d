"""Batch command line: ingest -> mine -> backtest -> report, plus schedule.

Every command reads a flat ``key=value`` config (``--config``), applies
``--set key=value`` overrides and writes under the output directory
(``--out`` or the ``out`` key)::

    <out>/panel.csv, summary.txt           ingest
    <out>/candidates.csv, factorbase.jsonl mine
    <out>/backtest/<run_id>/...            backtest
    <out>/report.csv, report/*.svg         report

Exit codes: 0 success, 1 data or config error, 2 domain error (cycle,
infeasible optimisation), 3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import combiner, miner
from ._io import atomic_write_text
from .dsl import FactorMatrix, evaluate, parse, to_text
from .errors import ConfigError, DataError, DomainError, InvariantError, QuantError
from .factorbase import FactorBase, make_record
from .metrics import (
    FactorReport,
    REPORT_FIELDS,
    _fmt,
    forward_returns,
    forward_splits,
)
from .panel import PanelFrame, PreprocessSpec, load_panel, panel_to_csv, preprocess, summarize
from .portfolio import QpTemplate, rebalance_indices, run_backtest

log = logging.getLogger("quantpipe")


# -- config -----------------------------------------------------------------------

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv: Callable) -> Callable:
    def parse_list(s: str):
        return tuple(conv(x.strip()) for x in s.split(",") if x.strip())
    return parse_list


@dataclass(frozen=True)
class Key:
    conv: Callable
    default: str
    doc: str


_MC = miner.MinerConfig()

# every key the commands consume; anything else in a config file is rejected
KEYS: dict[str, Key] = {
    "seed": Key(int, "0", "global seed; module streams derive from it by label"),
    "out": Key(str, "out", "output directory (overridden by --out)"),
    "panel.path": Key(str, "", "input long-format CSV date,instrument,field,value (ingest)"),
    "preprocess.impute": Key(str, "none", "none | forward_fill"),
    "preprocess.max_gap": Key(int, "0", "longest gap (dates) forward_fill may bridge"),
    "preprocess.winsorize_p": Key(float, "0", "cross-sectional clip fraction in [0, 0.5)"),
    "preprocess.winsorize_fields": Key(_list(str), "", "fields to winsorize (comma list)"),
    "preprocess.standardize": Key(str, "none", "none | zscore_cross_section"),
    "preprocess.standardize_fields": Key(_list(str), "", "fields to z-score (comma list)"),
    "metrics.price_field": Key(str, "close", "field holding prices"),
    "metrics.horizon": Key(int, "1", "forward-return horizon in dates"),
    "metrics.q": Key(float, "0.1", "long/short quantile"),
    "metrics.cost_rate": Key(float, "0", "cost per unit of turnover"),
    "metrics.periods_per_year": Key(int, "252", "annualisation factor"),
    "metrics.ic_method": Key(str, "spearman", "spearman | pearson"),
    "miner.population_size": Key(int, str(_MC.population_size), "GP population"),
    "miner.generations": Key(int, str(_MC.generations), "GP generations"),
    "miner.tournament_size": Key(int, str(_MC.tournament_size), "tournament size"),
    "miner.p_mutation": Key(float, str(_MC.p_mutation), "mutation probability"),
    "miner.p_crossover": Key(float, str(_MC.p_crossover), "crossover probability"),
    "miner.max_depth": Key(int, str(_MC.max_depth), "expression depth cap"),
    "miner.max_nodes": Key(int, str(_MC.max_nodes), "expression size cap"),
    "miner.fitness": Key(str, _MC.fitness, "icir | ic_mean | sharpe"),
    "miner.min_fitness": Key(float, str(_MC.min_fitness), "acceptance floor"),
    "miner.redundancy_threshold": Key(float, str(_MC.redundancy_threshold),
                                      "max |corr| to the base and to accepted candidates"),
    "miner.operators": Key(_list(str), ",".join(_MC.operators), "operator whitelist"),
    "miner.fields": Key(_list(str), ",".join(_MC.fields), "meta-field whitelist"),
    "miner.group_fields": Key(_list(str), "", "fields usable as group labels"),
    "miner.windows": Key(_list(int), ",".join(map(str, _MC.windows)), "window lengths"),
    "miner.fractions": Key(_list(float), ",".join(map(str, _MC.fractions)), "winsorize fractions"),
    "miner.constants": Key(_list(float), ",".join(map(str, _MC.constants)), "constant leaves"),
    "miner.p_constant": Key(float, str(_MC.p_constant), "probability a leaf is a constant"),
    "miner.validation_fraction": Key(float, str(_MC.validation_fraction),
                                     "trailing share of dates used for fitness"),
    "miner.top_k": Key(int, str(_MC.top_k), "max accepted candidates"),
    "factorbase.path": Key(str, "", "factor base file (default <out>/factorbase.jsonl)"),
    "backtest.run_id": Key(str, "run", "name of the backtest output folder"),
    "backtest.expr": Key(str, "", "score expression; empty = use the factor base"),
    "backtest.rule": Key(str, "quantile", "quantile | optimizer"),
    "backtest.rebalance_every": Key(int, "1", "rebalance every n dates"),
    "portfolio.c1": Key(float, "0.0004", "risk cap on w'Sigma w"),
    "portfolio.c2": Key(float, "0.1", "turnover cap"),
    "portfolio.c3": Key(float, "0.05", "per-name weight cap"),
    "portfolio.budget": Key(_bool, "false", "require sum(w) = 1"),
    "portfolio.delta": Key(float, "0.1", "covariance shrinkage intensity"),
    "portfolio.lookback": Key(int, "60", "covariance lookback in dates"),
    "portfolio.turnover_mode": Key(str, "elementwise", "elementwise | l1"),
    "combiner.enabled": Key(_bool, "true", "combine several base factors with rolling ridge"),
    "combiner.train": Key(int, "60", "train window (dates)"),
    "combiner.valid": Key(int, "20", "validation window (dates)"),
    "combiner.test": Key(int, "20", "test window (dates)"),
    "combiner.step": Key(int, "20", "window step (dates)"),
    "combiner.lambdas": Key(_list(float), "0,0.01,0.1,1,10", "ridge grid chosen on validation IC"),
    "combiner.importance_repetitions": Key(int, "5", "permutation-importance repetitions"),
    "report.svg": Key(_bool, "false", "also draw equity and IC charts as SVG"),
    "schedule.targets": Key(_list(str), "", "factor ids or names to schedule (or --target)"),
}


class RunConfig(dict):
    """Typed flat config; ``cfg["miner.generations"]`` returns the converted value."""

    @classmethod
    def build(cls, text: str = "", overrides: Sequence[str] = (), source: str = "<config>") -> "RunConfig":
        raw = {k: v.default for k, v in KEYS.items()}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            raw[cls._known(k, f"{source}:{lineno}")] = v
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set {item!r}: expected key=value")
            k, v = (s.strip() for s in item.split("=", 1))
            raw[cls._known(k, "--set")] = v
        cfg = cls()
        for k, v in raw.items():
            try:
                cfg[k] = KEYS[k].conv(v)
            except ValueError as e:
                raise ConfigError(f"bad value for {k}: {v!r} ({e})") from None
        return cfg

    @staticmethod
    def _known(k: str, where: str) -> str:
        if k not in KEYS:
            raise ConfigError(f"{where}: unknown key {k!r}")
        return k

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.items() if k.startswith(p)}


def derive_seed(seed: int, label: str) -> int:
    """Independent stream seed for ``label`` (e.g. "miner.search")."""
    h = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(h[:8], "little")


# -- shared plumbing --------------------------------------------------------------

def _out(cfg: RunConfig) -> Path:
    return Path(cfg["out"])


def _fb_path(cfg: RunConfig) -> Path:
    return Path(cfg["factorbase.path"]) if cfg["factorbase.path"] else _out(cfg) / "factorbase.jsonl"


def _load_ingested(cfg: RunConfig) -> PanelFrame:
    path = _out(cfg) / "panel.csv"
    if not path.exists():
        raise DataError(f"{path} not found; run `ingest` first")
    return load_panel(path).canonical()


def miner_config(cfg: RunConfig) -> miner.MinerConfig:
    m = cfg.section("miner")
    mt = cfg.section("metrics")
    mc = miner.MinerConfig(seed=derive_seed(cfg["seed"], "miner.search"), q=mt["q"],
                           cost_rate=mt["cost_rate"], periods_per_year=mt["periods_per_year"],
                           ic_method=mt["ic_method"], **m)
    mc.validate()
    return mc


def _csv_kv(d: dict) -> str:
    return "".join(f"{k}={_fmt(v) if isinstance(v, float) else v}\n" for k, v in d.items())


# -- commands -----------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, workers: int = 1) -> int:
    if not cfg["panel.path"]:
        raise ConfigError("panel.path is not set")
    panel = load_panel(cfg["panel.path"])
    pp = cfg.section("preprocess")
    panel = preprocess(panel, PreprocessSpec(**pp)).canonical()
    out = _out(cfg)
    atomic_write_text(out / "panel.csv", panel_to_csv(panel))
    atomic_write_text(out / "summary.txt", _csv_kv(summarize(panel)))
    print(_csv_kv(summarize(panel)), end="")
    return 0


def _base_surfaces(base: FactorBase, panel: PanelFrame) -> list[tuple[str, FactorMatrix]]:
    return [(r.id, evaluate(parse(r.expr_text), panel)) for r in base.active()]


def cmd_mine(cfg: RunConfig, workers: int = 1) -> int:
    mc = miner_config(cfg)
    panel = _load_ingested(cfg)
    fwd = forward_returns(panel, cfg["metrics.price_field"], cfg["metrics.horizon"])
    path = _fb_path(cfg)
    base = FactorBase.load(path, panel.fields)
    base_fm = [fm for _, fm in _base_surfaces(base, panel)]
    cands = miner.mine(panel, fwd, base_fm, mc, workers=workers, progress=sys.stderr)
    created = str(panel.dates[-1])
    for c in cands:
        rec = make_record(c.text, created_at=created, report=c.report)
        if rec.id not in base:
            base.commit(rec)
    base.save(path)
    atomic_write_text(_out(cfg) / "candidates.csv", miner.candidates_csv(cands))
    print(f"accepted {len(cands)} candidate(s); factor base holds {len(base)}")
    return 0


def _score_source(cfg: RunConfig, panel: PanelFrame, out_dir: Path, fwd) -> tuple[FactorMatrix, str]:
    if cfg["backtest.expr"]:
        e = parse(cfg["backtest.expr"])
        return evaluate(e, panel), to_text(e)
    base = FactorBase.load(_fb_path(cfg), panel.fields)
    surfaces = _base_surfaces(base, panel)
    if not surfaces:
        raise DataError("no backtest.expr given and the factor base has no active factors")
    if len(surfaces) == 1 or not cfg["combiner.enabled"]:
        fid = surfaces[0][0]
        return surfaces[0][1], base[fid].expr_text
    ids = [fid for fid, _ in surfaces]
    fms = [fm for _, fm in surfaces]
    c = cfg.section("combiner")
    plan = forward_splits(len(panel.dates), c["train"], c["valid"], c["test"], c["step"])
    scores = combiner.rolling_fit_predict(fms, fwd, plan, c["lambdas"], factor_ids=ids)
    # explanation of the last window's model
    w = plan.windows[-1]
    train = [t for t in w.train if t + fwd.horizon <= w.valid.start]
    model = combiner.fit(fms, fwd, train, c["lambdas"][0], ids)
    imp = combiner.permutation_importance(model, fms, fwd, c["importance_repetitions"],
                                          derive_seed(cfg["seed"], "combiner.importance"),
                                          dates=list(w.test), method=cfg["metrics.ic_method"])
    atomic_write_text(out_dir / "model.csv", model.to_csv())
    atomic_write_text(out_dir / "importance.csv", imp.to_csv())
    return scores, "combined:" + "+".join(ids)


def cmd_backtest(cfg: RunConfig, workers: int = 1) -> int:
    panel = _load_ingested(cfg)
    run_id = cfg["backtest.run_id"]
    if not run_id or "/" in run_id or run_id.startswith("."):
        raise ConfigError(f"invalid backtest.run_id {run_id!r}")
    out_dir = _out(cfg) / "backtest" / run_id
    mt = cfg.section("metrics")
    fwd = forward_returns(panel, mt["price_field"], mt["horizon"])
    scores, label = _score_source(cfg, panel, out_dir, fwd)
    schedule = rebalance_indices(len(panel.dates), cfg["backtest.rebalance_every"])
    qp = QpTemplate(**cfg.section("portfolio"))
    res = run_backtest(panel, scores, schedule, rule=cfg["backtest.rule"], q=mt["q"], qp=qp,
                       cost_rate=mt["cost_rate"], price_field=mt["price_field"],
                       periods_per_year=mt["periods_per_year"])
    if not np.all(np.isfinite(res.equity)):
        raise InvariantError("equity curve contains non-finite values")
    atomic_write_text(out_dir / "equity.csv", res.equity_csv())
    atomic_write_text(out_dir / "weights.csv", res.weights.to_csv())
    atomic_write_text(out_dir / "report.csv", _report_csv(run_id, res.report))
    atomic_write_text(out_dir / "ic.csv", res.report.ic_csv(panel.dates))
    summary = {"run_id": run_id, "source": label, "rule": cfg["backtest.rule"],
               **res.report.scalars(), "skipped_rebalances": len(res.skipped),
               "final_equity": float(res.equity[-1])}
    atomic_write_text(out_dir / "summary.txt", _csv_kv(summary))
    print(_csv_kv(summary), end="")
    return 0


def _report_csv(run_id: str, rep: FactorReport) -> str:
    return "run_id," + ",".join(REPORT_FIELDS) + "\n" + rep.csv_row(run_id) + "\n"


def cmd_report(cfg: RunConfig, workers: int = 1) -> int:
    out = _out(cfg)
    runs = sorted(p for p in (out / "backtest").glob("*/report.csv")) if (out / "backtest").is_dir() else []
    if not runs:
        raise DataError(f"no backtest results under {out / 'backtest'}")
    lines = ["run_id," + ",".join(REPORT_FIELDS)]
    for p in runs:
        body = p.read_text(encoding="utf-8").splitlines()
        if len(body) != 2:
            raise DataError(f"{p}: expected a header and one row")
        lines.append(body[1])
    atomic_write_text(out / "report.csv", "\n".join(lines) + "\n")
    if cfg["report.svg"]:
        for p in runs:
            run = p.parent
            eq = _read_series(run / "equity.csv")
            ic = _read_series(run / "ic.csv")
            atomic_write_text(out / "report" / f"{run.name}_equity.svg", line_chart_svg(eq, f"{run.name} equity"))
            atomic_write_text(out / "report" / f"{run.name}_ic.svg", line_chart_svg(ic, f"{run.name} IC"))
    print(f"report over {len(runs)} run(s) written to {out / 'report.csv'}")
    return 0


def _read_series(path: Path) -> np.ndarray:
    rows = path.read_text(encoding="utf-8").splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows], dtype=np.float64)


def line_chart_svg(y: np.ndarray, title: str, width: int = 640, height: int = 240) -> str:
    """Minimal SVG polyline; NaN points break the line."""
    pad = 30
    finite = y[np.isfinite(y)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    n = max(len(y) - 1, 1)
    segs, cur = [], []
    for i, v in enumerate(y):
        if not math.isfinite(v):
            if cur:
                segs.append(cur)
            cur = []
            continue
        x = pad + (width - 2 * pad) * i / n
        yy = height - pad - (height - 2 * pad) * (v - lo) / (hi - lo)
        cur.append(f"{x:.2f},{yy:.2f}")
    if cur:
        segs.append(cur)
    body = "".join(f'<polyline fill="none" stroke="black" stroke-width="1" points="{" ".join(s)}"/>\n'
                   for s in segs)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
            f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
            f'fill="none" stroke="#999"/>\n'
            f'<text x="{pad}" y="{pad - 10}" font-size="12">{title}</text>\n'
            f'<text x="2" y="{pad + 4}" font-size="9">{hi:.4g}</text>\n'
            f'<text x="2" y="{height - pad}" font-size="9">{lo:.4g}</text>\n'
            f"{body}</svg>\n")


def cmd_schedule(cfg: RunConfig, targets: Sequence[str] = (), workers: int = 1) -> int:
    base = FactorBase.load(_fb_path(cfg))
    wanted = list(targets) or list(cfg["schedule.targets"]) or [r.id for r in base.active()]
    by_name = {r.name: r.id for r in base.records.values()}
    ids = []
    for t in wanted:
        if t in base:
            ids.append(t)
        elif t in by_name:
            ids.append(by_name[t])
        else:
            raise ConfigError(f"unknown schedule target {t!r}")
    for fid in base.schedule(ids):
        print(fid)
    return 0


COMMANDS = {"ingest": cmd_ingest, "mine": cmd_mine, "backtest": cmd_backtest, "report": cmd_report}


def exit_code(err: BaseException) -> int:
    if isinstance(err, (DataError, ConfigError)):
        return 1
    if isinstance(err, DomainError):
        return 2
    return 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quantpipe", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("ingest", "mine", "backtest", "report", "schedule"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", help="output directory")
        if name == "schedule":
            p.add_argument("--target", action="append", default=[], help="factor id or name")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        text, source = "", "<defaults>"
        if args.config:
            try:
                text = Path(args.config).read_text(encoding="utf-8")
            except OSError as e:
                raise ConfigError(f"cannot read config {args.config}: {e.strerror or e}") from None
            source = args.config
        overrides = list(args.set) + ([f"out={args.out}"] if args.out else [])
        cfg = RunConfig.build(text, overrides, source)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command == "schedule":
            return cmd_schedule(cfg, args.target, args.workers)
        return COMMANDS[args.command](cfg, args.workers)
    except QuantError as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code(e)
    except KeyError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything unexpected is an internal fault
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
