import filecmp
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from quantpipe.cli import KEYS, RunConfig, derive_seed, main
from quantpipe.factorbase import FactorBase, make_record
from quantpipe.metrics import sharpe
from quantpipe.panel import panel_to_csv
from quantpipe.synthetic import price_volume_panel

PIPELINE_CFG = """\
# small end-to-end run
seed = 3
preprocess.impute = forward_fill
preprocess.max_gap = 2
miner.population_size = 24
miner.generations = 2
miner.top_k = 3
miner.min_fitness = -inf
combiner.train = 40
combiner.valid = 10
combiner.test = 10
combiner.step = 10
report.svg = true
"""


def write_input(path: Path, seed: int = 1) -> Path:
    p = price_volume_panel(12, 100, seed)
    text = panel_to_csv(p).splitlines()
    # drop a few observations so forward-fill has gaps to bridge
    kept = [line for k, line in enumerate(text) if k == 0 or k % 37]
    path.write_text("\n".join(kept) + "\n")
    return path


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(tmp: Path, out: str, workers: int = 1) -> Path:
    cfg = tmp / "run.cfg"
    if not cfg.exists():
        cfg.write_text(PIPELINE_CFG + f"panel.path = {write_input(tmp / 'in.csv')}\n")
    o = tmp / out
    for cmd in ("ingest", "mine", "backtest", "report"):
        assert run(cmd, "--config", cfg, "--out", o, "--workers", workers) == 0, cmd
    return o


def same_tree(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all(filecmp.cmp(a / f, b / f, shallow=False) for f in fa)


@pytest.fixture(scope="module")
def piped(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    return tmp, pipeline(tmp, "o1")


# -- config ------------------------------------------------------------------------

def test_config_defaults_and_overrides():
    cfg = RunConfig.build("miner.generations = 7\n", ["metrics.q=0.2"])
    assert cfg["miner.generations"] == 7 and cfg["metrics.q"] == 0.2
    assert set(cfg) == set(KEYS)
    with pytest.raises(Exception):
        RunConfig.build("nonsense")


def test_derive_seed_labels():
    assert derive_seed(3, "a") == derive_seed(3, "a")
    assert derive_seed(3, "a") != derive_seed(3, "b") != derive_seed(4, "b")


def test_unknown_key_exits_1(tmp_path, capsys):
    assert run("report", "--out", tmp_path, "--set", "miner.colour=red") == 1
    assert "miner.colour" in capsys.readouterr().err


# -- ingest ---------------------------------------------------------------------------

def test_ingest_summary_and_rerun(tmp_path, capsys):
    src = write_input(tmp_path / "in.csv")
    assert run("ingest", "--out", tmp_path / "o", "--set", f"panel.path={src}") == 0
    out = capsys.readouterr().out
    assert "instruments=12" in out and "dates=100" in out
    first = (tmp_path / "o" / "panel.csv").read_bytes()
    assert run("ingest", "--out", tmp_path / "o", "--set", f"panel.path={src}") == 0
    assert (tmp_path / "o" / "panel.csv").read_bytes() == first


def test_missing_input_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert run("ingest", "--out", tmp_path, "--set", f"panel.path={missing}") == 1
    assert str(missing) in capsys.readouterr().err


def test_empty_operator_whitelist_exits_1(piped, capsys):
    tmp, o = piped
    assert run("mine", "--out", o, "--set", "miner.operators=") == 1
    assert "operator" in capsys.readouterr().err


def test_mine_before_ingest(tmp_path):
    assert run("mine", "--out", tmp_path) == 1


# -- pipeline ----------------------------------------------------------------------------

def test_pipeline_outputs(piped):
    tmp, o = piped
    for rel in ("panel.csv", "summary.txt", "candidates.csv", "factorbase.jsonl", "report.csv",
                "backtest/run/equity.csv", "backtest/run/weights.csv", "backtest/run/ic.csv",
                "backtest/run/summary.txt", "report/run_equity.svg", "report/run_ic.svg"):
        assert (o / rel).is_file(), rel
    assert (o / "candidates.csv").read_text().startswith("rank,")


def test_backtest_sharpe_matches_metrics(piped):
    tmp, o = piped
    eq = np.array([float(line.split(",")[1]) for line in (o / "backtest/run/equity.csv").read_text().splitlines()[1:]])
    rets = eq[1:] / eq[:-1] - 1
    row = dict(zip(*(line.split(",") for line in (o / "backtest/run/report.csv").read_text().splitlines())))
    # performance is measured from the day after the first rebalance (date 0 here)
    assert float(row["sharpe"]) == pytest.approx(sharpe(rets), rel=1e-9)


def test_mine_rerun_identical(piped, tmp_path):
    tmp, o = piped
    o2 = tmp_path / "again"
    cfg = tmp / "run.cfg"
    run("ingest", "--config", cfg, "--out", o2)
    run("mine", "--config", cfg, "--out", o2, "--workers", 3)
    for f in ("candidates.csv", "factorbase.jsonl"):
        assert (o2 / f).read_bytes() == (o / f).read_bytes()


@pytest.mark.parametrize("rule", ["quantile", "optimizer"])
def test_backtest_rules(piped, rule):
    tmp, o = piped
    assert run("backtest", "--out", o, "--set", f"backtest.rule={rule}", "--set", f"backtest.run_id=r_{rule}",
               "--set", "backtest.expr=rank(ts_delta(close, 5))", "--set", "portfolio.lookback=20") == 0
    assert f"rule={rule}" in (o / f"backtest/r_{rule}/summary.txt").read_text()


def test_svg_flag_off(piped, tmp_path):
    tmp, o = piped
    o2 = tmp_path / "nosvg"
    cfg = tmp / "run.cfg"
    for cmd in ("ingest", "backtest", "report"):
        assert run(cmd, "--config", cfg, "--out", o2, "--set", "report.svg=false",
                   "--set", "backtest.expr=rank(close)") == 0
    assert not list(o2.rglob("*.svg"))
    first = (o2 / "report.csv").read_bytes()
    assert run("report", "--config", cfg, "--out", o2) == 0
    assert (o2 / "report.csv").read_bytes() == first


def test_full_pipeline_deterministic(piped):
    tmp, _ = piped  # other tests add runs to o1, so compare two fresh trees
    assert same_tree(pipeline(tmp, "d1"), pipeline(tmp, "d2", workers=3))


# -- schedule --------------------------------------------------------------------------------

def base_file(tmp_path, edges):
    """Factor base where ``edges`` (a, b) means b depends on a; nodes named by letters."""
    fb = FactorBase()
    names = sorted({n for e in edges for n in e})
    ids = {}
    pending = set(names)
    while pending:
        for n in sorted(pending):
            pre = [a for a, b in edges if b == n]
            if all(p in ids for p in pre):
                rec = make_record(f"add(close, {float(ord(n))})", name=n, created_at="2024-01-02",
                                  depends_on_factors=[ids[p] for p in pre])
                ids[n] = fb.commit(rec)
                pending.discard(n)
    path = tmp_path / "fb.jsonl"
    fb.save(path)
    return path, ids


def schedule(path, *targets):
    args = ["schedule", "--set", f"factorbase.path={path}"]
    for t in targets:
        args += ["--target", t]
    return run(*args)


def test_schedule_chain(tmp_path, capsys):
    path, ids = base_file(tmp_path, [("a", "b"), ("b", "c")])
    assert schedule(path, "c") == 0
    assert capsys.readouterr().out.split() == [ids["a"], ids["b"], ids["c"]]


def test_schedule_diamond(tmp_path, capsys):
    path, ids = base_file(tmp_path, [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")])
    assert schedule(path, "d") == 0
    order = capsys.readouterr().out.split()
    assert order[0] == ids["a"] and order[-1] == ids["d"]
    assert sorted(order[1:3]) == sorted([ids["b"], ids["c"]]) and order[1] < order[2]


def test_schedule_cycle_exits_2(tmp_path, capsys):
    from dataclasses import replace
    a, b = make_record("add(close, 1.0)"), make_record("add(close, 2.0)")
    a, b = replace(a, depends_on_factors=(b.id,)), replace(b, depends_on_factors=(a.id,))
    path = tmp_path / "cyc.jsonl"
    path.write_text(a.to_json() + "\n" + b.to_json() + "\n")
    assert schedule(path) == 2
    assert "cycle" in capsys.readouterr().err.lower()


def test_schedule_unknown_target(tmp_path):
    path, _ = base_file(tmp_path, [("a", "b")])
    assert schedule(path, "zzz") == 1


def test_module_entry_point(tmp_path):
    path, ids = base_file(tmp_path, [("a", "b")])
    r = subprocess.run([sys.executable, "-m", "quantpipe", "schedule", "--set", f"factorbase.path={path}",
                        "--target", "b"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.split() == [ids["a"], ids["b"]]
