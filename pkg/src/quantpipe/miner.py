"""Genetic-programming search over factor expressions.

Random trees seed the population; each generation applies tournament
selection, subtree crossover, subtree mutation and reproduction, carrying
the best candidate forward unchanged. Fitness is measured on the trailing
validation slice of the date range. The final archive is filtered by a
fitness floor and by redundancy against the factor base and earlier picks.
"""
from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .dsl import Call, Const, Expr, FactorMatrix, Field, evaluate, is_valid, to_text
from .dsl.nodes import get_at, replace_at, size, walk
from .dsl.registry import FRACTION, GROUP, REGISTRY, WINDOW
from .errors import ConfigError, DataError
from .metrics import REPORT_FIELDS, FactorReport, _fmt, evaluate_factor, pooled_correlation
from .panel import PanelFrame

FITNESS_KEYS = ("icir", "ic_mean", "sharpe")
RETRIES = 8
# group operators need a group field, so they are opt-in
DEFAULT_OPERATORS = tuple(n for n, s in REGISTRY.items() if GROUP not in s.params)


@dataclass(frozen=True)
class MinerConfig:
    seed: int = 0
    population_size: int = 100
    generations: int = 20
    tournament_size: int = 3
    p_mutation: float = 0.3
    p_crossover: float = 0.6
    max_depth: int = 8
    max_nodes: int = 64
    fitness: str = "icir"
    min_fitness: float = 0.0
    redundancy_threshold: float = 0.7
    operators: tuple[str, ...] = DEFAULT_OPERATORS
    fields: tuple[str, ...] = ("close", "volume")
    group_fields: tuple[str, ...] = ()
    windows: tuple[int, ...] = (3, 5, 10, 20)
    fractions: tuple[float, ...] = (0.01, 0.05, 0.1)
    constants: tuple[float, ...] = (-1.0, 0.5, 1.0, 2.0)
    p_constant: float = 0.1
    validation_fraction: float = 0.25
    top_k: int = 10
    q: float = 0.1
    cost_rate: float = 0.0
    periods_per_year: int = 252
    ic_method: str = "spearman"

    def __post_init__(self):
        object.__setattr__(self, "operators", tuple(self.operators))
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "group_fields", tuple(self.group_fields))
        object.__setattr__(self, "windows", tuple(int(w) for w in self.windows))

    def validate(self) -> None:
        if not self.operators:
            raise ConfigError("operator whitelist is empty")
        if not self.fields:
            raise ConfigError("meta-field whitelist is empty")
        unknown = [o for o in self.operators if o not in REGISTRY]
        if unknown:
            raise ConfigError(f"unknown operators in whitelist: {unknown}")
        if any(GROUP in REGISTRY[o].params for o in self.operators) and not self.group_fields:
            raise ConfigError("group operators whitelisted but no group fields configured")
        if any(WINDOW in REGISTRY[o].params for o in self.operators) and \
                (not self.windows or min(self.windows) < 2):
            raise ConfigError("window operators need windows >= 2")
        if self.p_mutation < 0 or self.p_crossover < 0 or self.p_mutation + self.p_crossover > 1:
            raise ConfigError("need p_mutation, p_crossover >= 0 and p_mutation + p_crossover <= 1")
        if self.population_size < 2:
            raise ConfigError("population_size must be >= 2")
        if self.tournament_size < 1:
            raise ConfigError("tournament_size must be >= 1")
        if self.max_depth < 1 or self.max_nodes < 1:
            raise ConfigError("max_depth and max_nodes must be >= 1")
        if self.fitness not in FITNESS_KEYS:
            raise ConfigError(f"fitness must be one of {FITNESS_KEYS}")
        if not 0 < self.redundancy_threshold <= 1:
            raise ConfigError("redundancy_threshold must lie in (0, 1]")
        if not 0 < self.validation_fraction <= 1:
            raise ConfigError("validation_fraction must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class Candidate:
    expr: Expr
    fitness: float
    report: FactorReport
    birth_generation: int

    @property
    def text(self) -> str:
        return to_text(self.expr)


def fitness_of(report: FactorReport, key: str) -> float:
    v = float(getattr(report, key))
    return v if math.isfinite(v) else -math.inf


# -- variation operators --------------------------------------------------------

def _terminal(config: MinerConfig, rng: np.random.Generator) -> Expr:
    if config.constants and rng.random() < config.p_constant:
        return Const(float(config.constants[rng.integers(len(config.constants))]))
    return Field(config.fields[rng.integers(len(config.fields))])


def _param(kind: str, config: MinerConfig, rng: np.random.Generator):
    if kind == WINDOW:
        return int(config.windows[rng.integers(len(config.windows))])
    if kind == FRACTION:
        return float(config.fractions[rng.integers(len(config.fractions))])
    return config.group_fields[rng.integers(len(config.group_fields))]


def _grow(config: MinerConfig, rng: np.random.Generator, d: int, max_depth: int) -> Expr:
    # terminal probability rises linearly with depth and is 1 at the cap
    if d >= max_depth or rng.random() < d / max_depth:
        return _terminal(config, rng)
    spec = REGISTRY[config.operators[rng.integers(len(config.operators))]]
    args = tuple(_grow(config, rng, d + 1, max_depth) for _ in range(spec.arity))
    params = tuple(_param(k, config, rng) for k in spec.params)
    return Call(spec.name, args, params)


def random_expr(config: MinerConfig, rng: np.random.Generator, max_depth: int | None = None) -> Expr:
    """Grow a random tree within the depth and node caps."""
    config.validate()
    md = config.max_depth if max_depth is None else max_depth
    for _ in range(RETRIES):
        e = _grow(config, rng, 1, md)
        if size(e) <= config.max_nodes:
            return e
    return _terminal(config, rng)


def _within_caps(e: Expr, config: MinerConfig) -> bool:
    return is_valid(e, config.max_depth, config.max_nodes)


def mutate(expr: Expr, config: MinerConfig, rng: np.random.Generator) -> tuple[Expr, bool]:
    """Replace one uniformly chosen node by a fresh subtree. Returns ``(tree, changed)``."""
    nodes = [p for p, _ in walk(expr)]
    for _ in range(RETRIES):
        path = nodes[rng.integers(len(nodes))]
        budget = config.max_depth - len(path)
        sub = random_expr(config, rng, max_depth=max(budget, 1))
        child = replace_at(expr, path, sub)
        if _within_caps(child, config):
            return child, True
    return expr, False


def crossover(a: Expr, b: Expr, config: MinerConfig,
              rng: np.random.Generator) -> tuple[Expr, Expr, bool]:
    """Swap a uniformly chosen subtree of ``a`` with one of ``b``.

    Every expression node evaluates to a surface, so all node pairs are
    kind-compatible; a pair is rejected only when a child breaks the caps.
    """
    pa = [p for p, _ in walk(a)]
    pb = [p for p, _ in walk(b)]
    for _ in range(RETRIES):
        x = pa[rng.integers(len(pa))]
        y = pb[rng.integers(len(pb))]
        c1 = replace_at(a, x, get_at(b, y))
        c2 = replace_at(b, y, get_at(a, x))
        if _within_caps(c1, config) and _within_caps(c2, config):
            return c1, c2, True
    return a, b, False


# -- search loop -----------------------------------------------------------------

class _Evaluator:
    def __init__(self, panel, fwd, base, config):
        self.panel = panel
        self.fwd = fwd
        self.base = list(base)
        self.config = config
        T = len(panel.dates)
        n_valid = max(1, int(math.ceil(config.validation_fraction * T)))
        self.window = slice(T - n_valid, T)

    def matrix(self, e: Expr) -> FactorMatrix:
        return evaluate(e, self.panel, max_depth=self.config.max_depth)

    def __call__(self, e: Expr) -> tuple[float, FactorReport]:
        c = self.config
        fm = self.matrix(e)
        rep = evaluate_factor(fm, self.fwd, q=c.q, cost_rate=c.cost_rate,
                              periods_per_year=c.periods_per_year, method=c.ic_method,
                              dates=self.window, base=self.base)
        return fitness_of(rep, c.fitness), rep


def _tournament(pop, fit, k, rng):
    idx = rng.integers(len(pop), size=k)
    best = min(idx, key=lambda i: (-fit[i], to_text(pop[i])))
    return pop[best]


def _rank_key(text: str, fitness: float):
    return (-fitness, text)


def mine(panel: PanelFrame, fwd: FactorMatrix, base: Sequence[FactorMatrix], config: MinerConfig,
         workers: int = 1, progress: TextIO | None = None) -> list[Candidate]:
    """Run the GP loop and return accepted candidates, best first."""
    config.validate()
    if fwd.values.shape != panel.shape[:2]:
        raise DataError("panel and forward returns are not aligned")
    missing = set(config.fields) | set(config.group_fields)
    missing -= set(panel.fields)
    if missing:
        raise DataError(f"miner fields not in panel: {sorted(missing)}")
    ev = _Evaluator(panel, fwd, base, config)
    if not fwd.mask[ev.window].any():
        raise DataError("no evaluable dates in the validation range")

    scores: dict[str, tuple[float, FactorReport]] = {}
    trees: dict[str, Expr] = {}
    born: dict[str, int] = {}

    def score(pop: list[Expr], gen: int) -> list[float]:
        fresh = sorted({to_text(e): e for e in pop if to_text(e) not in scores}.items())
        for text, e in fresh:
            trees[text] = e
            born[text] = gen
        if workers > 1 and len(fresh) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(ev, [e for _, e in fresh]))
        else:
            results = [ev(e) for _, e in fresh]
        for (text, _), res in zip(fresh, results):
            scores[text] = res
        return [scores[to_text(e)][0] for e in pop]

    def rng_for(gen: int, idx: int) -> np.random.Generator:
        return np.random.default_rng([config.seed & (2**64 - 1), gen, idx])

    pop = [random_expr(config, rng_for(0, i)) for i in range(config.population_size)]
    fit = score(pop, 0)
    _log(progress, 0, fit)

    for gen in range(1, config.generations + 1):
        elite = min(range(len(pop)), key=lambda i: _rank_key(to_text(pop[i]), fit[i]))
        nxt = [pop[elite]]
        idx = 0
        while len(nxt) < config.population_size:
            rng = rng_for(gen, idx)
            idx += 1
            u = rng.random()
            if u < config.p_crossover:
                a = _tournament(pop, fit, config.tournament_size, rng)
                b = _tournament(pop, fit, config.tournament_size, rng)
                c1, c2, _ = crossover(a, b, config, rng)
                nxt.append(c1)
                if len(nxt) < config.population_size:
                    nxt.append(c2)
            elif u < config.p_crossover + config.p_mutation:
                a = _tournament(pop, fit, config.tournament_size, rng)
                nxt.append(mutate(a, config, rng)[0])
            else:
                nxt.append(_tournament(pop, fit, config.tournament_size, rng))
        pop = nxt
        fit = score(pop, gen)
        _log(progress, gen, fit)

    return _select(scores, trees, born, ev, config)


def _select(scores, trees, born, ev: _Evaluator, config: MinerConfig) -> list[Candidate]:
    ranked = sorted((t for t, (f, _) in scores.items() if math.isfinite(f)),
                    key=lambda t: _rank_key(t, scores[t][0]))
    accepted: list[Candidate] = []
    kept: list[FactorMatrix] = []
    for text in ranked:
        if len(accepted) >= config.top_k:
            break
        fit, rep = scores[text]
        if not fit >= config.min_fitness:
            break
        fm = ev.matrix(trees[text])
        redundant = False
        for other in list(ev.base) + kept:
            c = pooled_correlation(fm, other)
            if math.isfinite(c) and abs(c) > config.redundancy_threshold:
                redundant = True
                break
        if redundant:
            continue
        accepted.append(Candidate(trees[text], fit, rep, born[text]))
        kept.append(fm)
    return accepted


def _log(stream, gen: int, fit: list[float]) -> None:
    if stream is None:
        return
    finite = [f for f in fit if math.isfinite(f)]
    best = max(finite) if finite else float("nan")
    mean = sum(finite) / len(finite) if finite else float("nan")
    stream.write(f"{gen},{_fmt(best)},{_fmt(mean)}\n")


CANDIDATE_HEADER = ("rank", "expr", "fitness", "birth_generation") + REPORT_FIELDS


def candidates_csv(cands: Sequence[Candidate]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CANDIDATE_HEADER) + "\n")
    for k, c in enumerate(cands, start=1):
        cells = [str(k), '"' + c.text + '"', _fmt(c.fitness), str(c.birth_generation)]
        cells += [_fmt(getattr(c.report, f)) for f in REPORT_FIELDS]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()
