"""
Genetic search on a planted signal
==================================

Forward returns are built from a hidden factor. A short genetic-programming
run with a narrow operator set should find something as predictive.
"""

import sys

from quantpipe.dsl import evaluate, to_text
from quantpipe.metrics import evaluate_factor
from quantpipe.miner import MinerConfig, candidates_csv, mine
from quantpipe.synthetic import PLANTED, planted_signal

panel, fwd, planted = planted_signal(n_instruments=50, n_dates=150, seed=7)
target = evaluate_factor(planted, fwd).ic_mean
print(f"hidden factor {PLANTED}: IC {target:.3f}")

###############################################################################
# Fitness is measured on the trailing quarter of dates; progress lines are
# "generation,best,mean".

cfg = MinerConfig(seed=1, population_size=60, generations=8, operators=("neg", "rank", "ts_corr"),
                  windows=(3, 5, 10), top_k=5)
cands = mine(panel, fwd, [], cfg, workers=2, progress=sys.stdout)

###############################################################################
# Accepted candidates are mutually decorrelated and sorted by fitness.

print(candidates_csv(cands))
best = cands[0]
ic = evaluate_factor(evaluate(best.expr, panel), fwd).ic_mean
print(f"best {to_text(best.expr)}: IC {ic:.3f} ({ic / target:.0%} of the hidden factor)")

###############################################################################
# Passing the discovered factor as the existing base makes the next search
# look for something different.

again = mine(panel, fwd, [evaluate(best.expr, panel)], cfg)
print("with the base excluded:", [to_text(c.expr) for c in again[:3]])
