"""
Combining factors and trading them
==================================

Several weak factors are blended with a rolling ridge model, explained with
permutation importance, then traded with a quantile rule and with the
constrained optimizer.
"""

import numpy as np

from quantpipe import combiner
from quantpipe.dsl import evaluate, parse
from quantpipe.metrics import breadth, evaluate_factor, forward_returns, forward_splits, fundamental_law_ir
from quantpipe.panel import from_arrays
from quantpipe.portfolio import QpTemplate, run_backtest
from quantpipe.synthetic import business_dates, calibrated_ic_signal, instrument_ids

###############################################################################
# A panel with one informative field: "sentiment" at date t leaks a little of
# the return from t to t + 1, buried in noise.

rng = np.random.default_rng(5)
T, N = 260, 60
rets = rng.normal(0, 0.02, size=(T, N))
close = 100 * np.cumprod(1 + rets, axis=0)
sentiment = rng.normal(0, 0.02, size=(T, N))
sentiment[:-1] += 0.15 * rets[1:]
volume = np.exp(rng.normal(13, 0.4, size=(T, N)))
panel = from_arrays(business_dates(T), instrument_ids(N),
                    {"close": close, "volume": volume, "sentiment": sentiment})
fwd = forward_returns(panel)
texts = ["rank(sentiment)", "decay_linear(sentiment, 3)", "-rank(volume)"]
factors = [evaluate(parse(t), panel) for t in texts]

###############################################################################
# Rolling fit: each window picks lambda on its validation block and scores
# the following test block. Training labels that are not yet realised are
# purged.

plan = forward_splits(len(panel.dates), train=120, valid=20, test=20, step=20)
scores = combiner.rolling_fit_predict(factors, fwd, plan, factor_ids=["sent", "sent_decay", "vol"])
print("combined IC on test blocks %.3f" % combiner.mean_ic(scores, fwd))

model = combiner.fit(factors, fwd, window=range(0, 200), lam=0.1, factor_ids=["sent", "sent_decay", "vol"])
print(model.to_csv())
imp = combiner.permutation_importance(model, factors, fwd, K=5, seed=0, dates=range(200, 259))
print(imp.to_csv())

###############################################################################
# Backtests. The optimizer caps risk, per-name weight and turnover.

for rule in ("quantile", "optimizer"):
    res = run_backtest(panel, scores, rule=rule, q=0.1, cost_rate=0.0005,
                       qp=QpTemplate(c1=0.0004, c2=0.1, c3=0.05, lookback=60))
    r = res.report
    print(f"{rule:9s} final equity {res.equity[-1]:.3f}  Sharpe {r.sharpe:+.2f}  "
          f"max drawdown {r.max_drawdown:.1%}  avg turnover {r.avg_turnover:.2f}")
# dates before the first test block have no combined score, so those rebalances hold cash
print("skipped rebalances:", len(res.skipped))

###############################################################################
# The fundamental law IR = IC * sqrt(breadth). With breadth counted as
# rebalances per year the prediction is far below what a 500-name
# cross-section delivers; counting every name as a decision overshoots a bit.

f, r = calibrated_ic_signal(500, 252, seed=11)
rep = evaluate_factor(f, r, q=0.1)
print(f"IC {rep.ic_mean:.3f}  realized IR {rep.sharpe:.1f}  "
      f"IC*sqrt(252) {fundamental_law_ir(rep.ic_mean, breadth(252)):.1f}  "
      f"IC*sqrt(252*500) {fundamental_law_ir(rep.ic_mean, breadth(252, 500, 'decisions')):.1f}")
