"""
Factor expressions and their information coefficient
=====================================================

A factor is a small expression over panel fields. We parse one, evaluate
it on a synthetic price/volume panel, and look at how well it ranks the
next day's returns.
"""

import numpy as np

from quantpipe.dsl import evaluate, parse, required_fields, to_text
from quantpipe.metrics import evaluate_factor, information_coefficient
from quantpipe.synthetic import planted_signal

# The panel's forward returns were generated from a known factor plus noise.
panel, fwd, planted = planted_signal(n_instruments=60, n_dates=200, seed=3)
print(panel.shape, "(dates, instruments, fields)")

###############################################################################
# Parsing accepts function form and infix sugar; printing is canonical.

e = parse("-ts_corr(rank(close), rank(volume), 5)")
print(to_text(e), required_fields(e))
print(to_text(parse("(close - ts_mean(close, 10)) / ts_std(close, 10)")))

###############################################################################
# Evaluation gives a dates x instruments surface plus a mask. Window
# operators need a full window, so the first few dates are masked.

f = evaluate(e, panel)
print("defined cells per date (first 8):", f.mask.sum(axis=1)[:8])

###############################################################################
# Daily rank IC against forward returns, and the summary report.

ic = information_coefficient(f, fwd)
print("IC mean %.3f, std %.3f" % (np.nanmean(ic), np.nanstd(ic, ddof=1)))

for text in ("-ts_corr(rank(close), rank(volume), 5)", "ts_corr(rank(close), rank(volume), 5)",
             "rank(ts_delta(close, 5))", "-ts_corr(rank(close), rank(volume), 20)"):
    rep = evaluate_factor(evaluate(parse(text), panel), fwd, q=0.1)
    print(f"{text:45s} IC {rep.ic_mean:+.3f}  ICIR {rep.icir:+.2f}  Sharpe {rep.sharpe:+.2f}")

# Flipping the sign flips the IC exactly; a longer window dilutes the signal.
