"""Online probabilistic forecasting bands for day-ahead electricity prices.

Quantile forecasters (linear/Lasso and gradient-boosted) wrapped in
adaptive split-conformal layers, combined by robust online expert
aggregation, with evaluation and a config-driven backtest CLI.
"""

__version__ = "0.1.0"
