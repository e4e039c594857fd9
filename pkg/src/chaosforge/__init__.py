"""chaosforge: synthesize validated chaotic ODE systems, train a multi-scale
mixture-of-experts forecaster on them, and evaluate forecasts with
attractor-aware metrics."""

__version__ = "0.1.0"
