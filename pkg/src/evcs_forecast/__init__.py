"""Probabilistic hourly load forecasting for EV charging stations.

An LSTM gives the point forecast and its cell state feeds a PPO policy
that picks the forecast scale, giving ``N(mu, delta^2)`` per hour.
"""

__version__ = "0.1.0"
