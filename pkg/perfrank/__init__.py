"""perfrank: performative, fairness-aware re-ranking simulator."""

__version__ = "1.0.0"
