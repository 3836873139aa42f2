"""Multi-task learning-to-rank over multi-step conversion journeys.

The package covers the full offline loop: simulate guest journeys, attribute
milestone labels back to impressions, train a chained multi-task ranker with
context-dependent score combination, and evaluate with rank metrics and
interpretability curves.
"""

__version__ = "0.1.0"
