"""Aggregator-prosumer real-time market: bilevel pricing and its convex surrogate."""
