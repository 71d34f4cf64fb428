"""Functional-data quantile model averaging."""
