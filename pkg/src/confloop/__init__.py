"""Iterative confounder discovery and subgroup treatment-effect estimation.

The engine fits honest causal trees over observational data, asks an
LLM-backed agent to propose confounders from the tree's subgroup rules
(grounded by retrieval with a tool fallback), gates the proposals through
an expert decision step, stratifies the working data on accepted
confounders, and re-estimates per-sample bootstrap confidence intervals
until no new confounders turn up. The result is a stack of per-iteration
trees queried by backward path tracing.
"""

__version__ = "0.1.0"
