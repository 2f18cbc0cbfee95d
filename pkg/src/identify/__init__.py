"""Identification routines: stochastic helpers, min-volume factorization,
diversity audits, kernel embeddings, cross-state alignment and the estimator."""
