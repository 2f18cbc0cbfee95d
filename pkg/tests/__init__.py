"""
latentact-id test suite

Unit, property and reduced end-to-end tests for the identification routines
and the scenario harness.
"""
