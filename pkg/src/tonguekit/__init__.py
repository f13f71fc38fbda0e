"""Tongue shape modelling toolkit."""
