"""Differentiable cross-diffusion simulator for multi-class anatomy on the probability simplex."""
