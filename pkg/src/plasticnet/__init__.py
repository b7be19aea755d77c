"""Differentiable Hebbian plasticity with neuromodulation."""
