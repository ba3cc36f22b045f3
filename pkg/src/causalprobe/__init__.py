"""Causality-probing pipeline: perturbation dataset construction, layered
retrieval-augmented prompting, and F1/MCC/perplexity evaluation."""

__version__ = "0.1.0"
