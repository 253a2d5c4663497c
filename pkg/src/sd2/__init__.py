"""Self-distilled disentanglement for counterfactual prediction."""

__version__ = "0.1.0"
