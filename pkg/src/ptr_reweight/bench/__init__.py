"""Synthetic benchmark: world, toy policy, training, evaluation and comparison."""
