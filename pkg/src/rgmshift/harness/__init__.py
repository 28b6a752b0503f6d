"""Experiment orchestration, statistics and the command-line interface."""
from .stats import off_diagonal_pairs, pearson, permutation_pvalue, spearman

__all__ = ["pearson", "spearman", "permutation_pvalue", "off_diagonal_pairs"]
