"""relexp: SQL-view explanations for GNN models over relational databases."""

__version__ = "0.1.0"
