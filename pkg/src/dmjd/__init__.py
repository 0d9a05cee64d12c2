"""Masked image pretraining with disjoint view masks and visible-token distillation, at desk scale."""

__version__ = "0.1.0"
