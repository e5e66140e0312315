"""Desk-scale prefix-LM vision-language pretraining on a synthetic shapes world."""

__version__ = "0.1.0"
