"""Masked-pretrained patch transformer pipeline for intrapartum CTG."""

__version__ = "0.1.0"
