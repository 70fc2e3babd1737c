"""Guideline-driven multi-agent diagnostic engine for polycystic ovary syndrome."""

__version__ = "0.1.0"
