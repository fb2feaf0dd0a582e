"""Backbone adapter: patch features, density predictions, reference trainer."""

__version__ = "0.1.0"
