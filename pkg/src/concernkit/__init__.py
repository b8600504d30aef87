"""Mining, categorizing, prioritizing and tracking ethical concerns in forum posts."""

__version__ = "0.1.0"
