"""Integer-only sleep staging and closed-loop stimulation toolkit."""

__version__ = "0.1.0"
