"""Language-aware soft prompt tuning on a desk-scale frozen dual encoder."""

__version__ = "0.1.0"
