"""Group-to-group sparse MLPs with dynamic sparse training."""

__version__ = "0.1.0"
