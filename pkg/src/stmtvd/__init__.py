"""Statement-level vulnerability detection with graph attention over program dependence graphs."""

__version__ = "0.1.0"
