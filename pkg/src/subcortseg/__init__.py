"""Sub-cortical brain structure segmentation with a four-branch 2.5D patch CNN."""

__version__ = "0.1.0"
