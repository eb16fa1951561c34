"""Progressive structure-from-motion on a clustered viewgraph."""

__version__ = "0.1.0"
