"""Condition-controllable retrieval models on a synthetic watch-time world.

Submodules are imported lazily by callers; importing the package itself does
not pull in numpy so the CLI can pin BLAS threading first.
"""

__version__ = "0.1.0"
