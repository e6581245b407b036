"""Budget-aware dynamic routing of detection proposals over an operator set.

Subsystems:

* :mod:`dpp.autodiff` - tape-based reverse-mode differentiation (float64).
* :mod:`dpp.boxgeo` - box geometry, Hungarian matching, average precision.
* :mod:`dpp.operators` - the per-proposal operator set and its FLOP model.
* :mod:`dpp.selector` - the learned per-proposal routing function.
* :mod:`dpp.head` - the staged detection head and its training losses.
* :mod:`dpp.complexity` - cost accounting, frontiers, exhaustive oracle.
* :mod:`dpp.synthbench` - synthetic scenes, training pipeline, evaluation.
* :mod:`dpp.cli` - the ``dpp`` command-line entry point.
"""

__version__ = "0.1.0"
