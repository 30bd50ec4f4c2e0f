"""Neural implicit surface reconstruction with sensed surface patches.

Modules: ``autodiff`` (tape-based reverse mode), ``fields`` (SDF and colour
networks, analytic primitives), ``camera``, ``rendering`` (volume rendering),
``sensing`` (pulled surface patches), ``losses``, ``training``, ``scenes``
(synthetic datasets), ``evaluation`` (marching cubes and metrics) and ``cli``.
"""

__version__ = "0.1.0"
