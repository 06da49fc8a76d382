"""Deep metric learning for contact perception from robot proprioception.

Modules: ``tensor`` (numeric kernels), ``nn`` (networks and checkpoints),
``losses``, ``cluster``, ``data``, ``train``, ``eval``, ``stream`` and ``cli``.
"""

__version__ = "0.1.0"
