"""Hierarchical natural actor-critic for partially exchangeable multi-agent
LQR: decomposition into decoupled auxiliary systems, analytic LQR machinery,
temporal-difference policy evaluation, and natural-gradient training.
"""

from . import cli, decomp, errors, gtd, matlin, npg, oracle, sim, sysmodel

__version__ = "0.1.0"

__all__ = [
    "cli",
    "decomp",
    "errors",
    "gtd",
    "matlin",
    "npg",
    "oracle",
    "sim",
    "sysmodel",
    "__version__",
]
