"""Multi-robot, multi-source localization sandbox on learned flow surrogates.

The package is organized around six layers:

- ``mesh`` / ``fem``: triangular P1 finite element substrate.
- ``scenario``: ground-truth flows, sources, solves, and synthetic datasets.
- ``sinkhorn``: debiased entropic transport divergence between nodal densities.
- ``cnwf``: the conservation-preserving reduced-order surrogate (forward +
  inverse) and its training loop.
- ``infotaxis`` / ``swarm``: centralized and distributed active-sensing loops.
- ``harness``: configs, experiment sweeps, reports, plots, and the CLI.
"""

__version__ = "0.1.0"
