"""dnnmg: hybrid finite-element / neural-network Navier-Stokes solver.

A coarse-mesh multigrid solution of the instationary incompressible
Navier-Stokes equations is corrected on one or two finer mesh levels by a
patch-local feedforward network; the corrected velocity feeds back into the
time evolution through the right-hand side of the next step.
"""

__version__ = "0.1.0"

from . import elements, mesh, space, assembly, msolve, net, patch_ops  # noqa: F401
from . import driver, post, config, io, cli                            # noqa: F401
