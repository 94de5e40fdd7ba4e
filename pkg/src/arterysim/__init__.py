"""Coupled drug-diffusion / arterial-wall mechanics simulator.

Quasi-static anisotropic hyperelasticity with an active smooth muscle
response, coupled to drug reaction-diffusion, discretized with quadratic
tetrahedra and solved by Newton-GMRES with monolithic two-level overlapping
Schwarz preconditioners (GDSW / reduced GDSW coarse spaces) and recycling of
setup components across Newton and time steps.
"""

__version__ = "0.1.0"

from . import errors
from .materials import (ActiveParams, DrugParams, GaussPointState,
                        KineticParams, PassiveParams)
from .mesh import Mesh, generate_cube_mesh, generate_tube_mesh, read_gmsh
from .partition import (Partition, load_partition, partition_greedy,
                        partition_structured)

__all__ = [
    "ActiveParams", "DrugParams", "GaussPointState", "KineticParams",
    "PassiveParams", "Mesh", "generate_cube_mesh", "generate_tube_mesh",
    "read_gmsh", "Partition", "load_partition", "partition_greedy",
    "partition_structured", "errors", "__version__",
]
