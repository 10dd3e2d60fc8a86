"""H(div)-conforming finite elements for doubly-diffusive incompressible flow."""
from .mesh import (Mesh, build_lshape_mesh, build_rectangle_mesh, locate_point, refine_marked,
                   refine_uniform)
from .fem import (DiscreteField, FunctionSpace, bdm_interpolate, bdm_space, eval_basis, l2_project,
                  lagrange_interpolate, lagrange_space, pressure_space, transfer_field)
from .quadrature import quadrature_rule
from .assembly import BoundaryConditions, CoupledSystem, PhysicalParams, Viscosity
from .timestepping import StepState, advance, picard_advance, solve_steady
from .problems import get_problem, run_experiment
from .vtk import write_vtk

__version__ = "0.1.0"
