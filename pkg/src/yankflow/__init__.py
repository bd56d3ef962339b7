"""Elastic-equilibrium shape flows driven by a yank, and their inverse problems."""

from .kernel import (
    FactorizationError,
    KernelConfig,
    KernelMatrix,
    ValidationError,
    kernel_matrix,
    matern3,
    matern3_deriv,
    solve_velocity,
)
from .mesh import (
    DegenerateSimplexError,
    FrameDegeneracyError,
    LayeredMesh,
    MeshConstructionError,
    build_layered_template,
    load_mesh,
    save_mesh,
    simplex_frames,
    simplex_gradient,
    simplex_volume,
    split_prisms,
)
from .templates import flat_box_template, flat_template, make_template, mixsin_template, sine_template
from .elasticity import ElasticParams, assemble_operator, elastic_force, energy_form, shape_derivative, strain
from .yank import (
    FreeYank,
    PotentialParams,
    dq_free_work,
    dq_work,
    dtheta_work,
    free_work_form,
    free_yank_covector,
    load_control,
    potential_eval,
    save_control,
    work_form,
    yank_covector,
)
from .varifold import (
    BoundarySurface,
    VarifoldConfig,
    cauchy_kernel,
    discrepancy,
    discrepancy_gradient,
    layer_surface,
    load_surface,
    save_surface,
    total_discrepancy,
    varifold_product,
)
from .dynamics import (
    Costate,
    FlowBreakdownError,
    SolverConfig,
    Trajectory,
    backward_costate,
    export_trajectory_csv,
    forward_flow,
    objective_gradient,
    step_velocity,
)
from .inverse import (
    OptimizerConfig,
    latin_hypercube,
    minimize_bfgs,
    minimize_lbfgs,
    solve_free,
    solve_parametric,
)

__version__ = "0.1.0"
