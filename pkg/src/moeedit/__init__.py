"""Routing-stable knowledge editing for synthetic Mixture-of-Experts layers."""

__version__ = "0.1.0"

from .moe_core import (
    Expert,
    GateDecision,
    MoeLayer,
    RoutingSnapshot,
    StackedModel,
    collect_keys,
    expert_forward,
    gate,
    moe_forward,
    random_model,
    stack_forward,
)
from .nullspace import ProjectorSet, build_projector, build_projector_set, covariance, project_keys
from .routing import compare_routing, kl_shift, predict_shift, routing_similarity, softmax_jacobian
from .solver import (
    EditBatch,
    EditRequest,
    SolverError,
    UpdateSet,
    apply_updates,
    assemble_batch,
    bcd_solve,
    objective_value,
    residual_excluding,
    solve_block,
    solve_global,
)
from .harness import ExperimentConfig, run_sequential_edit
