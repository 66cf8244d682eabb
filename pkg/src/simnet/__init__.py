"""Sparse, robust implicit models trained from extracted network states."""

from .baseline_net import (
    LayeredNet,
    StateBundle,
    accuracy,
    augment_inputs,
    embed_implicit,
    extract_states,
    input_gradient,
    load_bundle,
    load_dataset_csv,
    load_dataset_idx,
    load_net,
    net_nnz,
    rescale_layers,
    save_bundle,
    save_net,
    train_baseline,
)
from .evaluation import (
    AttackConfig,
    EvalReport,
    SweepItem,
    evaluate,
    fgsm_attack,
    model_nnz,
    perturbation_mask,
    sparsity_pct,
    sweep,
)
from .implicit_core import (
    IDENTITY,
    RELU,
    Activation,
    FixedPointReport,
    ImplicitModel,
    PicardDivergenceError,
    check_wellposed,
    leaky_relu,
    load_model,
    picard_solve,
    predict,
    rescale,
    save_model,
    state_scaling,
)
from .matrix_store import (
    CsrMatrix,
    csr_matvec,
    inf_norm,
    load_csr,
    pf_eigenvalue,
    save_csr,
    to_csr,
    to_dense,
)
from .row_solver import (
    EXACT_MATCH_TOL,
    Penalty,
    RowProblem,
    RowSolution,
    RowSolverError,
    SolverConfig,
    berhu_penalty,
    berhu_prox,
    project_l1_ball,
    row_objective,
    soft_threshold,
    solve_row,
)
from .sim_trainer import (
    TrainConfig,
    TrainedModel,
    TrainError,
    build_row_problems,
    bundle_from_implicit,
    rescaled_state_bundle,
    subsample_columns,
    train,
    write_row_report,
)

__version__ = "0.1.0"
