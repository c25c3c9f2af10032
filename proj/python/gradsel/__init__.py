"""Optimizer-aware gradient matching for online data selection."""

from ._gradsel import (
    ConfigError,
    Error,
    NumericError,
    ProjectedSample,
    ProjectionSpec,
    SampleGradient,
    ShapeError,
    ValAggregate,
    adam_update,
    as_projected,
    bench_kernels,
    gram_system,
    greedy_filter,
    inner_ghost,
    inner_naive,
    inner_reordered,
    kfac_second_order_score,
    linearized_preconditioner,
    make_projection,
    nnls_solve,
    omp_select,
    parse_config,
    planned_steps,
    precondition_target,
    project,
    ridge_solve,
    run_experiment,
    run_online,
    select,
    strategies,
    topk_select,
    two_stage_select,
    val_aggregate,
    weighted_aggregate,
)

__version__ = "0.1.0"
