"""Decentralized SGD with sparse differential Gaussian-masked updates.

A desk-scale simulator for gossip-style training with Bernoulli gradient
sparsification and Gaussian masking, plus the Renyi-DP accounting that
calibrates the mask and the convergence diagnostics that bound the error.
"""

__version__ = "0.1.0"

from .algorithms import (
    AlgorithmConfig,
    ConvergenceBound,
    Engine,
    NodeState,
    StepRecord,
    convergence_bound,
    load_trace,
    lyapunov_value_and_grad,
    recommended_schedule,
    replay_residuals,
    save_trace,
    theta_upper_bound,
)
from .errors import (
    ConfigError,
    ConfigParseError,
    ConnectivityFailure,
    DimensionMismatch,
    DomainError,
    EmptyPartition,
    ParseError,
    ScheduleViolation,
    SdmDsgdError,
    SigmaFloorViolation,
)
from .graph import (
    ConsensusMatrix,
    SpectralProfile,
    Topology,
    build_consensus_matrix,
    complete_topology,
    consensus_from_matrix,
    generate_erdos_renyi,
    load_edge_list,
    mixed_matrix,
    path_topology,
    ring_topology,
    save_edge_list,
    topology_from_edges,
)
from .objectives import (
    ClipConfig,
    Dataset,
    ObjectiveProfile,
    clip_gradient,
    estimate_profile,
    global_loss_and_grad,
    load_csv,
    make_objective,
    quadratic_dataset,
    stochastic_gradient,
    synth_classification,
    synth_quadratic,
)
from .privacy import (
    CalibrationResult,
    PrivacyLedger,
    PrivacyParams,
    SIGMA2_FLOOR,
    SensitivityBound,
    alternative_design_epsilon,
    calibrate_sigma,
    gaussian_rdp,
    max_iterations,
    per_iteration_sensitivity,
    rdp_to_dp,
    renyi_order,
    sdm_dsgd_epsilon,
    subsampled_gaussian_rdp,
)
from .simulator import (
    DatasetSpec,
    MetricRecord,
    ObjectiveSpec,
    PrivacySpec,
    RunConfig,
    RunResult,
    TopologySpec,
    count_transmission,
    record_at_budget,
    run,
    sweep,
    write_metrics_csv,
    write_sweep_csv,
)
from .sparsifier import (
    SparseVector,
    SparsifierConfig,
    sparsifier_mean,
    sparsifier_total_variance,
    sparsify,
)
