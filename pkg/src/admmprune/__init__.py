"""Deterministic simulator for hierarchical consensus training with
structured pruning, physical buffer shrinkage, and byte-exact communication
accounting."""

from .consensus import (
    ConsensusSettings,
    ConsensusState,
    PenaltySchedule,
    ResidualReport,
    adapt_penalties,
    dual_update_intra,
    freeze_check,
    load_checkpoint,
    node_candidate,
    run_hierarchical,
    save_checkpoint,
    update_node_consensus,
)
from .errors import ConfigError, ProtocolError, ShapeError
from .harness import (
    ExperimentConfig,
    RunResult,
    load_config,
    run_experiment,
    summarize_volume,
    validate_config,
)
from .shrinkage import (
    CompactBuffer,
    KeepIndexSets,
    KeepSetCache,
    compress,
    decompress,
    derive_keep_sets,
    shrunk_payload_elements,
)
from .sparsity import (
    ConstraintKind,
    SparsityConstraint,
    extract_mask,
    mask_drift,
    project,
    project_composite,
)
from .tensors import GroupBy, LayerKind, LayerSpec, frobenius_norm, group_norms
from .transport import (
    Cluster,
    CommLedger,
    LatencyModel,
    ProcessGroup,
    ReduceOp,
    Topology,
    bucketize,
)
from .workloads import SolverConfig, proximal_sgd

__version__ = "0.1.0"
