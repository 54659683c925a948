"""Metric-learning toolkit: triplet training with teacher-distilled dynamic margins."""

from .data import (
    HierarchySpec,
    IdentityDataset,
    PkBatch,
    Sample,
    generate_hierarchical,
    load_dataset_jsonl,
    mine_triplets,
    sample_pk_batch,
    save_dataset_jsonl,
)
from .errors import (
    CapacityError,
    ContractViolation,
    DegenerateInput,
    FormatError,
    InsufficientData,
    MarginDistillError,
    NoTripletsError,
    StagnationError,
    UnknownSampleError,
)
from .evaluation import (
    PairSet,
    VerificationReport,
    build_pairs,
    centroid_distance_matrix,
    spearman,
    structure_correlation,
    threshold_sweep,
    verify,
)
from .loss import (
    BatchLossResult,
    MarginConfig,
    TripletLossResult,
    batch_loss,
    margin_fn,
    triplet_grads,
    triplet_loss,
    triplet_loss_dynamic,
)
from .mlp import (
    MlpModel,
    SgdState,
    backward,
    backward_batch,
    forward,
    forward_batch,
    init_mlp,
    init_sgd,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .numerics import (
    Rng,
    cosine_distance,
    derive_subseed,
    l2_normalize,
    pairwise_sq_euclidean,
    sq_euclidean,
)
from .teacher import (
    CalibrationReport,
    TeacherOracle,
    calibrate_margins,
    gaps_for_batch,
    load_embedding_table,
    load_embedding_table_jsonl,
    save_embedding_table,
    save_embedding_table_jsonl,
    tabulate,
    teacher_embed,
    teacher_gap,
)
from .training import DistillConfig, TeacherTrainConfig, TrainLog, distill, train_teacher

__version__ = "0.1.0"
